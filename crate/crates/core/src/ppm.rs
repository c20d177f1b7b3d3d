//! 8-bit RGB images and binary PPM (P6) encoding.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PpmError {
    #[error("not a binary PPM: {0}")]
    Header(String),
    #[error("PPM body has {got} bytes, expected {expected}")]
    Truncated { got: usize, expected: usize },
}

/// Row-major interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self { width, height, data: rgb.repeat(width * height) }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Ignores coordinates outside the image.
    pub fn put_signed(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.put(x as usize, y as usize, rgb);
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Accepts `#` comments and arbitrary whitespace in the header.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self, PpmError> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(PpmError::Header("header ends early".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(PpmError::Header(format!("magic `{}`", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| PpmError::Header(format!("bad number `{s}`")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(PpmError::Header(format!("maxval {maxval}, only 255 is supported")));
        }
        // exactly one whitespace byte separates the header from the body
        pos += 1;
        let expected = width * height * 3;
        let body = bytes.get(pos..).unwrap_or_default();
        if body.len() != expected {
            return Err(PpmError::Truncated { got: body.len(), expected });
        }
        Ok(Self { width, height, data: body.to_vec() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_round_trip() {
        let mut img = RgbImage::new(3, 2);
        img.put(2, 1, [1, 2, 3]);
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
        assert_eq!(RgbImage::from_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn comments_and_errors() {
        let mut bytes = b"P6 # made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7, 6, 5, 4]);
        let img = RgbImage::from_ppm(&bytes).unwrap();
        assert_eq!(img.get(1, 0), [6, 5, 4]);
        assert!(matches!(RgbImage::from_ppm(b"P3\n1 1\n255\n"), Err(PpmError::Header(_))));
        assert!(matches!(RgbImage::from_ppm(b"P6\n2 2\n255\n\x00"), Err(PpmError::Truncated { .. })));
        assert!(RgbImage::from_ppm(b"P6\n2").is_err());
    }
}
