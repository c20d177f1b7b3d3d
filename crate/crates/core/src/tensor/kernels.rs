//! Raw numeric kernels shared by the forward and backward passes.

/// `c (m×n) = [c +] op(a) (m×k) · op(b) (k×n)`.
///
/// `a_t` means `a` is stored as `k×m`; `b_t` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Some(Self { c_in, h, w, k, stride, pad, h_out, w_out })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds `x` (`C×H×W`) into a `(C·k·k) × (H_out·W_out)` column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[oi * g.w_out + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.w_out + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear stencil for one continuous sample point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
}

impl Stencil {
    /// `None` when `(u, v)` lies outside `[0, w-1] × [0, h-1]`.
    pub fn new(u: f64, v: f64, h: usize, w: usize) -> Option<Self> {
        if h == 0 || w == 0 || !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        if u > (w - 1) as f64 || v > (h - 1) as f64 {
            return None;
        }
        let x0 = (u.floor() as usize).min(w - 1);
        let y0 = (v.floor() as usize).min(h - 1);
        Some(Self {
            x0,
            x1: (x0 + 1).min(w - 1),
            y0,
            y1: (y0 + 1).min(h - 1),
            fx: u - x0 as f64,
            fy: v - y0 as f64,
        })
    }

    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }

    /// Interpolates channels `c0..c0+out.len()` of a `C×H×W` map, adding `scale·value`.
    pub fn gather_add(&self, map: &[f64], h: usize, w: usize, c0: usize, scale: f64, out: &mut [f64]) {
        let [w00, w01, w10, w11] = self.weights();
        let hw = h * w;
        let (i00, i01) = (self.y0 * w + self.x0, self.y0 * w + self.x1);
        let (i10, i11) = (self.y1 * w + self.x0, self.y1 * w + self.x1);
        for (k, o) in out.iter_mut().enumerate() {
            let base = (c0 + k) * hw;
            let v = w00 * map[base + i00] + w01 * map[base + i01] + w10 * map[base + i10] + w11 * map[base + i11];
            *o += scale * v;
        }
    }

    /// Backward of `gather_add` with upstream gradient `g` (already scaled).
    /// Accumulates into `dmap` (if any) and returns `(d/du, d/dv)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        map: &[f64],
        h: usize,
        w: usize,
        c0: usize,
        g: &[f64],
        dmap: Option<&mut [f64]>,
    ) -> (f64, f64) {
        let hw = h * w;
        let (i00, i01) = (self.y0 * w + self.x0, self.y0 * w + self.x1);
        let (i10, i11) = (self.y1 * w + self.x0, self.y1 * w + self.x1);
        let (fx, fy) = (self.fx, self.fy);
        let mut du = 0.0;
        let mut dv = 0.0;
        for (k, &gk) in g.iter().enumerate() {
            let base = (c0 + k) * hw;
            let (v00, v01, v10, v11) = (map[base + i00], map[base + i01], map[base + i10], map[base + i11]);
            du += gk * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
            dv += gk * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
        }
        if let Some(dmap) = dmap {
            let [w00, w01, w10, w11] = self.weights();
            for (k, &gk) in g.iter().enumerate() {
                let base = (c0 + k) * hw;
                dmap[base + i00] += w00 * gk;
                dmap[base + i01] += w01 * gk;
                dmap[base + i10] += w10 * gk;
                dmap[base + i11] += w11 * gk;
            }
        }
        (du, dv)
    }
}

/// Bilinear sample of every channel of a `C×H×W` map at `(u, v)`; zeros outside the map.
pub fn bilinear_sample_point(map: &super::Tensor, u: f64, v: f64) -> Vec<f64> {
    let s = map.shape();
    assert_eq!(s.len(), 3, "bilinear_sample_point expects a C×H×W map");
    let mut out = vec![0.0; s[0]];
    if let Some(st) = Stencil::new(u, v, s[1], s[2]) {
        st.gather_add(map.data(), s[1], s[2], 0, 1.0, &mut out);
    }
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
