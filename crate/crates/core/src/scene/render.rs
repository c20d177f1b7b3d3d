//! Bird's-eye-view pictures: feature maps as grayscale and boxes as
//! colored outlines.

use crate::bev::BevGridSpec;
use crate::boxes::{Box3D, ObjectClass};
use crate::eval::match_detections;
use crate::head::Detection;
use crate::ppm::RgbImage;
use crate::tensor::Tensor;

pub const COLOR_GT: [u8; 3] = [0, 0, 255];
pub const COLOR_TP: [u8; 3] = [0, 255, 0];
pub const COLOR_FP: [u8; 3] = [255, 0, 0];

/// A black image over a BEV grid, `scale` pixels per cell; column follows
/// ego x and row follows ego y, as in the grid's own layout.
pub struct BevCanvas {
    pub spec: BevGridSpec,
    pub scale: usize,
    pub image: RgbImage,
}

impl BevCanvas {
    pub fn new(spec: BevGridSpec, scale: usize) -> Self {
        let scale = scale.max(1);
        let image = RgbImage::new(spec.cells_x() * scale, spec.cells_y() * scale);
        Self { spec, scale, image }
    }

    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let k = self.scale as f64 / self.spec.resolution;
        ((x - self.spec.x_min) * k, (y - self.spec.y_min) * k)
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), rgb: [u8; 3]) {
        let n = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            self.image.put_signed(x.floor() as i64, y.floor() as i64, rgb);
        }
    }
}

/// Footprint outline, optionally with a tick from the center to the front edge.
pub fn draw_box(canvas: &mut BevCanvas, b: &Box3D, rgb: [u8; 3], heading: bool) {
    let fp = b.bev_footprint().map(|(x, y)| canvas.to_pixel(x, y));
    for i in 0..4 {
        canvas.line(fp[i], fp[(i + 1) % 4], rgb);
    }
    if !heading {
        return;
    }
    let (s, c) = b.yaw.sin_cos();
    let front = canvas.to_pixel(b.cx + c * b.l / 2.0, b.cy + s * b.l / 2.0);
    canvas.line(canvas.to_pixel(b.cx, b.cy), front, rgb);
}

/// Per-cell maximum over channels, scaled so the largest positive value is
/// white. An all-zero map renders black.
pub fn render_feature_map(map: &Tensor) -> RgbImage {
    let (c, h, w) = match *map.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => (1, 1, map.len()),
    };
    let plane = h * w;
    let cell_max: Vec<f64> =
        (0..plane).map(|p| (0..c).map(|ch| map.data()[ch * plane + p]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let top = cell_max.iter().cloned().fold(0.0, f64::max);
    let mut img = RgbImage::new(w, h);
    if top > 0.0 {
        for (p, &v) in cell_max.iter().enumerate() {
            let g = (v.max(0.0) / top * 255.0).round() as u8;
            img.put(p % w, p / w, [g, g, g]);
        }
    }
    img
}

/// Ground truth as blue outlines; detections, with heading ticks, green when
/// they match a gt of their class at `iou_thr` and red otherwise.
pub fn render_bev_detections(
    spec: &BevGridSpec,
    gts: &[(Box3D, ObjectClass)],
    dets: &[Detection],
    iou_thr: f64,
    scale: usize,
) -> RgbImage {
    let mut canvas = BevCanvas::new(*spec, scale);
    for class in ObjectClass::ALL {
        let d: Vec<Detection> = dets.iter().filter(|d| d.class == class).copied().collect();
        let g: Vec<Box3D> = gts.iter().filter(|(_, c)| *c == class).map(|(b, _)| *b).collect();
        let m = match_detections(&d, &g, iou_thr);
        for &(p, _, _) in &m.pairs {
            draw_box(&mut canvas, &d[p].bbox, COLOR_TP, true);
        }
        for &p in &m.false_positives {
            draw_box(&mut canvas, &d[p].bbox, COLOR_FP, true);
        }
    }
    for (b, _) in gts {
        draw_box(&mut canvas, b, COLOR_GT, false);
    }
    canvas.image
}
