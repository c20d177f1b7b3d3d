//! Center-heatmap detection head: forward pass, training targets, decoding,
//! rotated NMS and the training loss.

use serde::{Deserialize, Serialize};

use crate::bev::{BevFeatureMap, BevGridSpec};
use crate::boxes::{normalize_angle, rotated_iou_bev, Box3D, ObjectClass};
use crate::layers::{conv, he_bound};
use crate::tensor::{BoundParams, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Regression channels: `dx, dy, z, log L, log W, log H, sin θ, cos θ`.
pub const REG_CHANNELS: usize = 8;
/// Heatmap bias so the initial score is about 0.1.
pub const HEATMAP_PRIOR: f64 = -2.19;
pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const REG_WEIGHT: f64 = 0.25;

pub fn init_head(store: &mut ParamStore, channels: usize, n_classes: usize, seed: u64) {
    store.init_uniform("head.trunk.kernel", &[channels, channels, 3, 3], he_bound(channels * 9), seed);
    store.init_const("head.trunk.bias", &[channels], 0.0);
    store.init_uniform("head.heatmap.kernel", &[n_classes, channels, 1, 1], he_bound(channels) * 0.1, seed);
    store.init_const("head.heatmap.bias", &[n_classes], HEATMAP_PRIOR);
    store.init_uniform("head.regression.kernel", &[REG_CHANNELS, channels, 1, 1], he_bound(channels) * 0.1, seed);
    store.init_const("head.regression.bias", &[REG_CHANNELS], 0.0);
}

/// Head outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub heatmap_logits: Var,
    /// Sigmoid of the logits, `n_classes×cells_y×cells_x`.
    pub heatmap: Var,
    /// `8×cells_y×cells_x`.
    pub regression: Var,
}

impl HeadOutput {
    pub fn maps(&self, tape: &Tape) -> HeadMaps {
        HeadMaps { heatmap: tape.value(self.heatmap).clone(), regression: tape.value(self.regression).clone() }
    }
}

/// Plain values of a [`HeadOutput`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps {
    pub heatmap: Tensor,
    pub regression: Tensor,
}

pub fn head_forward(tape: &mut Tape, f_bev: &BevFeatureMap, params: &BoundParams) -> Result<HeadOutput> {
    let c = tape.shape(f_bev.var).first().copied().unwrap_or(0);
    let trunk_in = tape.shape(params.get("head.trunk.kernel")?)[1];
    if c != trunk_in {
        return Err(TensorError::Dimension(format!("{c}-channel BEV map for a {trunk_in}-channel head")));
    }
    let t = conv(tape, params, "head.trunk", f_bev.var, 1, 1)?;
    let t = tape.relu(t)?;
    let heatmap_logits = conv(tape, params, "head.heatmap", t, 1, 0)?;
    let heatmap = tape.sigmoid(heatmap_logits)?;
    let regression = conv(tape, params, "head.regression", t, 1, 0)?;
    Ok(HeadOutput { heatmap_logits, heatmap, regression })
}

/// Training targets on the BEV grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// `n_classes×cells_y×cells_x`, peak 1 at each center cell.
    pub heatmap: Tensor,
    /// `8×cells.len()`, channel-major.
    pub regression: Vec<f64>,
    /// Flat indices of supervised cells.
    pub cells: Vec<usize>,
    /// Boxes whose center lies outside the extent.
    pub skipped: usize,
    /// Boxes whose center cell was already taken by an earlier box.
    pub collisions: usize,
}

/// Splat radius in cells for a box footprint.
pub fn splat_radius(b: &Box3D, res: f64) -> usize {
    ((0.5 * b.l.min(b.w) / res).round() as usize).max(1)
}

pub fn encode_targets(gt: &[(Box3D, ObjectClass)], spec: &BevGridSpec, n_classes: usize) -> Targets {
    let (cx, cy) = (spec.cells_x(), spec.cells_y());
    let mut heatmap = Tensor::zeros(&[n_classes, cy, cx]);
    let mut regs: Vec<[f64; REG_CHANNELS]> = Vec::new();
    let mut cells = Vec::new();
    let (mut skipped, mut collisions) = (0, 0);
    for (b, class) in gt {
        let (Some((ix, iy)), true) = (spec.cell_of(b.cx, b.cy), class.index() < n_classes) else {
            skipped += 1;
            continue;
        };
        let r = splat_radius(b, spec.resolution) as isize;
        let sigma = (2 * r + 1) as f64 / 6.0;
        let plane = &mut heatmap.data_mut()[class.index() * cx * cy..(class.index() + 1) * cx * cy];
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (ix as isize + dx, iy as isize + dy);
                if x < 0 || y < 0 || x >= cx as isize || y >= cy as isize {
                    continue;
                }
                let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let v = &mut plane[y as usize * cx + x as usize];
                *v = v.max(g.min(1.0));
            }
        }
        let cell = spec.flat(ix, iy);
        if cells.contains(&cell) {
            collisions += 1;
            continue;
        }
        cells.push(cell);
        let ox = (b.cx - spec.x_min) / spec.resolution - ix as f64;
        let oy = (b.cy - spec.y_min) / spec.resolution - iy as f64;
        let (s, c) = b.yaw.sin_cos();
        regs.push([ox, oy, b.cz, b.l.ln(), b.w.ln(), b.h.ln(), s, c]);
    }
    let mut regression = vec![0.0; REG_CHANNELS * cells.len()];
    for (i, r) in regs.iter().enumerate() {
        for ch in 0..REG_CHANNELS {
            regression[ch * cells.len() + i] = r[ch];
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} boxes outside the BEV extent were skipped");
    }
    Targets { heatmap, regression, cells, skipped, collisions }
}

/// A scored box of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub class: ObjectClass,
    pub score: f64,
}

/// One line of a detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    pub class: ObjectClass,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 7],
}

impl DetectionRecord {
    pub fn new(scene: Option<String>, d: &Detection) -> Self {
        Self { scene, class: d.class, score: d.score, bbox: d.bbox.to_array() }
    }

    pub fn detection(&self) -> std::result::Result<Detection, String> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        let bbox = Box3D::from_array(self.bbox).map_err(|e| e.to_string())?;
        Ok(Detection { bbox, class: self.class, score: self.score })
    }
}

/// 3×3 peaks of the heatmap above `score_thr`, best `max_dets` first.
pub fn decode_boxes(out: &HeadMaps, spec: &BevGridSpec, max_dets: usize, score_thr: f64) -> Vec<Detection> {
    let (cx, cy) = (spec.cells_x(), spec.cells_y());
    let hm = out.heatmap.data();
    let reg = out.regression.data();
    let plane = cx * cy;
    let n_classes = hm.len() / plane.max(1);
    let mut peaks = Vec::new();
    for k in 0..n_classes {
        let Some(class) = ObjectClass::from_index(k) else { continue };
        let m = &hm[k * plane..(k + 1) * plane];
        for iy in 0..cy {
            for ix in 0..cx {
                let v = m[iy * cx + ix];
                if v < score_thr {
                    continue;
                }
                let is_peak = (iy.saturating_sub(1)..(iy + 2).min(cy))
                    .all(|y| (ix.saturating_sub(1)..(ix + 2).min(cx)).all(|x| m[y * cx + x] <= v));
                if is_peak {
                    peaks.push((v, class, ix, iy));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then((a.3, a.2).cmp(&(b.3, b.2))));
    peaks.truncate(max_dets);
    peaks
        .into_iter()
        .filter_map(|(score, class, ix, iy)| {
            let r = |ch: usize| reg[ch * plane + iy * cx + ix];
            let yaw = normalize_angle(r(6).atan2(r(7)));
            let bbox = Box3D::new(
                spec.x_min + (ix as f64 + r(0)) * spec.resolution,
                spec.y_min + (iy as f64 + r(1)) * spec.resolution,
                r(2),
                r(3).exp(),
                r(4).exp(),
                r(5).exp(),
                yaw,
            )
            .ok()?;
            Some(Detection { bbox, class, score: score.clamp(0.0, 1.0) })
        })
        .collect()
}

/// Greedy per-class suppression in descending score order.
pub fn rotated_nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| k.class != d.class || rotated_iou_bev(&k.bbox, &d.bbox) < iou_thr) {
            kept.push(*d);
        }
    }
    kept
}

/// Focal heatmap loss plus weighted L1 on supervised cells.
pub fn detection_loss(tape: &mut Tape, out: &HeadOutput, targets: &Targets) -> Result<Var> {
    let focal = tape.focal_loss(out.heatmap_logits, &targets.heatmap, FOCAL_ALPHA, FOCAL_BETA)?;
    if targets.cells.is_empty() {
        return Ok(focal);
    }
    let l1 = tape.masked_l1(out.regression, &targets.regression, &targets.cells)?;
    let l1 = tape.scale(l1, REG_WEIGHT)?;
    tape.add(focal, l1)
}
