//! Image backbone, height network, camera modulation and the deformable
//! multi-scale fusion of height features into context features.

use serde::{Deserialize, Serialize};

use crate::geometry::CameraIntrinsics;
use crate::layers::{conv, he_bound, lecun_bound, linear};
use crate::tensor::{BoundParams, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// A `C×H×W` feature map on a tape plus its stride relative to the input image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl FeatureMap {
    pub fn from_var(tape: &Tape, var: Var, stride: usize) -> Result<Self> {
        match *tape.shape(var) {
            [channels, height, width] if stride >= 1 => Ok(Self { var, channels, height, width, stride }),
            ref s => Err(TensorError::Dimension(format!("feature map must be C×H×W with stride ≥ 1, got {s:?}"))),
        }
    }
}

/// Uniform discretization of heights above the ground.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeightBinSpec {
    pub n_bins: usize,
    pub h_min: f64,
    pub h_max: f64,
}

impl Default for HeightBinSpec {
    fn default() -> Self {
        Self { n_bins: 16, h_min: -0.5, h_max: 6.0 }
    }
}

impl HeightBinSpec {
    pub fn new(n_bins: usize, h_min: f64, h_max: f64) -> Result<Self> {
        let s = Self { n_bins, h_min, h_max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 || !(self.h_min < self.h_max) || !self.h_min.is_finite() || !self.h_max.is_finite() {
            return Err(TensorError::Contract(format!(
                "height bins need n_bins ≥ 2 and h_min < h_max, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.h_max - self.h_min) / self.n_bins as f64
    }

    pub fn bin_center(&self, i: usize) -> Result<f64> {
        if i >= self.n_bins {
            return Err(TensorError::Contract(format!("bin index {i} out of range for {} bins", self.n_bins)));
        }
        Ok(self.h_min + (i as f64 + 0.5) * self.width())
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins).map(|i| self.h_min + (i as f64 + 0.5) * self.width()).collect()
    }

    /// Bin containing `h`, clamped to the first/last bin.
    pub fn bin_of(&self, h: f64) -> usize {
        let i = ((h - self.h_min) / self.width()).floor();
        (i.max(0.0) as usize).min(self.n_bins - 1)
    }
}

/// Per-pixel height-bin logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeightPrediction {
    pub logits: FeatureMap,
    pub spec: HeightBinSpec,
}

impl HeightPrediction {
    /// Softmax over the bin axis.
    pub fn probabilities(&self, tape: &mut Tape) -> Result<Var> {
        tape.softmax(self.logits.var, 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmscConfig {
    pub n_heads: usize,
    pub n_levels: usize,
    pub n_points: usize,
    pub d_model: usize,
}

impl Default for DmscConfig {
    fn default() -> Self {
        Self { n_heads: 4, n_levels: 2, n_points: 4, d_model: 32 }
    }
}

impl DmscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 || self.n_levels == 0 || self.n_points == 0 {
            return Err(TensorError::Dimension(format!("invalid deformable attention config {self:?}")));
        }
        Ok(())
    }

    fn slots(&self) -> usize {
        self.n_heads * self.n_levels * self.n_points
    }
}

const BACKBONE_HIDDEN: usize = 16;
const CAMERA_HIDDEN: usize = 16;

pub fn init_backbone(store: &mut ParamStore, d_model: usize, seed: u64) {
    store.init_uniform("backbone.conv1.kernel", &[BACKBONE_HIDDEN, 3, 3, 3], he_bound(27), seed);
    store.init_const("backbone.conv1.bias", &[BACKBONE_HIDDEN], 0.0);
    store.init_uniform("backbone.conv2.kernel", &[d_model, BACKBONE_HIDDEN, 3, 3], he_bound(BACKBONE_HIDDEN * 9), seed);
    store.init_const("backbone.conv2.bias", &[d_model], 0.0);
}

pub fn init_height_net(store: &mut ParamStore, d_model: usize, spec: &HeightBinSpec, seed: u64) {
    store.init_uniform("height_net.conv1.kernel", &[d_model, d_model, 3, 3], he_bound(d_model * 9), seed);
    store.init_const("height_net.conv1.bias", &[d_model], 0.0);
    store.init_uniform("height_net.head.kernel", &[spec.n_bins, d_model, 1, 1], lecun_bound(d_model), seed);
    store.init_const("height_net.head.bias", &[spec.n_bins], 0.0);
}

/// The output layer starts at zero so modulation begins as the identity.
pub fn init_camera_mlp(store: &mut ParamStore, d_model: usize, seed: u64) {
    store.init_uniform("camera_mlp.fc1.weight", &[4, CAMERA_HIDDEN], he_bound(4), seed);
    store.init_const("camera_mlp.fc1.bias", &[CAMERA_HIDDEN], 0.0);
    store.init_const("camera_mlp.fc2.weight", &[CAMERA_HIDDEN, d_model], 0.0);
    store.init_const("camera_mlp.fc2.bias", &[d_model], 0.0);
}

/// Offset and attention weights and the output projection start at zero.
/// Offset biases spread each head's points along its own direction so the
/// points are not tied together from the first step.
pub fn init_dmsc(store: &mut ParamStore, cfg: &DmscConfig, n_bins: usize, seed: u64) {
    let d = cfg.d_model;
    store.init_uniform("dmsc.value_proj.kernel", &[d, n_bins, 1, 1], lecun_bound(n_bins), seed);
    store.init_const("dmsc.value_proj.bias", &[d], 0.0);
    store.init_const("dmsc.offsets.weight", &[d, cfg.slots() * 2], 0.0);
    let mut bias = vec![0.0; cfg.slots() * 2];
    for h in 0..cfg.n_heads {
        let angle = std::f64::consts::TAU * h as f64 / cfg.n_heads as f64;
        for l in 0..cfg.n_levels {
            for p in 0..cfg.n_points {
                let s = (h * cfg.n_levels + l) * cfg.n_points + p;
                let r = 0.02 * (p + 1) as f64;
                bias[2 * s] = r * angle.cos();
                bias[2 * s + 1] = r * angle.sin();
            }
        }
    }
    store.insert("dmsc.offsets.bias", Tensor::new(vec![cfg.slots() * 2], bias).expect("bias length"));
    store.init_const("dmsc.attn.weight", &[d, cfg.slots()], 0.0);
    store.init_const("dmsc.attn.bias", &[cfg.slots()], 0.0);
    store.init_const("dmsc.out_proj.weight", &[d, d], 0.0);
    store.init_const("dmsc.out_proj.bias", &[d], 0.0);
}

/// Two stride-2 3×3 conv stages with ReLU: output stride 4.
pub fn backbone_forward(tape: &mut Tape, image: Var, params: &BoundParams) -> Result<FeatureMap> {
    match *tape.shape(image) {
        [3, h, w] if h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0 => {}
        ref s => {
            return Err(TensorError::Dimension(format!(
                "backbone input must be 3×H×W with H, W divisible by 4, got {s:?}"
            )))
        }
    }
    let x = conv(tape, params, "backbone.conv1", image, 2, 1)?;
    let x = tape.relu(x)?;
    let x = conv(tape, params, "backbone.conv2", x, 2, 1)?;
    let x = tape.relu(x)?;
    FeatureMap::from_var(tape, x, 4)
}

/// 3×3 conv + ReLU body, then a 1×1 head to per-pixel bin logits.
pub fn height_net_forward(
    tape: &mut Tape,
    f: &FeatureMap,
    spec: &HeightBinSpec,
    params: &BoundParams,
) -> Result<HeightPrediction> {
    let x = conv(tape, params, "height_net.conv1", f.var, 1, 1)?;
    let x = tape.relu(x)?;
    let logits = conv(tape, params, "height_net.head", x, 1, 0)?;
    if tape.shape(logits)[0] != spec.n_bins {
        return Err(TensorError::Dimension(format!(
            "height head emits {} bins but the spec has {}",
            tape.shape(logits)[0],
            spec.n_bins
        )));
    }
    Ok(HeightPrediction { logits: FeatureMap::from_var(tape, logits, f.stride)?, spec: *spec })
}

/// Intrinsics normalized by the image size, the input of the camera MLP.
pub fn camera_code(k: &CameraIntrinsics, image_w: usize, image_h: usize) -> [f64; 4] {
    let (w, h) = (image_w as f64, image_h as f64);
    [k.fx / w, k.fy / h, k.cx / w, k.cy / h]
}

/// Per-channel scale `2·sigmoid(MLP(camera_code))` applied to every pixel.
pub fn camera_modulation(
    tape: &mut Tape,
    f: &FeatureMap,
    code: [f64; 4],
    params: &BoundParams,
) -> Result<FeatureMap> {
    let x = tape.constant(Tensor::new(vec![1, 4], code.to_vec())?);
    let h = linear(tape, params, "camera_mlp.fc1", x)?;
    let h = tape.relu(h)?;
    let s = linear(tape, params, "camera_mlp.fc2", h)?;
    let s = tape.sigmoid(s)?;
    let s = tape.scale(s, 2.0)?;
    let s = tape.reshape(s, &[f.channels])?;
    let y = tape.channel_scale(f.var, s)?;
    Ok(FeatureMap { var: y, ..*f })
}

/// Level 0 projects the height logits to `d_model` channels with a 1×1 conv;
/// each further level halves the previous one by 2×2 average pooling.
pub fn build_value_pyramid(
    tape: &mut Tape,
    h: &HeightPrediction,
    n_levels: usize,
    params: &BoundParams,
) -> Result<Vec<FeatureMap>> {
    if n_levels == 0 {
        return Err(TensorError::Dimension("value pyramid needs at least one level".into()));
    }
    let div = 1usize << (n_levels - 1);
    let lg = &h.logits;
    if lg.height % div != 0 || lg.width % div != 0 {
        return Err(TensorError::Dimension(format!(
            "{}×{} height map cannot be halved {} times",
            lg.height,
            lg.width,
            n_levels - 1
        )));
    }
    let base = conv(tape, params, "dmsc.value_proj", lg.var, 1, 0)?;
    let mut levels = vec![FeatureMap::from_var(tape, base, lg.stride)?];
    for _ in 1..n_levels {
        let prev = levels.last().expect("non-empty");
        let v = tape.avg_pool2(prev.var)?;
        levels.push(FeatureMap::from_var(tape, v, prev.stride * 2)?);
    }
    Ok(levels)
}

/// Normalized reference point of every pixel of an `h×w` map, row-major.
pub fn reference_points(h: usize, w: usize) -> Vec<(f64, f64)> {
    (0..h * w).map(|q| (((q % w) as f64 + 0.5) / w as f64, ((q / w) as f64 + 0.5) / h as f64)).collect()
}

/// Attention weights per query: softmax over each head's `levels·points` slots.
/// Returns a `Q×(heads·levels·points)` tensor.
pub fn dmsc_attention_weights(tape: &mut Tape, query: Var, cfg: &DmscConfig, params: &BoundParams) -> Result<Var> {
    let q = tape.shape(query)[0];
    let logits = linear(tape, params, "dmsc.attn", query)?;
    let grouped = tape.reshape(logits, &[q * cfg.n_heads, cfg.n_levels * cfg.n_points])?;
    let w = tape.softmax(grouped, 1)?;
    tape.reshape(w, &[q, cfg.slots()])
}

/// `F_fused = F_context + out_proj(deformable gather over the height pyramid)`.
pub fn dmsc_forward(
    tape: &mut Tape,
    context: &FeatureMap,
    h: &HeightPrediction,
    cfg: &DmscConfig,
    params: &BoundParams,
) -> Result<FeatureMap> {
    cfg.validate()?;
    if context.channels != cfg.d_model {
        return Err(TensorError::Dimension(format!(
            "context has {} channels but d_model is {}",
            context.channels, cfg.d_model
        )));
    }
    if (h.logits.height, h.logits.width) != (context.height, context.width) {
        return Err(TensorError::Dimension(format!(
            "height map {}×{} does not align with context {}×{}",
            h.logits.height, h.logits.width, context.height, context.width
        )));
    }
    let (hf, wf, d) = (context.height, context.width, cfg.d_model);
    let pyramid = build_value_pyramid(tape, h, cfg.n_levels, params)?;
    let flat = tape.reshape(context.var, &[d, hf * wf])?;
    let query = tape.transpose(flat)?;
    let offsets = linear(tape, params, "dmsc.offsets", query)?;
    let weights = dmsc_attention_weights(tape, query, cfg, params)?;
    let values: Vec<Var> = pyramid.iter().map(|l| l.var).collect();
    let refs = reference_points(hf, wf);
    let gathered = tape.ms_deform_attn(&values, offsets, weights, &refs, cfg.n_heads, cfg.n_points)?;
    let out = linear(tape, params, "dmsc.out_proj", gathered)?;
    let out = tape.transpose(out)?;
    let out = tape.reshape(out, &[d, hf, wf])?;
    let fused = tape.add(context.var, out)?;
    Ok(FeatureMap { var: fused, ..*context })
}
