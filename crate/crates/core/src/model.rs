//! The full detector: image → height-aware features → frustum lift → BEV
//! pooling → former → detection head.

use serde::{Deserialize, Serialize};

use crate::bev::{init_vpf, voxel_pool, vpf_forward, BevFeatureMap, BevGridSpec, VpfConfig};
use crate::frustum::{build_point_cloud, frustum_to_ego, outer_product_lift, FrustumGrid};
use crate::geometry::{GeometryError, VirtualCameraFrame};
use crate::head::{detection_loss, head_forward, init_head, HeadOutput, Targets};
use crate::height::{
    backbone_forward, camera_code, camera_modulation, dmsc_forward, height_net_forward, init_backbone,
    init_camera_mlp, init_dmsc, init_height_net, DmscConfig, FeatureMap, HeightBinSpec, HeightPrediction,
};
use crate::boxes::ObjectClass;
use crate::ppm::RgbImage;
use crate::tensor::{BoundParams, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Backbone output stride.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub d_model: usize,
    pub bins: HeightBinSpec,
    pub dmsc: DmscConfig,
    pub use_dmsc: bool,
    pub bev: BevGridSpec,
    pub vpf: VpfConfig,
    pub use_vpf: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 96,
            d_model: 32,
            bins: HeightBinSpec::default(),
            dmsc: DmscConfig::default(),
            use_dmsc: true,
            bev: BevGridSpec::default(),
            vpf: VpfConfig::default(),
            use_vpf: true,
        }
    }
}

impl ModelConfig {
    pub fn n_classes(&self) -> usize {
        ObjectClass::ALL.len()
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        (self.image_height / FEATURE_STRIDE, self.image_width / FEATURE_STRIDE)
    }

    pub fn validate(&self) -> Result<()> {
        let contract = |m: String| Err(TensorError::Contract(m));
        if self.image_height % FEATURE_STRIDE != 0 || self.image_width % FEATURE_STRIDE != 0 || self.image_height == 0 {
            return contract(format!("image {}×{} must be a positive multiple of 4", self.image_height, self.image_width));
        }
        self.bins.validate()?;
        self.bev.validate()?;
        if self.dmsc.d_model != self.d_model || self.bev.channels != self.d_model {
            return contract(format!(
                "d_model {} must equal dmsc.d_model {} and bev.channels {}",
                self.d_model, self.dmsc.d_model, self.bev.channels
            ));
        }
        if self.use_dmsc {
            self.dmsc.validate()?;
            let div = 1 << (self.dmsc.n_levels - 1);
            let (hf, wf) = self.feature_dims();
            if hf % div != 0 || wf % div != 0 {
                return contract(format!("{hf}×{wf} feature map cannot hold {} pyramid levels", self.dmsc.n_levels));
            }
        }
        if self.use_vpf {
            let ps = self.vpf.patch_size;
            if ps == 0 || self.bev.cells_x() % ps != 0 || self.bev.cells_y() % ps != 0 {
                return contract(format!("BEV grid is not divisible into {ps}-cell patches"));
            }
            if self.vpf.n_heads == 0 || self.vpf.patch_dim(self.d_model) % self.vpf.n_heads != 0 || self.vpf.depth == 0 {
                return contract(format!("invalid former config {:?}", self.vpf));
            }
        }
        Ok(())
    }
}

/// Per-image inputs that do not depend on the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `3×H×W`, scaled to `[-1, 1]`.
    pub image: Tensor,
    pub camera_code: [f64; 4],
    pub grid: FrustumGrid,
}

#[derive(Debug, thiserror::Error)]
pub enum InputError {
    #[error("image is {got_w}×{got_h}, the model expects {want_w}×{want_h}")]
    ImageSize { got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Channel-major float image in `[-1, 1]`.
pub fn image_tensor(img: &RgbImage) -> Tensor {
    let plane = img.width * img.height;
    Tensor::from_fn(&[3, img.height, img.width], |i| {
        let (c, p) = (i / plane, i % plane);
        img.data[p * 3 + c] as f64 / 127.5 - 1.0
    })
}

/// Intermediate maps of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub context: FeatureMap,
    pub height_logits: Var,
    pub fused: FeatureMap,
    pub pooled: BevFeatureMap,
    pub bev: BevFeatureMap,
    pub head: HeadOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

#[derive(Serialize)]
struct ModelFileRef<'a> {
    config: &'a ModelConfig,
}

#[derive(Deserialize)]
struct ModelFile {
    config: ModelConfig,
    params: serde_json::Value,
}

impl Model {
    /// Fresh parameters; blocks that are switched off get none.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let d = config.d_model;
        init_backbone(&mut p, d, seed);
        init_camera_mlp(&mut p, d, seed);
        init_height_net(&mut p, d, &config.bins, seed);
        if config.use_dmsc {
            init_dmsc(&mut p, &config.dmsc, config.bins.n_bins, seed);
        }
        if config.use_vpf {
            init_vpf(&mut p, &config.vpf, &config.bev, seed);
        }
        init_head(&mut p, d, config.n_classes(), seed);
        Ok(Self { config, params: p })
    }

    /// `{"config": …, "params": …}` with parameters in name order.
    pub fn to_json(&self) -> String {
        let cfg = serde_json::to_string(&ModelFileRef { config: &self.config }).expect("config serializes");
        format!("{},\"params\":{}}}", &cfg[..cfg.len() - 1], self.params.to_json())
    }

    /// Parameter names and shapes must match the stored configuration.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| TensorError::Param(format!("invalid model file: {e}")))?;
        let mut model = Model::new(file.config, 0)?;
        model.params.load_json(&file.params.to_string())?;
        Ok(model)
    }

    pub fn prepare(&self, img: &RgbImage, frame: &VirtualCameraFrame) -> std::result::Result<ModelInput, InputError> {
        let c = &self.config;
        if img.width != c.image_width || img.height != c.image_height {
            return Err(InputError::ImageSize {
                got_w: img.width,
                got_h: img.height,
                want_w: c.image_width,
                want_h: c.image_height,
            });
        }
        let grid = frustum_to_ego(&c.bins, frame, FEATURE_STRIDE, c.feature_dims())?;
        Ok(ModelInput {
            image: image_tensor(img),
            camera_code: camera_code(&frame.intrinsics, img.width, img.height),
            grid,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, input: &ModelInput) -> Result<ForwardOutput> {
        let c = &self.config;
        let image = tape.constant(input.image.clone());
        let f = backbone_forward(tape, image, p)?;
        let context = camera_modulation(tape, &f, input.camera_code, p)?;
        let h = height_net_forward(tape, &context, &c.bins, p)?;
        let fused = if c.use_dmsc { dmsc_forward(tape, &context, &h, &c.dmsc, p)? } else { context };
        let lifted = outer_product_lift(tape, &fused, &h)?;
        let cloud = build_point_cloud(tape, lifted, &input.grid)?;
        let pooled = voxel_pool(tape, &cloud, &c.bev)?;
        let bev = if c.use_vpf { vpf_forward(tape, &pooled, &c.vpf, p)? } else { pooled };
        let head = head_forward(tape, &bev, p)?;
        Ok(ForwardOutput { context, height_logits: h.logits.var, fused, pooled, bev, head })
    }

    /// Detection loss, plus `height_weight` times the bin cross-entropy
    /// against `height_bins` (one label per feature pixel) when given.
    pub fn loss(
        &self,
        tape: &mut Tape,
        out: &ForwardOutput,
        targets: &Targets,
        height_bins: Option<&[usize]>,
        height_weight: f64,
    ) -> Result<Var> {
        let det = detection_loss(tape, &out.head, targets)?;
        match height_bins {
            Some(labels) if height_weight > 0.0 => {
                let n = self.config.bins.n_bins;
                let logits = tape.reshape(out.height_logits, &[n, labels.len()])?;
                let ce = tape.softmax_cross_entropy(logits, labels)?;
                let ce = tape.scale(ce, height_weight)?;
                tape.add(det, ce)
            }
            _ => Ok(det),
        }
    }

    /// The height prediction of a finished forward pass.
    pub fn height_prediction(&self, tape: &Tape, out: &ForwardOutput) -> Result<HeightPrediction> {
        Ok(HeightPrediction { logits: FeatureMap::from_var(tape, out.height_logits, FEATURE_STRIDE)?, spec: self.config.bins })
    }
}
