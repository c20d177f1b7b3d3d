//! Lifting image features into an ego-frame feature point cloud.
//!
//! Every feature pixel is paired with every height bin: the lifted feature
//! is the pixel's fused feature weighted by the bin probability, placed where
//! the pixel's viewing ray crosses the plane at the bin's height.

use crate::geometry::{lift_pixel, GeometryError, PixelHeightSample, Point3, VirtualCameraFrame};
use crate::height::{FeatureMap, HeightBinSpec, HeightPrediction};
use crate::tensor::{Result, Tape, TensorError, Var};

/// `(H·W·B)×C` lifted features, row `(i·W + j)·B + b`.
pub fn outer_product_lift(tape: &mut Tape, fused: &FeatureMap, h: &HeightPrediction) -> Result<Var> {
    let probs = h.probabilities(tape)?;
    tape.outer_lift(fused.var, probs)
}

/// Ego position of every (pixel, bin) sample of an `Hf×Wf` feature grid,
/// in the same row order as [`outer_product_lift`].
#[derive(Clone, Debug, PartialEq)]
pub struct FrustumGrid {
    pub height: usize,
    pub width: usize,
    pub n_bins: usize,
    pub xyz: Vec<Point3>,
    pub valid: Vec<bool>,
}

impl FrustumGrid {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Image-pixel location of the center of feature cell `(i, j)`.
pub fn feature_pixel_center(i: usize, j: usize, stride: usize) -> (f64, f64) {
    ((j as f64 + 0.5) * stride as f64, (i as f64 + 0.5) * stride as f64)
}

/// Samples whose ray never reaches the bin plane (at or above the horizon,
/// or a bin at or above the camera) are masked rather than reported.
pub fn frustum_to_ego(
    spec: &HeightBinSpec,
    frame: &VirtualCameraFrame,
    stride: usize,
    dims: (usize, usize),
) -> std::result::Result<FrustumGrid, GeometryError> {
    let (hf, wf) = dims;
    let centers = spec.centers();
    let n = hf * wf * centers.len();
    let mut xyz = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for i in 0..hf {
        for j in 0..wf {
            let (u, v) = feature_pixel_center(i, j, stride);
            for &h in &centers {
                match lift_pixel(&PixelHeightSample::new(u, v, h), frame) {
                    Ok(p) => {
                        xyz.push(p);
                        valid.push(true);
                    }
                    Err(GeometryError::Horizon { .. } | GeometryError::HeightExceedsCamera { .. }) => {
                        xyz.push(Point3::zeros());
                        valid.push(false);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    if !valid.iter().any(|&v| v) {
        return Err(GeometryError::DegenerateCamera);
    }
    Ok(FrustumGrid { height: hf, width: wf, n_bins: centers.len(), xyz, valid })
}

/// Valid lifted features and their ego positions.
#[derive(Clone, Debug)]
pub struct FeaturePointCloud {
    pub xyz: Vec<Point3>,
    /// `N×C`, one row per entry of `xyz`.
    pub features: Var,
    pub channels: usize,
}

impl FeaturePointCloud {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }
}

/// Keeps the valid rows of `lifted` in their original (pixel, bin) order.
pub fn build_point_cloud(tape: &mut Tape, lifted: Var, grid: &FrustumGrid) -> Result<FeaturePointCloud> {
    let [rows, c] = match *tape.shape(lifted) {
        [r, c] => [r, c],
        ref s => return Err(TensorError::Dimension(format!("lifted features must be N×C, got {s:?}"))),
    };
    if rows != grid.len() {
        return Err(TensorError::Dimension(format!(
            "{rows} lifted rows for a frustum of {} samples",
            grid.len()
        )));
    }
    let keep: Vec<usize> = (0..rows).filter(|&r| grid.valid[r]).collect();
    let idx: Vec<usize> = keep.iter().flat_map(|&r| r * c..(r + 1) * c).collect();
    let features = tape.gather(lifted, idx, &[keep.len(), c])?;
    Ok(FeaturePointCloud { xyz: keep.iter().map(|&r| grid.xyz[r]).collect(), features, channels: c })
}
