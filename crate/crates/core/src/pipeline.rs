//! The end-to-end frontalization pipeline: pose estimation from landmarks,
//! landmark frontalization, deformable model fitting, dense depth
//! rasterization, and pixel warping.

use alloc::vec::Vec;


use crate::align::{align, AlignConfig, AlignResult};
use crate::error::{Error, Result};
use crate::fit::{fit, FitConfig, FitResult};
use crate::geometry::{apply_transform, inverse_pose, PointSet3, SimilarityTransform};
use crate::image::{DepthMap, Image};
use crate::raster::{rasterize_depth, GridSpec};
use crate::shape::{reconstruct, ShapeModel};
use crate::warp::{soft_symmetry_fill, warp, Sampling};

/// Applies the pose to the input landmarks (`y_j = rho R x_j + t`).
pub fn frontalize_landmarks(x: &PointSet3, pose: &SimilarityTransform) -> PointSet3 {
    apply_transform(pose, x)
}

/// Frontal-canvas margin as a fraction of the mean shape's larger extent.
const CANVAS_MARGIN_FRAC: f64 = 0.15;

/// The canonical frontal canvas of a model: the axis-aligned bounding box of
/// the mean shape's image-plane projection, padded on every side. One canvas
/// unit is one output pixel. Renders of ground truth and pipeline output
/// share this frame, so they are directly comparable.
pub fn canvas_for_model(model: &ShapeModel) -> GridSpec {
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for v in model.mean().vertices() {
        min_x = min_x.min(v.x);
        max_x = max_x.max(v.x);
        min_y = min_y.min(v.y);
        max_y = max_y.max(v.y);
    }
    let margin = libm::ceil(CANVAS_MARGIN_FRAC * (max_x - min_x).max(max_y - min_y)) + 2.0;
    let origin = [libm::floor(min_x - margin), libm::floor(min_y - margin)];
    let width = (libm::ceil(max_x + margin) - origin[0]) as u32 + 1;
    let height = (libm::ceil(max_y + margin) - origin[1]) as u32 + 1;
    GridSpec { origin, width, height }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub align: AlignConfig,
    /// Ellipsoid penalty weight for the model fit.
    pub eta: f64,
    pub sampling: Sampling,
    /// Mirror-fill occluded pixels across the face midline after warping.
    pub soft_symmetry: bool,
    /// Output resolution multiplier over the canonical canvas (1 = one pixel
    /// per canvas unit).
    pub supersample: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            align: AlignConfig::default(),
            eta: 1.0,
            sampling: Sampling::Nearest,
            soft_symmetry: false,
            supersample: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub frontal: Image,
    /// Frontalization pose: maps input-image coordinates onto the frontal
    /// canvas frame; its inverse drives the pixel warp.
    pub pose: SimilarityTransform,
    /// Head pose relative to the face's own fitted shape: the frontalization
    /// pose composed with the inverse of the fit's residual transform. Yaw
    /// reporting reads this one, since it is unbiased by the deformation
    /// between the subject and the mean shape.
    pub head_pose: SimilarityTransform,
    pub align: AlignResult,
    pub fit: FitResult,
    pub depth: DepthMap,
}

/// Runs the full frontalization pipeline.
///
/// 1. Estimates the pose by robustly aligning the input landmarks with the
///    model's mean landmarks.
/// 2. Frontalizes the landmarks with the pose.
/// 3. Fits the deformable model to the frontalized landmarks.
/// 4. Maps all model vertices to the frontal frame and rasterizes the dense
///    depth map over the canonical canvas.
/// 5. Warps input pixels through the inverse pose onto the frontal grid.
pub fn run_pipeline(
    input: &Image,
    landmarks: &PointSet3,
    model: &ShapeModel,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    let j = model.landmark_indices().len();
    if landmarks.len() != j {
        return Err(Error::LengthMismatch { expected: j, got: landmarks.len() });
    }
    if cfg.supersample == 0 {
        return Err(Error::InvalidParameter("supersample must be at least 1"));
    }

    let z = PointSet3::new(model.landmark_means())?;
    let align_res = align(landmarks, &z, &cfg.align)?;
    let pose = align_res.transform.clone();

    let y = frontalize_landmarks(landmarks, &pose);
    let fit_cfg = FitConfig { eta: cfg.eta, align: cfg.align.clone() };
    let fit_res = fit(&y, model, &fit_cfg)?;

    // Frontalized dense vertex set.
    let shape = reconstruct(model, &fit_res.embedding)?;
    let frontal_verts = PointSet3::new(
        shape.vertices().map(|v| fit_res.transform.apply_point(&v)).collect::<Vec<_>>(),
    )?;

    let ss = cfg.supersample as f64;
    let base = canvas_for_model(model);
    let grid = GridSpec {
        origin: [base.origin[0] * ss, base.origin[1] * ss],
        width: base.width * cfg.supersample,
        height: base.height * cfg.supersample,
    };
    let scaled_verts = if cfg.supersample == 1 {
        frontal_verts
    } else {
        PointSet3::new(frontal_verts.iter().map(|p| p * ss).collect())?
    };
    let depth = rasterize_depth(&scaled_verts, model.triangles(), &grid)?;

    // Inverse pose, composed with the canvas-unit scaling when supersampled.
    let t_inv = inverse_pose(&pose);
    let warp_t = if cfg.supersample == 1 {
        t_inv
    } else {
        SimilarityTransform::new(t_inv.scale() / ss, t_inv.quaternion(), t_inv.translation())?
    };
    let mut frontal = warp(input, &depth, &warp_t, cfg.sampling);

    if cfg.soft_symmetry {
        // Face midline: the mean shape's centroid column in canvas pixels.
        let centroid_x = {
            let mut acc = 0.0;
            for v in model.mean().vertices() {
                acc += v.x;
            }
            acc / model.num_vertices() as f64
        };
        let axis = (centroid_x - base.origin[0]) * ss;
        frontal = soft_symmetry_fill(&frontal, axis);
    }

    let head_pose = fit_res.transform.inverse().compose(&pose);
    Ok(PipelineResult { frontal, pose, head_pose, align: align_res, fit: fit_res, depth })
}
