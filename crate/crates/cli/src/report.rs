//! JSON records written by the CLI and numeric formatting helpers.

use frontal_core::align::AlignResult;
use frontal_core::fit::FitResult;
use frontal_core::geometry::{yaw_degrees, SimilarityTransform};
use serde::{Deserialize, Serialize};

/// Formats a number with 6 significant digits for console output.
pub fn sig6(v: f64) -> String {
    format!("{v:.5e}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuaternionJson {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformJson {
    pub scale: f64,
    pub quaternion: QuaternionJson,
    pub translation: [f64; 3],
}

impl TransformJson {
    pub fn from_transform(t: &SimilarityTransform) -> Self {
        let q = t.quaternion();
        Self {
            scale: t.scale(),
            quaternion: QuaternionJson { w: q[0], x: q[1], y: q[2], z: q[3] },
            translation: [t.translation().x, t.translation().y, t.translation().z],
        }
    }
}

/// Written by `align --out`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignJson {
    pub transform: TransformJson,
    pub mu: f64,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
}

impl AlignJson {
    pub fn from_result(res: &AlignResult) -> Self {
        Self {
            transform: TransformJson::from_transform(&res.transform),
            mu: res.student.mu,
            iterations: res.iterations,
            converged: res.converged,
            objective_trace: res.q_trace.clone(),
        }
    }
}

/// Written by `fit --out`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitJson {
    pub transform: TransformJson,
    pub embedding: Vec<f64>,
    /// `s^T Lambda^{-1} s`; values above 1 leave the confidence ellipsoid.
    pub ellipsoid: f64,
    pub mu: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FitJson {
    pub fn from_result(res: &FitResult) -> Self {
        Self {
            transform: TransformJson::from_transform(&res.transform),
            embedding: res.embedding.s.clone(),
            ellipsoid: res.ellipsoid,
            mu: res.student.mu,
            iterations: res.iterations,
            converged: res.converged,
        }
    }
}

/// Pose sidecar written by `frontalize`. The frontalization transform maps
/// input pixels onto the frontal canvas; the head pose is relative to the
/// subject's own fitted shape and is the one yaw is read from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseJson {
    pub transform: TransformJson,
    pub head_pose: TransformJson,
    pub yaw_deg: f64,
    pub align_iterations: usize,
    pub fit_iterations: usize,
}

impl PoseJson {
    pub fn new(
        pose: &SimilarityTransform,
        head_pose: &SimilarityTransform,
        align_iters: usize,
        fit_iters: usize,
    ) -> Self {
        Self {
            transform: TransformJson::from_transform(pose),
            head_pose: TransformJson::from_transform(head_pose),
            yaw_deg: yaw_degrees(head_pose),
            align_iterations: align_iters,
            fit_iterations: fit_iters,
        }
    }
}

/// Ground-truth record written by `synth` alongside the scene files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneJson {
    pub seed: u64,
    pub yaw_deg: f64,
    pub noise_sigma: f64,
    pub outlier_frac: f64,
    pub pose: TransformJson,
    pub embedding: Vec<f64>,
    pub outlier_indices: Vec<usize>,
    pub n_vertices: usize,
    pub k_modes: usize,
    pub canvas_origin: [f64; 2],
    pub canvas_size: [u32; 2],
}
