//! Robust EM fitting of a deformable shape model to a 3D landmark set:
//! simultaneous similarity transform, shape embedding, and Student-t noise
//! parameters.
//!
//! The residual at landmark `j` is
//! `r_j = y_j - (sigma Q (vbar_j + W_j s) + d)`, and the objective adds the
//! ellipsoid penalty `(eta / 2) s^T Lambda^{-1} s` to the weighted
//! Mahalanobis sum, keeping the embedding statistically plausible.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, Vector3};

use crate::align::{
    e_step, parameter_delta, rotation_step, update_mu, AlignConfig, StudentState,
    COV_ABS_FLOOR_REL, EXACT_FIT_REL_MSE,
};
use crate::error::{Error, Result};
use crate::geometry::{horn_align, weighted_centroid, Covariance3, PointSet3, SimilarityTransform};
use crate::shape::{ellipsoid_check, Embedding, ShapeModel};

/// Settings for [`fit`]: the ellipsoid penalty weight plus the alignment
/// solver settings.
#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Regularizer weight on `s^T Lambda^{-1} s`; 0 disables the penalty.
    pub eta: f64,
    pub align: AlignConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { eta: 1.0, align: AlignConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub transform: SimilarityTransform,
    pub embedding: Embedding,
    pub student: StudentState,
    pub iterations: usize,
    /// Regularized objective after each full M-step; non-increasing.
    pub q_trace: Vec<f64>,
    pub converged: bool,
    /// Value of `s^T Lambda^{-1} s` for the fitted embedding; greater than 1
    /// means the shape left the high-confidence ellipsoid.
    pub ellipsoid: f64,
}

/// The regularized objective: the weighted Mahalanobis sum over landmark
/// residuals, plus `J log |Sigma|`, all halved, plus
/// `(eta / 2) s^T Lambda^{-1} s`.
pub fn q_objective_reg(
    y: &PointSet3,
    model: &ShapeModel,
    transform: &SimilarityTransform,
    emb: &Embedding,
    state: &StudentState,
    eta: f64,
) -> Result<f64> {
    let j = model.landmark_indices().len();
    if y.len() != j {
        return Err(Error::LengthMismatch { expected: j, got: y.len() });
    }
    if state.wbar.len() != j {
        return Err(Error::LengthMismatch { expected: j, got: state.wbar.len() });
    }
    let inv = state.sigma.inverse()?;
    let log_det = state.sigma.log_det()?;
    let s = DVector::from_column_slice(&emb.s);
    let mut q = 0.0;
    for (jdx, (&vid, &w)) in model.landmark_indices().iter().zip(state.wbar.iter()).enumerate() {
        let vhat = model.mean_vertex(vid as usize) + model.mode_block(vid as usize) * &s;
        let e = y[jdx] - transform.apply_point(&vhat);
        q += w * (e.transpose() * inv * e)[(0, 0)];
    }
    Ok(0.5 * (q + j as f64 * log_det) + 0.5 * eta * ellipsoid_check(model, emb)?)
}

/// Closed-form embedding update: solves
/// `(sum_j wbar_j A_j^T Sigma^{-1} A_j + eta Lambda^{-1}) s =
///   sum_j wbar_j A_j^T Sigma^{-1} b_j`
/// with `A_j = sigma Q W_j` and `b_j = y_j - sigma Q vbar_j - d`.
pub fn update_embedding(
    y: &PointSet3,
    model: &ShapeModel,
    transform: &SimilarityTransform,
    wbar: &[f64],
    sigma: &Covariance3,
    eta: f64,
) -> Result<Embedding> {
    let j = model.landmark_indices().len();
    if y.len() != j || wbar.len() != j {
        return Err(Error::LengthMismatch { expected: j, got: y.len().min(wbar.len()) });
    }
    if eta < 0.0 {
        return Err(Error::InvalidParameter("eta must be nonnegative"));
    }
    let k = model.num_modes();
    let sigma_inv = sigma.inverse()?;
    let rot = transform.rotation_matrix();
    let scale = transform.scale();

    let mut lhs = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for (jdx, &vid) in model.landmark_indices().iter().enumerate() {
        let a: Matrix3xX<f64> = scale * (rot * model.mode_block(vid as usize));
        let b: Vector3<f64> = y[jdx]
            - scale * (rot * model.mean_vertex(vid as usize))
            - transform.translation();
        let sa = sigma_inv * &a;
        lhs += wbar[jdx] * a.transpose() * &sa;
        rhs += wbar[jdx] * sa.transpose() * b;
    }
    for (kk, &l) in model.eigenvalues().iter().enumerate() {
        lhs[(kk, kk)] += eta / l;
    }
    match nalgebra::linalg::Cholesky::new(lhs) {
        Some(ch) => Ok(Embedding { s: ch.solve(&rhs).iter().copied().collect() }),
        None => Err(Error::SingularEmbeddingSystem),
    }
}

/// Robust EM fit of the deformable model to landmarks `y` (ordered like the
/// model's landmark indices).
///
/// Starts from a zero embedding and the closed-form alignment of the mean
/// landmarks, then iterates E-step, recentering, scale, rotation,
/// covariance, embedding, and `mu` updates; the translation is finalized
/// from the last weighted centroids.
pub fn fit(y: &PointSet3, model: &ShapeModel, cfg: &FitConfig) -> Result<FitResult> {
    let j = model.landmark_indices().len();
    if y.len() != j {
        return Err(Error::LengthMismatch { expected: j, got: y.len() });
    }
    if j < 4 {
        return Err(Error::DegenerateConfiguration);
    }
    if cfg.eta < 0.0 {
        return Err(Error::InvalidParameter("eta must be nonnegative"));
    }
    let acfg = &cfg.align;
    if !(acfg.eps > 0.0) || acfg.max_iter == 0 || !(acfg.mu_init > 0.0) {
        return Err(Error::InvalidParameter("eps, max_iter, mu_init must be positive"));
    }

    let cloud_sq = {
        let r = y.rms_radius();
        (r * r).max(f64::MIN_POSITIVE)
    };
    let abs_floor = COV_ABS_FLOOR_REL * cloud_sq;

    let k = model.num_modes();
    let mut emb = Embedding::zeros(k);
    let landmark_vertices = |s: &Embedding| -> PointSet3 {
        let sv = DVector::from_column_slice(&s.s);
        PointSet3::new(
            model
                .landmark_indices()
                .iter()
                .map(|&vid| {
                    model.mean_vertex(vid as usize) + model.mode_block(vid as usize) * &sv
                })
                .collect(),
        )
        .expect("model vertices are finite")
    };

    let mut vhat = landmark_vertices(&emb);
    let mut transform = horn_align(&vhat, y, None)?;
    let uniform = alloc::vec![1.0; j];
    let mut sigma = covariance_at(&vhat, y, &transform, &uniform);
    let mut mu = acfg.mu_init;

    let mut q_trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut a = mu + 1.5;
    let mut b = alloc::vec![1.0; j];
    let mut wbar = uniform;

    for it in 1..=acfg.max_iter {
        iterations = it;
        let sigma_reg = sigma.with_abs_floor(abs_floor);

        // E-step at the previous parameters.
        let residuals: Vec<Vector3<f64>> = vhat
            .iter()
            .zip(y.iter())
            .map(|(v, py)| py - transform.apply_point(v))
            .collect();
        let (a_new, b_new, wbar_new) = e_step(&residuals, &sigma_reg, mu)?;
        a = a_new;
        b = b_new;
        wbar = wbar_new;
        let wsum: f64 = wbar.iter().sum();

        // Recenter with the fresh weights; this fixes the translation used
        // by the scale, rotation, and embedding sub-steps.
        let yc = weighted_centroid(y.points(), &wbar, wsum);
        let vc = weighted_centroid(vhat.points(), &wbar, wsum);
        let yp: Vec<Vector3<f64>> = y.iter().map(|p| p - yc).collect();
        let vp: Vec<Vector3<f64>> = vhat.iter().map(|p| p - vc).collect();
        let sigma_inv = sigma_reg.inverse()?;

        // Scale step (previous rotation and covariance).
        let r_prev = transform.rotation_matrix();
        let mut num = 0.0;
        let mut den = 0.0;
        for ((vj, yj), &w) in vp.iter().zip(yp.iter()).zip(wbar.iter()) {
            num += w * (yj.transpose() * sigma_inv * yj)[(0, 0)];
            let rv = r_prev * vj;
            den += w * (rv.transpose() * sigma_inv * rv)[(0, 0)];
        }
        if !(num > 0.0 && den > 0.0) {
            return Err(Error::DegenerateConfiguration);
        }
        let scale_new = libm::sqrt(num / den);

        // Rotation step.
        let (q_new, _, _) = rotation_step(
            &vp,
            &yp,
            &wbar,
            &sigma_inv,
            scale_new,
            *transform.rotation(),
            acfg,
        );
        let r_new = q_new.to_rotation_matrix().into_inner();

        // Covariance from the refreshed rigid parameters (embedding still
        // at its previous value).
        let mut cov = Matrix3::zeros();
        for ((vj, yj), &w) in vp.iter().zip(yp.iter()).zip(wbar.iter()) {
            let e = yj - scale_new * (r_new * vj);
            cov += w * e * e.transpose();
        }
        cov /= j as f64;
        let sigma_new = Covariance3::from_matrix(&cov)?;
        let sigma_new_reg = sigma_new.with_abs_floor(abs_floor);

        // Embedding step with the freshest rigid parameters; the implied
        // translation comes from the current centroids.
        let d_current = yc - scale_new * (r_new * vc);
        let t_mid = SimilarityTransform::from_parts(scale_new, q_new, d_current);
        let emb_new = match update_embedding(y, model, &t_mid, &wbar, &sigma_new_reg, cfg.eta) {
            Ok(e) => e,
            Err(Error::SingularEmbeddingSystem) if cfg.eta == 0.0 => {
                return Err(Error::SingularEmbeddingSystem)
            }
            Err(e) => return Err(e),
        };

        let mu_new = update_mu(a, &b);

        // Re-attach the translation to the refreshed embedding's centroid.
        let vhat_new = landmark_vertices(&emb_new);
        let vc_new = weighted_centroid(vhat_new.points(), &wbar, wsum);
        let d_new = yc - scale_new * (r_new * vc_new);
        let t_new = SimilarityTransform::from_parts(scale_new, q_new, d_new);

        let state = StudentState {
            sigma: sigma_new_reg.clone(),
            mu: mu_new,
            a,
            b: b.clone(),
            wbar: wbar.clone(),
        };
        q_trace.push(q_objective_reg(y, model, &t_new, &emb_new, &state, cfg.eta)?);

        let delta_rigid =
            parameter_delta((&transform, &sigma, mu), (&t_new, &sigma_new, mu_new));
        let d_emb: f64 = {
            let num: f64 = emb
                .s
                .iter()
                .zip(emb_new.s.iter())
                .map(|(p, n)| (p - n) * (p - n))
                .sum::<f64>();
            let den: f64 = 1.0 + emb_new.s.iter().map(|v| v * v).sum::<f64>();
            libm::sqrt(num / den)
        };
        let delta = delta_rigid.max(d_emb);

        transform = t_new;
        sigma = sigma_new;
        mu = mu_new;
        emb = emb_new;
        vhat = vhat_new;

        let mse: f64 = vhat
            .iter()
            .zip(y.iter())
            .map(|(v, py)| (py - transform.apply_point(v)).norm_squared())
            .sum::<f64>()
            / j as f64;
        if mse <= EXACT_FIT_REL_MSE * cloud_sq || delta <= acfg.eps {
            converged = true;
            break;
        }
    }

    let ellipsoid = ellipsoid_check(model, &emb)?;
    Ok(FitResult {
        transform,
        embedding: emb,
        student: StudentState {
            sigma: sigma.with_abs_floor(abs_floor),
            mu,
            a,
            b,
            wbar,
        },
        iterations,
        q_trace,
        converged,
        ellipsoid,
    })
}

fn covariance_at(
    x: &PointSet3,
    z: &PointSet3,
    t: &SimilarityTransform,
    wbar: &[f64],
) -> Covariance3 {
    let wsum: f64 = wbar.iter().sum();
    let xc = weighted_centroid(x.points(), wbar, wsum);
    let zc = weighted_centroid(z.points(), wbar, wsum);
    let r = t.rotation_matrix();
    let mut cov = Matrix3::zeros();
    for ((px, pz), &w) in x.iter().zip(z.iter()).zip(wbar.iter()) {
        let e = (pz - zc) - t.scale() * (r * (px - xc));
        cov += w * e * e.transpose();
    }
    cov /= x.len() as f64;
    Covariance3::from_matrix(&cov).unwrap_or_else(|_| Covariance3::identity())
}
