//! Robust EM estimation of the similarity transform between two corresponding
//! 3D point sets.
//!
//! Residuals `e_j = z_j - (rho R x_j + t)` are modeled with a generalized
//! Student-t distribution: a Gaussian whose per-point precision `w_j` has a
//! gamma prior with shape `mu` (the second gamma parameter is fixed at 1).
//! The E-step computes posterior precision means `wbar_j` that down-weight
//! large residuals; the M-step re-estimates translation, scale, rotation,
//! covariance, and `mu` in closed form, except for the rotation, which is
//! found by damped Gauss-Newton over the unit quaternion.

use alloc::boxed::Box;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector4};

use crate::error::{Error, Result, SolverFailure};
use crate::geometry::{horn_align, weighted_centroid, Covariance3, PointSet3, SimilarityTransform};
use crate::special::{digamma, digamma_inverse};

/// Student-t noise-model state: covariance, gamma shape `mu`, and the
/// per-point posterior quantities of the last E-step. The gamma rate
/// parameter `nu` is fixed at [`StudentState::NU`].
#[derive(Debug, Clone)]
pub struct StudentState {
    pub sigma: Covariance3,
    pub mu: f64,
    /// Posterior gamma shape, `mu + 3/2`; shared by all points.
    pub a: f64,
    /// Posterior gamma rates, `1 + mahalanobis_sq(e_j) / 2`; each `>= 1`.
    pub b: Vec<f64>,
    /// Posterior precision means `a / b_j`.
    pub wbar: Vec<f64>,
}

impl StudentState {
    pub const NU: f64 = 1.0;
}

/// Convergence and initialization settings for [`align`].
#[derive(Debug, Clone)]
pub struct AlignConfig {
    /// Threshold on the per-iteration parameter change (see
    /// [`parameter_delta`] for the norm).
    pub eps: f64,
    pub max_iter: usize,
    /// Initial gamma shape; 1 gives the classic heavy-tailed t-distribution.
    pub mu_init: f64,
    /// Inner iteration cap for the rotation solver.
    pub rot_max_iter: usize,
    /// Gradient tolerance for the rotation solver, relative to the gradient
    /// magnitude at its starting iterate.
    pub rot_grad_tol: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_iter: 100,
            mu_init: 1.0,
            rot_max_iter: 50,
            rot_grad_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignResult {
    pub transform: SimilarityTransform,
    pub student: StudentState,
    pub iterations: usize,
    /// Objective value after each full M-step; non-increasing.
    pub q_trace: Vec<f64>,
    pub converged: bool,
}

/// E-step: posterior gamma parameters and precision means for the given
/// residuals. `a = mu + 3/2`, `b_j = 1 + ||e_j||^2_Sigma / 2`,
/// `wbar_j = a / b_j`.
pub fn e_step(
    residuals: &[Vector3<f64>],
    sigma: &Covariance3,
    mu: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter("mu must be positive"));
    }
    let inv = sigma.inverse()?;
    let a = mu + 1.5;
    let mut b = Vec::with_capacity(residuals.len());
    let mut wbar = Vec::with_capacity(residuals.len());
    for e in residuals {
        let m = (e.transpose() * inv * e)[(0, 0)];
        let bj = 1.0 + 0.5 * m;
        b.push(bj);
        wbar.push(a / bj);
    }
    Ok((a, b, wbar))
}

/// Expected complete-data objective
/// `Q = 1/2 sum_j (wbar_j ||z_j - rho R x_j - t||^2_Sigma + log |Sigma|)`.
pub fn q_objective(
    x: &PointSet3,
    z: &PointSet3,
    transform: &SimilarityTransform,
    state: &StudentState,
) -> Result<f64> {
    let j = x.len();
    if z.len() != j {
        return Err(Error::LengthMismatch { expected: j, got: z.len() });
    }
    if state.wbar.len() != j {
        return Err(Error::LengthMismatch { expected: j, got: state.wbar.len() });
    }
    let inv = state.sigma.inverse()?;
    let log_det = state.sigma.log_det()?;
    let mut q = 0.0;
    for ((px, pz), &w) in x.iter().zip(z.iter()).zip(state.wbar.iter()) {
        let e = pz - transform.apply_point(px);
        q += w * (e.transpose() * inv * e)[(0, 0)];
    }
    Ok(0.5 * (q + j as f64 * log_det))
}

/// Updates the gamma shape: `mu = psi^{-1}(psi(a) - mean(log b_j))`.
pub fn update_mu(a: f64, b: &[f64]) -> f64 {
    let mean_log: f64 = b.iter().map(|&v| libm::log(v)).sum::<f64>() / b.len() as f64;
    digamma_inverse(digamma(a) - mean_log)
}

/// One M-step of the rigid EM: weighted recentering, scale, rotation (warm
/// started from `prev`), covariance from the updated transform, and the
/// translation that re-attaches the weighted centroids. The scale and
/// rotation sub-steps evaluate Mahalanobis norms under `sigma` (the previous
/// iteration's covariance); the returned covariance is the refreshed one.
///
/// Errors with the best iterate if the rotation solver exhausts its
/// iteration budget before reaching a stationary point.
pub fn m_step_rigid(
    x: &PointSet3,
    z: &PointSet3,
    wbar: &[f64],
    sigma: &Covariance3,
    prev: &SimilarityTransform,
) -> Result<(SimilarityTransform, Covariance3)> {
    let (transform, cov, rot) = m_step_rigid_cfg(x, z, wbar, sigma, prev, &AlignConfig::default())?;
    if !rot.converged {
        return Err(Error::SolverFailure(Box::new(SolverFailure {
            best: transform,
            iterations: rot.iterations,
        })));
    }
    Ok((transform, cov))
}

pub(crate) struct RotationOutcome {
    pub converged: bool,
    pub iterations: usize,
}

fn m_step_rigid_cfg(
    x: &PointSet3,
    z: &PointSet3,
    wbar: &[f64],
    sigma: &Covariance3,
    prev: &SimilarityTransform,
    cfg: &AlignConfig,
) -> Result<(SimilarityTransform, Covariance3, RotationOutcome)> {
    let j = x.len();
    if z.len() != j || wbar.len() != j {
        return Err(Error::LengthMismatch { expected: j, got: z.len().min(wbar.len()) });
    }
    if j < 3 {
        return Err(Error::DegenerateConfiguration);
    }
    let wsum: f64 = wbar.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::InvalidParameter("weights must have positive sum"));
    }
    let sigma_inv = sigma.inverse()?;

    let xc = weighted_centroid(x.points(), wbar, wsum);
    let zc = weighted_centroid(z.points(), wbar, wsum);
    let xp: Vec<Vector3<f64>> = x.iter().map(|p| p - xc).collect();
    let zp: Vec<Vector3<f64>> = z.iter().map(|p| p - zc).collect();

    let r_prev = prev.rotation_matrix();
    let scale = scale_step(&xp, &zp, wbar, &sigma_inv, &r_prev)?;

    let (q, rot_converged, rot_iters) =
        rotation_step(&xp, &zp, wbar, &sigma_inv, scale, *prev.rotation(), cfg);
    let r = q.to_rotation_matrix().into_inner();

    let mut cov = Matrix3::zeros();
    for ((xj, zj), &w) in xp.iter().zip(zp.iter()).zip(wbar.iter()) {
        let e = zj - scale * (r * xj);
        cov += w * e * e.transpose();
    }
    cov /= j as f64;
    let sigma_new = Covariance3::from_matrix(&cov)?;

    let translation = zc - scale * (r * xc);
    let transform = SimilarityTransform::from_parts(scale, q, translation);
    Ok((transform, sigma_new, RotationOutcome { converged: rot_converged, iterations: rot_iters }))
}

/// Scale update: square root of the ratio of weighted Mahalanobis norms of
/// the centered target and the rotated centered source.
fn scale_step(
    xp: &[Vector3<f64>],
    zp: &[Vector3<f64>],
    wbar: &[f64],
    sigma_inv: &Matrix3<f64>,
    r: &Matrix3<f64>,
) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((xj, zj), &w) in xp.iter().zip(zp.iter()).zip(wbar.iter()) {
        num += w * (zj.transpose() * sigma_inv * zj)[(0, 0)];
        let rx = r * xj;
        den += w * (rx.transpose() * sigma_inv * rx)[(0, 0)];
    }
    if !(den > 0.0 && num > 0.0) {
        return Err(Error::DegenerateConfiguration);
    }
    Ok(libm::sqrt(num / den))
}

/// Minimizes `1/2 sum_j wbar_j ||z'_j - rho R(q) x'_j||^2_Sigma` over the
/// unit quaternion by damped Gauss-Newton, renormalizing after each step.
/// Returns `(q, converged, iterations)`.
pub(crate) fn rotation_step(
    xp: &[Vector3<f64>],
    zp: &[Vector3<f64>],
    wbar: &[f64],
    sigma_inv: &Matrix3<f64>,
    scale: f64,
    init: UnitQuaternion<f64>,
    cfg: &AlignConfig,
) -> (UnitQuaternion<f64>, bool, usize) {
    let objective = |q: &UnitQuaternion<f64>| -> f64 {
        let r = q.to_rotation_matrix().into_inner();
        let mut f = 0.0;
        for ((xj, zj), &w) in xp.iter().zip(zp.iter()).zip(wbar.iter()) {
            let e = zj - scale * (r * xj);
            f += w * (e.transpose() * sigma_inv * e)[(0, 0)];
        }
        0.5 * f
    };

    let mut q = init;
    let mut f = objective(&q);
    let mut lambda = 1e-8;
    let mut g0_norm = None;

    for it in 0..cfg.rot_max_iter {
        let (h, g) = gauss_newton_system(xp, zp, wbar, sigma_inv, scale, &q);
        let gnorm = g.norm();
        let g0 = *g0_norm.get_or_insert(gnorm.max(f64::MIN_POSITIVE));
        if gnorm <= cfg.rot_grad_tol * g0 || f == 0.0 {
            return (q, true, it);
        }
        let mut accepted = false;
        for _ in 0..16 {
            let damped = h + Matrix4::identity() * (lambda * (1.0 + h.trace() / 4.0));
            let step = match nalgebra::linalg::Cholesky::new(damped) {
                Some(ch) => ch.solve(&(-g)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let prev = q.quaternion();
            let cand = Quaternion::new(
                prev.w + step[0],
                prev.i + step[1],
                prev.j + step[2],
                prev.k + step[3],
            );
            if cand.norm() < 1e-12 {
                lambda *= 10.0;
                continue;
            }
            let cand = UnitQuaternion::new_normalize(cand);
            let f_cand = objective(&cand);
            if f_cand <= f {
                let improvement = f - f_cand;
                let step_size = step.norm();
                q = cand;
                f = f_cand;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                // A vanishing trusted step or a vanishing decrease means the
                // iterate is numerically at the minimum.
                if step_size <= 1e-13
                    || (lambda <= 1e-4 && improvement <= 1e-14 * (1.0 + libm::fabs(f)))
                {
                    return (q, true, it + 1);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent step within the damping budget: numerically
            // stationary.
            return (q, true, it + 1);
        }
    }
    // Out of iterations: accept only if the gradient dropped well below its
    // starting magnitude.
    let (_, g) = gauss_newton_system(xp, zp, wbar, sigma_inv, scale, &q);
    let ok = g.norm() <= 1e-6 * g0_norm.unwrap_or(f64::MIN_POSITIVE);
    (q, ok, cfg.rot_max_iter)
}

/// Normal equations of the rotation residuals at `q`: `H = sum w J^T S J`,
/// `g = sum w J^T S e`, with `J` the Jacobian of the normalized quaternion
/// rotation map (radial direction projected out).
fn gauss_newton_system(
    xp: &[Vector3<f64>],
    zp: &[Vector3<f64>],
    wbar: &[f64],
    sigma_inv: &Matrix3<f64>,
    scale: f64,
    q: &UnitQuaternion<f64>,
) -> (Matrix4<f64>, Vector4<f64>) {
    let r = q.to_rotation_matrix().into_inner();
    let qq = q.quaternion();
    let (w0, u) = (qq.w, Vector3::new(qq.i, qq.j, qq.k));
    let qvec = Vector4::new(qq.w, qq.i, qq.j, qq.k);

    let mut h = Matrix4::zeros();
    let mut g = Vector4::zeros();
    for ((xj, zj), &wgt) in xp.iter().zip(zp.iter()).zip(wbar.iter()) {
        let v = *xj;
        let rv = r * v;
        // d(R_hom(q) v)/dq at |q| = 1, projected through the normalization:
        // J = G_hom - 2 (R v) q^T.
        let col_w = 2.0 * (w0 * v + u.cross(&v));
        let uv = u.dot(&v);
        let m_u = 2.0
            * (u * v.transpose() - v * u.transpose() + Matrix3::identity() * uv - w0 * skew(&v));
        let mut jac = Matrix3x4::zeros();
        jac.set_column(0, &col_w);
        for c in 0..3 {
            jac.set_column(c + 1, &m_u.column(c).into_owned());
        }
        jac -= 2.0 * rv * qvec.transpose();
        // The residual is z' - scale * R x', so its Jacobian carries -scale.
        let jr = jac * (-scale);
        let e = zj - scale * rv;
        let sj = sigma_inv * jr;
        h += wgt * jr.transpose() * sj;
        g += wgt * sj.transpose() * e;
    }
    (h, g)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Relative mean-squared residual below which the fit is treated as exact:
/// the data no longer constrains the noise model, so iterating further only
/// drives `mu` toward infinity without changing the transform.
pub(crate) const EXACT_FIT_REL_MSE: f64 = 1e-24;

/// Absolute eigenvalue floor for the covariance, relative to the squared
/// cloud radius, applied before each E-step so the precision stays defined
/// on exact data.
pub(crate) const COV_ABS_FLOOR_REL: f64 = 1e-24;

/// Parameter-change norm driving convergence: the maximum of the relative
/// scale change, the rotation geodesic angle, the normalized translation and
/// covariance changes, and the relative `mu` change.
pub fn parameter_delta(
    prev: (&SimilarityTransform, &Covariance3, f64),
    next: (&SimilarityTransform, &Covariance3, f64),
) -> f64 {
    let (tp, sp, mup) = prev;
    let (tn, sn, mun) = next;
    let d_scale = libm::fabs(tn.scale() - tp.scale()) / tp.scale();
    let d_rot = tp.rotation().angle_to(tn.rotation());
    let d_t = (tn.translation() - tp.translation()).norm() / (1.0 + tn.translation().norm());
    let d_sigma = (sn.matrix() - sp.matrix()).norm() / (1.0 + sn.matrix().norm());
    let d_mu = libm::fabs(mun - mup) / mup;
    d_scale.max(d_rot).max(d_t).max(d_sigma).max(d_mu)
}

/// Robust EM alignment of `x` onto `z` (both ordered in correspondence).
///
/// Initializes from the closed-form uniform-weight alignment, then iterates
/// E-step, weighted recentering, scale, rotation, covariance, and `mu`
/// updates until the parameter change drops below `cfg.eps` or `max_iter` is
/// reached. Deterministic for identical inputs.
pub fn align(x: &PointSet3, z: &PointSet3, cfg: &AlignConfig) -> Result<AlignResult> {
    let j = x.len();
    if z.len() != j {
        return Err(Error::LengthMismatch { expected: j, got: z.len() });
    }
    if j < 4 {
        return Err(Error::DegenerateConfiguration);
    }
    if !(cfg.eps > 0.0) || cfg.max_iter == 0 || !(cfg.mu_init > 0.0) {
        return Err(Error::InvalidParameter("eps, max_iter, mu_init must be positive"));
    }

    let cloud_sq = {
        let r = z.rms_radius();
        (r * r).max(f64::MIN_POSITIVE)
    };
    let abs_floor = COV_ABS_FLOOR_REL * cloud_sq;

    let mut transform = horn_align(x, z, None)?;
    let uniform = alloc::vec![1.0; j];
    let mut sigma = covariance_at(x, z, &transform, &uniform);
    let mut mu = cfg.mu_init;

    let mut q_trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut a = mu + 1.5;
    let mut b = alloc::vec![1.0; j];
    let mut wbar = uniform;

    for it in 1..=cfg.max_iter {
        iterations = it;
        let sigma_reg = sigma.with_abs_floor(abs_floor);

        let residuals: Vec<Vector3<f64>> = x
            .iter()
            .zip(z.iter())
            .map(|(px, pz)| pz - transform.apply_point(px))
            .collect();
        let (a_new, b_new, wbar_new) = e_step(&residuals, &sigma_reg, mu)?;
        a = a_new;
        b = b_new;
        wbar = wbar_new;

        // Rotation steps that hit the iteration cap still decreased the
        // objective, which is all the EM outer loop needs; the next E-step
        // reweights and reconditions the problem.
        let (t_new, sigma_new, _rot) = m_step_rigid_cfg(x, z, &wbar, &sigma_reg, &transform, cfg)?;
        let mu_new = update_mu(a, &b);

        let state = StudentState {
            sigma: sigma_new.with_abs_floor(abs_floor),
            mu: mu_new,
            a,
            b: b.clone(),
            wbar: wbar.clone(),
        };
        q_trace.push(q_objective(x, z, &t_new, &state)?);

        let delta = parameter_delta((&transform, &sigma, mu), (&t_new, &sigma_new, mu_new));
        transform = t_new;
        sigma = sigma_new;
        mu = mu_new;

        let mse: f64 = x
            .iter()
            .zip(z.iter())
            .map(|(px, pz)| (pz - transform.apply_point(px)).norm_squared())
            .sum::<f64>()
            / j as f64;
        if mse <= EXACT_FIT_REL_MSE * cloud_sq || delta <= cfg.eps {
            converged = true;
            break;
        }
    }

    Ok(AlignResult {
        transform,
        student: StudentState { sigma: sigma.with_abs_floor(abs_floor), mu, a, b, wbar },
        iterations,
        q_trace,
        converged,
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::apply_transform;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> PointSet3 {
        PointSet3::new(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        2.0 * (rng.gen::<f64>() - 0.5),
                        2.0 * (rng.gen::<f64>() - 0.5),
                        2.0 * (rng.gen::<f64>() - 0.5),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> SimilarityTransform {
        let q = [
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        ];
        SimilarityTransform::new(
            0.5 + 1.5 * rng.gen::<f64>(),
            q,
            Vector3::new(
                4.0 * (rng.gen::<f64>() - 0.5),
                4.0 * (rng.gen::<f64>() - 0.5),
                4.0 * (rng.gen::<f64>() - 0.5),
            ),
        )
        .unwrap()
    }

    #[test]
    fn e_step_zero_residual() {
        let (a, b, w) = e_step(&[Vector3::zeros()], &Covariance3::identity(), 1.0).unwrap();
        assert_eq!(a, 2.5);
        assert_eq!(b[0], 1.0);
        assert_eq!(w[0], 2.5);
    }

    #[test]
    fn e_step_unit_covariance() {
        let (_, b, w) =
            e_step(&[Vector3::new(1.0, 1.0, 0.0)], &Covariance3::identity(), 1.0).unwrap();
        assert_abs_diff_eq!(b[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(w[0], 1.25, epsilon = 1e-14);
    }

    #[test]
    fn e_step_anisotropic() {
        let sigma = Covariance3::diagonal(Vector3::new(1.0, 4.0, 1.0)).unwrap();
        let (a, b, w) = e_step(&[Vector3::new(0.0, 2.0, 0.0)], &sigma, 2.0).unwrap();
        assert_eq!(a, 3.5);
        assert_abs_diff_eq!(b[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w[0], 3.5 / 1.5, epsilon = 1e-12);
    }

    #[test]
    fn e_step_precision_anti_monotone() {
        let sigma = Covariance3::identity();
        let residuals: Vec<Vector3<f64>> =
            (0..10).map(|i| Vector3::new(i as f64 * 0.3, 0.0, 0.0)).collect();
        let (_, _, w) = e_step(&residuals, &sigma, 1.0).unwrap();
        for pair in w.windows(2) {
            assert!(pair[0] > pair[1]);
        }
    }

    #[test]
    fn q_objective_perfect_alignment() {
        let mut r = rng(1);
        let x = random_points(&mut r, 6);
        let state = StudentState {
            sigma: Covariance3::identity(),
            mu: 1.0,
            a: 2.5,
            b: alloc::vec![1.0; 6],
            wbar: alloc::vec![1.0; 6],
        };
        let q = q_objective(&x, &x, &SimilarityTransform::identity(), &state).unwrap();
        assert_abs_diff_eq!(q, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn q_objective_single_residual() {
        let x = PointSet3::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        let z = PointSet3::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        let state = StudentState {
            sigma: Covariance3::identity(),
            mu: 1.0,
            a: 2.5,
            b: alloc::vec![1.0],
            wbar: alloc::vec![1.0],
        };
        let q = q_objective(&x, &z, &SimilarityTransform::identity(), &state).unwrap();
        assert_abs_diff_eq!(q, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn q_objective_matches_naive_resummation() {
        let mut r = rng(2);
        for _ in 0..20 {
            let x = random_points(&mut r, 9);
            let z = random_points(&mut r, 9);
            let t = random_transform(&mut r);
            let m = Matrix3::new(2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.1);
            let sigma = Covariance3::from_matrix(&m).unwrap();
            let wbar: Vec<f64> = (0..9).map(|_| 0.1 + r.gen::<f64>()).collect();
            let state = StudentState {
                sigma: sigma.clone(),
                mu: 1.0,
                a: 2.5,
                b: alloc::vec![1.0; 9],
                wbar: wbar.clone(),
            };
            let got = q_objective(&x, &z, &t, &state).unwrap();

            // Independent route: cofactor determinant and an elementwise
            // triple loop.
            let mm = sigma.matrix();
            let det = mm[(0, 0)] * (mm[(1, 1)] * mm[(2, 2)] - mm[(1, 2)] * mm[(2, 1)])
                - mm[(0, 1)] * (mm[(1, 0)] * mm[(2, 2)] - mm[(1, 2)] * mm[(2, 0)])
                + mm[(0, 2)] * (mm[(1, 0)] * mm[(2, 1)] - mm[(1, 1)] * mm[(2, 0)]);
            let inv = mm.try_inverse().unwrap();
            let rm = t.rotation_matrix();
            let mut acc = 0.0;
            for jdx in 0..9 {
                let e = z[jdx] - (t.scale() * (rm * x[jdx]) + t.translation());
                let mut quad = 0.0;
                for rr in 0..3 {
                    for cc in 0..3 {
                        quad += e[rr] * inv[(rr, cc)] * e[cc];
                    }
                }
                acc += wbar[jdx] * quad;
            }
            let expected = 0.5 * (acc + 9.0 * libm::log(det));
            assert_abs_diff_eq!(got, expected, epsilon = 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn m_step_pure_scaling() {
        let x =
            PointSet3::from_rows(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let z =
            PointSet3::from_rows(&[[2.0, 0.0, 0.0], [-2.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();
        let (t, _) = m_step_rigid(
            &x,
            &z,
            &[1.0, 1.0, 1.0],
            &Covariance3::identity(),
            &SimilarityTransform::identity(),
        )
        .unwrap();
        assert_abs_diff_eq!(t.scale(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn m_step_rotation_matches_horn_for_isotropic() {
        let mut r = rng(3);
        for _ in 0..10 {
            let x = random_points(&mut r, 12);
            let truth = random_transform(&mut r);
            let z = apply_transform(&truth, &x);
            let horn = horn_align(&x, &z, None).unwrap();
            let (t, _) = m_step_rigid(
                &x,
                &z,
                &alloc::vec![1.0; 12],
                &Covariance3::identity(),
                &SimilarityTransform::identity(),
            )
            .unwrap();
            assert!(t.rotation().angle_to(horn.rotation()) < 1e-6);
            assert_abs_diff_eq!(t.scale(), horn.scale(), epsilon = 1e-8);
            assert_abs_diff_eq!(t.translation(), horn.translation(), epsilon = 1e-7);
        }
    }

    #[test]
    fn m_step_zero_covariance_on_noiseless() {
        let mut r = rng(4);
        let x = random_points(&mut r, 10);
        let truth = random_transform(&mut r);
        let z = apply_transform(&truth, &x);
        let (_, sigma) =
            m_step_rigid(&x, &z, &alloc::vec![1.0; 10], &Covariance3::identity(), &truth).unwrap();
        assert!(sigma.matrix().norm() < 1e-25);
    }

    #[test]
    fn update_mu_unit_b_returns_a() {
        assert_abs_diff_eq!(update_mu(2.5, &[1.0, 1.0, 1.0]), 2.5, epsilon = 1e-8);
    }

    #[test]
    fn update_mu_matches_digamma_oracle() {
        let a = 2.5;
        let b = [1.0, libm::exp(2.0)];
        let mu = update_mu(a, &b);
        assert_abs_diff_eq!(digamma(mu), digamma(a) - 1.0, epsilon = 1e-10);
    }

    #[test]
    fn update_mu_constructed_inverse_case() {
        let a = 3.7;
        let b = [libm::exp(digamma(a) - digamma(1.0))];
        assert_abs_diff_eq!(update_mu(a, &b), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn align_identity_case() {
        let mut r = rng(5);
        let x = random_points(&mut r, 8);
        let res = align(&x, &x, &AlignConfig::default()).unwrap();
        assert!(res.iterations <= 2, "took {} iterations", res.iterations);
        assert!(res.converged);
        assert_abs_diff_eq!(res.transform.scale(), 1.0, epsilon = 1e-9);
        assert!(res.transform.rotation().angle() < 1e-9);
        assert_abs_diff_eq!(res.transform.translation(), Vector3::zeros(), epsilon = 1e-9);
        let w0 = res.student.wbar[0];
        for w in &res.student.wbar {
            assert_abs_diff_eq!(*w, w0, epsilon = 1e-9);
        }
    }

    #[test]
    fn align_recovers_noiseless_transform() {
        let mut r = rng(6);
        for _ in 0..10 {
            let x = random_points(&mut r, 68);
            let truth = random_transform(&mut r);
            let z = apply_transform(&truth, &x);
            let res = align(&x, &z, &AlignConfig::default()).unwrap();
            let radius = z.rms_radius();
            assert!((res.transform.scale() - truth.scale()).abs() / truth.scale() < 1e-6);
            assert!(res.transform.rotation().angle_to(truth.rotation()) < 1e-6);
            assert!((res.transform.translation() - truth.translation()).norm() < 1e-6 * radius);
        }
    }

    #[test]
    fn align_robust_to_gross_outliers() {
        let mut r = rng(7);
        let x = random_points(&mut r, 68);
        let truth = random_transform(&mut r);
        let z_clean = apply_transform(&truth, &x);
        let radius = z_clean.rms_radius();
        let mut pts: Vec<Vector3<f64>> = z_clean.iter().copied().collect();
        let outliers = [3usize, 17, 25, 40, 55, 66];
        for &idx in &outliers {
            let dir =
                Vector3::new(r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5)
                    .normalize();
            pts[idx] += 50.0 * radius * dir;
        }
        let z = PointSet3::new(pts).unwrap();
        let res = align(&x, &z, &AlignConfig::default()).unwrap();

        let rot_err = res.transform.rotation().angle_to(truth.rotation());
        let scale_err = (res.transform.scale() - truth.scale()).abs() / truth.scale();
        assert!(rot_err < 1.0_f64.to_radians(), "rotation error {rot_err}");
        assert!(scale_err < 0.01, "scale error {scale_err}");

        // The outliers receive the smallest precisions.
        let mut order: Vec<usize> = (0..68).collect();
        order.sort_by(|&i, &jj| res.student.wbar[i].partial_cmp(&res.student.wbar[jj]).unwrap());
        let lowest: std::collections::BTreeSet<usize> = order[..6].iter().copied().collect();
        let expected: std::collections::BTreeSet<usize> = outliers.iter().copied().collect();
        assert_eq!(lowest, expected);

        // Robust beats the non-robust closed form.
        let horn = horn_align(&x, &z, None).unwrap();
        let horn_rot_err = horn.rotation().angle_to(truth.rotation());
        assert!(rot_err < horn_rot_err);
    }

    #[test]
    fn align_q_trace_non_increasing() {
        let mut r = rng(8);
        for _ in 0..20 {
            let x = random_points(&mut r, 40);
            let truth = random_transform(&mut r);
            let mut pts: Vec<Vector3<f64>> = apply_transform(&truth, &x).iter().copied().collect();
            let radius = PointSet3::new(pts.clone()).unwrap().rms_radius();
            for p in pts.iter_mut() {
                *p += 0.02
                    * radius
                    * Vector3::new(
                        r.gen::<f64>() - 0.5,
                        r.gen::<f64>() - 0.5,
                        r.gen::<f64>() - 0.5,
                    );
            }
            pts[5] += 20.0 * radius * Vector3::new(1.0, -0.5, 0.3).normalize();
            let z = PointSet3::new(pts).unwrap();
            let res = align(&x, &z, &AlignConfig::default()).unwrap();
            for pair in res.q_trace.windows(2) {
                assert!(
                    pair[1] <= pair[0] + 1e-9,
                    "trace increased: {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn align_isotropic_m_step_matches_horn() {
        let mut r = rng(9);
        let x = random_points(&mut r, 15);
        let z = random_points(&mut r, 15);
        let horn = horn_align(&x, &z, None).unwrap();
        let (t, _) = m_step_rigid(
            &x,
            &z,
            &alloc::vec![1.0; 15],
            &Covariance3::from_matrix(&(Matrix3::identity() * 0.37)).unwrap(),
            &horn,
        )
        .unwrap();
        assert!(t.rotation().angle_to(horn.rotation()) < 1e-8);
        assert_abs_diff_eq!(t.scale(), horn.scale(), epsilon = 1e-8 * horn.scale());
        assert_abs_diff_eq!(t.translation(), horn.translation(), epsilon = 1e-8);
    }

    #[test]
    fn align_rejects_degenerate_configurations() {
        let mut r = rng(55);
        let tiny = random_points(&mut r, 3);
        assert!(matches!(
            align(&tiny, &tiny, &AlignConfig::default()),
            Err(Error::DegenerateConfiguration)
        ));
        let collinear = PointSet3::from_rows(&[
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 1.0],
            [2.0, 2.0, 2.0],
            [3.0, 3.0, 3.0],
        ])
        .unwrap();
        assert!(matches!(
            align(&collinear, &collinear, &AlignConfig::default()),
            Err(Error::DegenerateConfiguration)
        ));
        let four = random_points(&mut r, 4);
        let five = random_points(&mut r, 5);
        assert!(matches!(
            align(&four, &five, &AlignConfig::default()),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn gauss_newton_gradient_matches_finite_differences() {
        let mut r = rng(99);
        let n = 7;
        let xp: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5))
            .collect();
        let zp: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5))
            .collect();
        let wbar: Vec<f64> = (0..n).map(|_| 0.2 + r.gen::<f64>()).collect();
        let m = Matrix3::new(2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.1);
        let sigma_inv = m.try_inverse().unwrap();
        let scale = 1.3;
        let q0 = UnitQuaternion::new_normalize(Quaternion::new(0.8, 0.1, -0.3, 0.2));

        let f = |q: &UnitQuaternion<f64>| -> f64 {
            let rm = q.to_rotation_matrix().into_inner();
            let mut acc = 0.0;
            for i in 0..n {
                let e = zp[i] - scale * (rm * xp[i]);
                acc += wbar[i] * (e.transpose() * sigma_inv * e)[(0, 0)];
            }
            0.5 * acc
        };

        let (_, g) = gauss_newton_system(&xp, &zp, &wbar, &sigma_inv, scale, &q0);
        let h = 1e-7;
        let base = q0.quaternion();
        let raw = [base.w, base.i, base.j, base.k];
        for k in 0..4 {
            let mut plus = raw;
            plus[k] += h;
            let mut minus = raw;
            minus[k] -= h;
            let qp = UnitQuaternion::new_normalize(Quaternion::new(
                plus[0], plus[1], plus[2], plus[3],
            ));
            let qm = UnitQuaternion::new_normalize(Quaternion::new(
                minus[0], minus[1], minus[2], minus[3],
            ));
            let num = (f(&qp) - f(&qm)) / (2.0 * h);
            assert!(
                (num - g[k]).abs() < 1e-5 * (1.0 + num.abs()),
                "component {k}: numeric {num} analytic {}",
                g[k]
            );
        }
    }

    #[test]
    fn align_deterministic() {
        let mut r = rng(10);
        let x = random_points(&mut r, 30);
        let truth = random_transform(&mut r);
        let mut pts: Vec<Vector3<f64>> = apply_transform(&truth, &x).iter().copied().collect();
        pts[2] += Vector3::new(5.0, 5.0, -3.0);
        let z = PointSet3::new(pts).unwrap();
        let a1 = align(&x, &z, &AlignConfig::default()).unwrap();
        let a2 = align(&x, &z, &AlignConfig::default()).unwrap();
        assert_eq!(a1.transform.scale().to_bits(), a2.transform.scale().to_bits());
        assert_eq!(
            a1.transform.quaternion().map(f64::to_bits),
            a2.transform.quaternion().map(f64::to_bits)
        );
        for (p, q) in a1.q_trace.iter().zip(a2.q_trace.iter()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
        for (p, q) in a1.student.wbar.iter().zip(a2.student.wbar.iter()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }
}
