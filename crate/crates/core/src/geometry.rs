//! Point sets, similarity transforms, covariances, and the closed-form
//! weighted alignment used to initialize the EM solvers.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// An ordered list of 3D points. Index order is the correspondence order:
/// point `j` of one set corresponds to point `j` of another.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet3 {
    points: Vec<Vector3<f64>>,
}

impl PointSet3 {
    /// Builds a point set, rejecting empty input and non-finite coordinates.
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateInput("empty point set"));
        }
        if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
            return Err(Error::DegenerateInput("non-finite coordinate"));
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced nonempty at construction
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Vector3<f64>> {
        self.points.iter()
    }

    /// Unweighted centroid.
    pub fn centroid(&self) -> Vector3<f64> {
        let sum: Vector3<f64> = self.points.iter().sum();
        sum / self.points.len() as f64
    }

    /// Root-mean-square distance from the centroid; the "cloud radius" used
    /// to express translation tolerances and outlier displacements.
    pub fn rms_radius(&self) -> f64 {
        let c = self.centroid();
        let msd: f64 = self.points.iter().map(|p| (p - c).norm_squared()).sum::<f64>()
            / self.points.len() as f64;
        libm::sqrt(msd)
    }
}

impl core::ops::Index<usize> for PointSet3 {
    type Output = Vector3<f64>;
    fn index(&self, i: usize) -> &Vector3<f64> {
        &self.points[i]
    }
}

/// Scale, unit-quaternion rotation, and translation. The quaternion is kept
/// normalized and sign-canonicalized (`w >= 0`; if `w == 0`, the first
/// nonzero component is positive) so equal rotations compare equal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    scale: f64,
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParameter("scale must be positive and finite"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("translation must be finite"));
        }
        let q = unit_quat(rotation)?;
        Ok(Self { scale, rotation: q, translation })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Quaternion components as `(w, x, y, z)`, sign-canonicalized.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    /// Maps a single point: `scale * R * p + t`.
    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Applies the transform to every point of a set, preserving order.
    pub fn apply(&self, set: &PointSet3) -> PointSet3 {
        PointSet3 {
            points: set.iter().map(|p| self.apply_point(p)).collect(),
        }
    }

    /// The inverse transform: scale `1/s`, rotation `R^T`, translation
    /// `-(1/s) R^T t`. Composing a transform with its inverse is the
    /// identity map.
    pub fn inverse(&self) -> Self {
        let inv_scale = 1.0 / self.scale;
        let inv_rot = self.rotation.inverse();
        let translation = -(inv_scale * (inv_rot * self.translation));
        Self {
            scale: inv_scale,
            rotation: canonicalize(inv_rot),
            translation,
        }
    }

    /// Composition `self . other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: canonicalize(self.rotation * other.rotation),
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub(crate) fn from_parts(scale: f64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { scale, rotation: canonicalize(rotation), translation }
    }
}

/// Applies a similarity transform to a point set (`scale * R * p + t`).
pub fn apply_transform(t: &SimilarityTransform, set: &PointSet3) -> PointSet3 {
    t.apply(set)
}

/// The inverse pose of a transform.
pub fn inverse_pose(t: &SimilarityTransform) -> SimilarityTransform {
    t.inverse()
}

/// Extracts the yaw (horizontal head-rotation) angle in degrees from a pose
/// rotation. For a pose whose inverse is a pure rotation by `psi` about the
/// vertical image axis, this returns `psi`.
pub fn yaw_degrees(t: &SimilarityTransform) -> f64 {
    let r = t.rotation_matrix();
    let s = r[(2, 0)].clamp(-1.0, 1.0);
    libm::asin(s).to_degrees()
}

fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let c = q.quaternion();
    let comps = [c.w, c.i, c.j, c.k];
    let flip = comps.iter().find(|v| **v != 0.0).map_or(false, |v| *v < 0.0);
    if flip {
        UnitQuaternion::new_unchecked(Quaternion::new(-c.w, -c.i, -c.j, -c.k))
    } else {
        q
    }
}

fn unit_quat(q: [f64; 4]) -> Result<UnitQuaternion<f64>> {
    let norm = libm::sqrt(q.iter().map(|v| v * v).sum());
    if !norm.is_finite() || norm < 1e-12 {
        return Err(Error::DegenerateInput("zero quaternion"));
    }
    let q = Quaternion::new(q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
    Ok(canonicalize(UnitQuaternion::new_unchecked(q)))
}

/// Converts a quaternion `(w, x, y, z)` to a rotation matrix. The input is
/// renormalized, so `q` and `-q` yield the same matrix. A zero quaternion is
/// rejected.
pub fn quat_to_matrix(q: [f64; 4]) -> Result<Matrix3<f64>> {
    Ok(unit_quat(q)?.to_rotation_matrix().into_inner())
}

/// A symmetric positive semi-definite 3x3 covariance. Construction
/// symmetrizes the input and clamps eigenvalues from below at
/// `1e-8 * trace / 3`, so any covariance with nonzero trace is safely
/// invertible.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance3 {
    m: Matrix3<f64>,
}

const EIGVAL_FLOOR_REL: f64 = 1e-8;

impl Covariance3 {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite covariance entry"));
        }
        let scale = m.iter().map(|v| libm::fabs(*v)).fold(0.0, f64::max);
        if (m - m.transpose()).iter().map(|v| libm::fabs(*v)).fold(0.0, f64::max) > 1e-12 * scale.max(1.0) {
            return Err(Error::DegenerateInput("covariance not symmetric"));
        }
        let sym = (m + m.transpose()) * 0.5;
        Ok(Self { m: clamp_eigenvalues(&sym, 0.0) })
    }

    pub fn diagonal(d: Vector3<f64>) -> Result<Self> {
        Self::from_matrix(&Matrix3::from_diagonal(&d))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Re-clamps eigenvalues with an additional absolute floor. Used by the
    /// EM solvers to keep the covariance invertible when residuals vanish.
    pub fn with_abs_floor(&self, abs_floor: f64) -> Self {
        Self { m: clamp_eigenvalues(&self.m, abs_floor) }
    }

    /// The inverse, or `SingularCovariance` if the matrix is not positive
    /// definite even after eigenvalue clamping (e.g. the zero matrix).
    pub fn inverse(&self) -> Result<Matrix3<f64>> {
        match nalgebra::linalg::Cholesky::new(self.m) {
            Some(ch) => Ok(ch.inverse()),
            None => Err(Error::SingularCovariance),
        }
    }

    pub fn log_det(&self) -> Result<f64> {
        let ch = nalgebra::linalg::Cholesky::new(self.m).ok_or(Error::SingularCovariance)?;
        let l = ch.l();
        Ok(2.0 * (libm::log(l[(0, 0)]) + libm::log(l[(1, 1)]) + libm::log(l[(2, 2)])))
    }
}

fn clamp_eigenvalues(m: &Matrix3<f64>, abs_floor: f64) -> Matrix3<f64> {
    let eig = nalgebra::linalg::SymmetricEigen::new(*m);
    let trace = eig.eigenvalues.iter().sum::<f64>();
    let floor = (EIGVAL_FLOOR_REL * trace / 3.0).max(abs_floor).max(0.0);
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return *m;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let mut out = Matrix3::zeros();
    for k in 0..3 {
        let u = eig.eigenvectors.column(k);
        out += clamped[k] * u * u.transpose();
    }
    (out + out.transpose()) * 0.5
}

/// Squared Mahalanobis norm `e^T Sigma^{-1} e`. Zero iff `e = 0`.
pub fn mahalanobis_sq(e: &Vector3<f64>, sigma: &Covariance3) -> Result<f64> {
    let inv = sigma.inverse()?;
    Ok((e.transpose() * inv * e)[(0, 0)])
}

/// Weighted closed-form similarity alignment between corresponding point
/// sets: finds `(scale, R, t)` mapping `x` onto `z`. The rotation comes from
/// the quaternion eigenvector method, the scale from the symmetric ratio of
/// weighted centered norms, so it doubles as the isotropic-covariance closed
/// form of the EM rotation/scale steps.
///
/// `weights` defaults to uniform. Requires at least 3 points in a
/// non-degenerate (non-collinear) configuration.
pub fn horn_align(
    x: &PointSet3,
    z: &PointSet3,
    weights: Option<&[f64]>,
) -> Result<SimilarityTransform> {
    let j = x.len();
    if z.len() != j {
        return Err(Error::LengthMismatch { expected: j, got: z.len() });
    }
    if j < 3 {
        return Err(Error::DegenerateConfiguration);
    }
    let uniform = alloc::vec![1.0; j];
    let w = match weights {
        Some(w) => {
            if w.len() != j {
                return Err(Error::LengthMismatch { expected: j, got: w.len() });
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidParameter("weights must be finite and nonnegative"));
            }
            w
        }
        None => uniform.as_slice(),
    };
    let wsum: f64 = w.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::InvalidParameter("weight sum must be positive"));
    }

    let xc = weighted_centroid(x.points(), w, wsum);
    let zc = weighted_centroid(z.points(), w, wsum);

    // Weighted cross-covariance of the centered sets (source rows, target cols).
    let mut s = Matrix3::zeros();
    let mut xnorm = 0.0;
    let mut znorm = 0.0;
    for ((px, pz), &wj) in x.iter().zip(z.iter()).zip(w.iter()) {
        let dx = px - xc;
        let dz = pz - zc;
        s += wj * dx * dz.transpose();
        xnorm += wj * dx.norm_squared();
        znorm += wj * dz.norm_squared();
    }

    // Rank check: a similarity transform is only determined when the centered
    // configuration spans at least two directions.
    let svd = nalgebra::linalg::SVD::new(s, false, false);
    let s1 = svd.singular_values[0];
    let s2 = svd.singular_values[1];
    if !(s1 > 0.0) || s2 <= 1e-12 * s1 {
        return Err(Error::DegenerateConfiguration);
    }

    let q = rotation_from_cross_covariance(&s);
    if !(xnorm > 0.0 && znorm > 0.0) {
        return Err(Error::DegenerateConfiguration);
    }
    let scale = libm::sqrt(znorm / xnorm);
    let translation = zc - scale * (q * xc);
    Ok(SimilarityTransform::from_parts(scale, q, translation))
}

/// The optimal rotation mapping centered source onto centered target given
/// their cross-covariance `S = sum w x' z'^T`: the eigenvector of the largest
/// eigenvalue of the 4x4 quaternion profile matrix.
fn rotation_from_cross_covariance(s: &Matrix3<f64>) -> UnitQuaternion<f64> {
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let n = Matrix4::new(
        sxx + syy + szz, syz - szy,       szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz, sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,       -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,       syz + szy,        -sxx - syy + szz,
    );
    let eig = nalgebra::linalg::SymmetricEigen::new(n);
    let mut best = 0;
    for k in 1..4 {
        if eig.eigenvalues[k] > eig.eigenvalues[best] {
            best = k;
        }
    }
    let v = eig.eigenvectors.column(best);
    let q = Quaternion::new(v[0], v[1], v[2], v[3]);
    canonicalize(UnitQuaternion::new_normalize(q))
}

pub(crate) fn weighted_centroid(points: &[Vector3<f64>], w: &[f64], wsum: f64) -> Vector3<f64> {
    let mut acc = Vector3::zeros();
    for (p, &wj) in points.iter().zip(w.iter()) {
        acc += wj * p;
    }
    acc / wsum
}
