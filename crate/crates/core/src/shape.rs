//! Linear statistical shape models: PCA over registered vertex sets,
//! low-dimensional embeddings, and the confidence ellipsoid of plausible
//! shapes.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Matrix3xX, Vector3};

use crate::error::{Error, Result};

/// A flat shape vector: `(V_11, V_12, V_13, ..., V_N1, V_N2, V_N3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeVector {
    coords: Vec<f64>,
}

impl ShapeVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() || coords.len() % 3 != 0 {
            return Err(Error::InvalidParameter("shape length must be a positive multiple of 3"));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite shape coordinate"));
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_vertices(&self) -> usize {
        self.coords.len() / 3
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn vertex(&self, n: usize) -> Vector3<f64> {
        Vector3::new(self.coords[3 * n], self.coords[3 * n + 1], self.coords[3 * n + 2])
    }

    pub fn vertices(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        (0..self.num_vertices()).map(move |n| self.vertex(n))
    }
}

/// A low-dimensional shape embedding `s` of length `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub s: Vec<f64>,
}

impl Embedding {
    pub fn zeros(k: usize) -> Self {
        Self { s: alloc::vec![0.0; k] }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// The optional expression block: mean expressive offset plus its own modes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionPart {
    pub mean_offset: ShapeVector,
    pub basis: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

/// Mean shape, truncated orthonormal mode basis (3N x K), eigenvalues, mesh
/// topology, and the vertex subset used as landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel {
    mean: ShapeVector,
    basis: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    triangles: Vec<[u32; 3]>,
    landmark_indices: Vec<u32>,
    expression: Option<ExpressionPart>,
}

impl ShapeModel {
    /// Assembles and validates a model: orthonormal basis (within 1e-8),
    /// positive descending eigenvalues, and in-range distinct landmark and
    /// triangle indices.
    pub fn new(
        mean: ShapeVector,
        basis: DMatrix<f64>,
        eigenvalues: Vec<f64>,
        triangles: Vec<[u32; 3]>,
        landmark_indices: Vec<u32>,
        expression: Option<ExpressionPart>,
    ) -> Result<Self> {
        let dim = mean.len();
        let n = mean.num_vertices() as u32;
        let k = eigenvalues.len();
        if k == 0 {
            return Err(Error::InvalidParameter("model must have at least one mode"));
        }
        if basis.nrows() != dim || basis.ncols() != k {
            return Err(Error::LengthMismatch { expected: dim * k, got: basis.nrows() * basis.ncols() });
        }
        if eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidParameter("eigenvalues must be positive"));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidParameter("eigenvalues must be sorted descending"));
        }
        let gram = basis.transpose() * &basis;
        for r in 0..k {
            for c in 0..k {
                let expect = if r == c { 1.0 } else { 0.0 };
                if libm::fabs(gram[(r, c)] - expect) > 1e-8 {
                    return Err(Error::InvalidParameter("mode basis is not orthonormal"));
                }
            }
        }
        if landmark_indices.is_empty() || landmark_indices.iter().any(|&i| i >= n) {
            return Err(Error::InvalidParameter("landmark indices out of range"));
        }
        let mut seen = landmark_indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("landmark indices must be distinct"));
        }
        if triangles.iter().any(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidParameter("triangle index out of range"));
        }
        if let Some(part) = &expression {
            if part.mean_offset.len() != dim {
                return Err(Error::LengthMismatch { expected: dim, got: part.mean_offset.len() });
            }
            if part.basis.nrows() != dim || part.basis.ncols() != part.eigenvalues.len() {
                return Err(Error::InvalidParameter("expression basis shape mismatch"));
            }
        }
        Ok(Self { mean, basis, eigenvalues, triangles, landmark_indices, expression })
    }

    pub fn num_vertices(&self) -> usize {
        self.mean.num_vertices()
    }

    pub fn num_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn mean(&self) -> &ShapeVector {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn landmark_indices(&self) -> &[u32] {
        &self.landmark_indices
    }

    pub fn expression(&self) -> Option<&ExpressionPart> {
        self.expression.as_ref()
    }

    /// Mean vertex `n`.
    pub fn mean_vertex(&self, n: usize) -> Vector3<f64> {
        self.mean.vertex(n)
    }

    /// The 3 x K mode block of vertex `n` (rows `3n..3n+3` of the basis).
    pub fn mode_block(&self, n: usize) -> Matrix3xX<f64> {
        let k = self.num_modes();
        let mut block = Matrix3xX::zeros(k);
        for c in 0..k {
            for r in 0..3 {
                block[(r, c)] = self.basis[(3 * n + r, c)];
            }
        }
        block
    }

    /// Mean positions of the landmark vertices, in landmark order.
    pub fn landmark_means(&self) -> Vec<Vector3<f64>> {
        self.landmark_indices.iter().map(|&i| self.mean.vertex(i as usize)).collect()
    }
}

/// Builds a shape model from registered training shapes.
///
/// The mean is the per-coordinate average; modes and eigenvalues come from
/// the eigendecomposition of the `1/M`-normalized sample covariance. `K` is
/// the smallest mode count whose eigenvalue sum reaches `variance_fraction`
/// of the total, clamped to `[min_k, M - 1]`; eigenvalues below
/// `1e-12 * lambda_1` are excluded regardless so the ellipsoid metric stays
/// invertible. When `3N > M` the decomposition runs on the M x M Gram matrix,
/// which yields the same leading modes without forming the 3N x 3N
/// covariance.
pub fn build_model(
    training: &[ShapeVector],
    variance_fraction: f64,
    min_k: usize,
    triangles: Vec<[u32; 3]>,
    landmark_indices: Vec<u32>,
) -> Result<ShapeModel> {
    let m = training.len();
    if m < 2 {
        return Err(Error::InvalidParameter("need at least 2 training shapes"));
    }
    if !(variance_fraction > 0.0 && variance_fraction <= 1.0) {
        return Err(Error::InvalidParameter("variance_fraction must be in (0, 1]"));
    }
    let min_k = min_k.max(1);
    let dim = training[0].len();
    for s in training {
        if s.len() != dim {
            return Err(Error::LengthMismatch { expected: dim, got: s.len() });
        }
    }

    let mut mean = alloc::vec![0.0; dim];
    for s in training {
        for (acc, v) in mean.iter_mut().zip(s.coords().iter()) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }

    // Centered data matrix, shapes as columns.
    let mut centered = DMatrix::zeros(dim, m);
    for (c, s) in training.iter().enumerate() {
        for (r, v) in s.coords().iter().enumerate() {
            centered[(r, c)] = v - mean[r];
        }
    }

    let (eigvals, modes) = if dim > m {
        gram_spectrum(&centered, m)
    } else {
        direct_spectrum(&centered, m)
    };

    let total: f64 = eigvals.iter().sum();
    let lambda_max = eigvals.first().copied().unwrap_or(0.0);

    let model_mean = ShapeVector::new(mean)?;
    if !(lambda_max > 0.0) {
        // Degenerate training set (zero variance): fall back to canonical
        // axis modes with a tiny eigenvalue floor so downstream quadratic
        // forms stay defined.
        let k = min_k.min(dim);
        let mut basis = DMatrix::zeros(dim, k);
        for c in 0..k {
            basis[(c, c)] = 1.0;
        }
        return ShapeModel::new(
            model_mean,
            basis,
            alloc::vec![ZERO_VARIANCE_EIGVAL; k],
            triangles,
            landmark_indices,
            None,
        );
    }

    let usable = eigvals.iter().take_while(|&&l| l > 1e-12 * lambda_max).count();
    let usable = usable.min(m - 1).max(1);
    let mut k = 0;
    let mut acc = 0.0;
    for &l in eigvals.iter().take(usable) {
        k += 1;
        acc += l;
        if acc >= variance_fraction * total {
            break;
        }
    }
    let k = k.max(min_k.min(usable));

    let mut basis = DMatrix::zeros(dim, k);
    for c in 0..k {
        basis.set_column(c, &modes.column(c));
    }
    ShapeModel::new(model_mean, basis, eigvals[..k].to_vec(), triangles, landmark_indices, None)
}

/// Eigenvalue assigned to all modes of a zero-variance training set.
pub const ZERO_VARIANCE_EIGVAL: f64 = 1e-12;

/// Spectrum via the M x M Gram matrix `D^T D / M`: eigenvector `v` of the
/// Gram matrix lifts to the covariance eigenvector `D v / |D v|` with the
/// same eigenvalue.
fn gram_spectrum(centered: &DMatrix<f64>, m: usize) -> (Vec<f64>, DMatrix<f64>) {
    let gram = centered.transpose() * centered / m as f64;
    let eig = nalgebra::linalg::SymmetricEigen::new(gram);
    let order = descending_order(eig.eigenvalues.as_slice());
    let mut vals = Vec::with_capacity(m);
    let mut modes = DMatrix::zeros(centered.nrows(), m);
    for (c, &idx) in order.iter().enumerate() {
        let lambda = eig.eigenvalues[idx].max(0.0);
        vals.push(lambda);
        let lifted = centered * eig.eigenvectors.column(idx);
        let norm = lifted.norm();
        if norm > 0.0 {
            modes.set_column(c, &(lifted / norm));
        }
    }
    canonicalize_mode_signs(&mut modes);
    (vals, modes)
}

/// Direct eigendecomposition of the 3N x 3N covariance (used when 3N <= M).
fn direct_spectrum(centered: &DMatrix<f64>, m: usize) -> (Vec<f64>, DMatrix<f64>) {
    let cov = centered * centered.transpose() / m as f64;
    let eig = nalgebra::linalg::SymmetricEigen::new(cov);
    let order = descending_order(eig.eigenvalues.as_slice());
    let dim = centered.nrows();
    let mut vals = Vec::with_capacity(dim);
    let mut modes = DMatrix::zeros(dim, dim);
    for (c, &idx) in order.iter().enumerate() {
        vals.push(eig.eigenvalues[idx].max(0.0));
        modes.set_column(c, &eig.eigenvectors.column(idx));
    }
    canonicalize_mode_signs(&mut modes);
    (vals, modes)
}

fn descending_order(vals: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));
    order
}

/// Fixes the eigenvector sign ambiguity: the entry of largest magnitude in
/// each mode is made positive, so rebuilt models are reproducible.
fn canonicalize_mode_signs(modes: &mut DMatrix<f64>) {
    for c in 0..modes.ncols() {
        let mut best = 0;
        let mut best_mag = 0.0;
        for r in 0..modes.nrows() {
            let mag = libm::fabs(modes[(r, c)]);
            if mag > best_mag {
                best_mag = mag;
                best = r;
            }
        }
        if modes[(best, c)] < 0.0 {
            for r in 0..modes.nrows() {
                modes[(r, c)] = -modes[(r, c)];
            }
        }
    }
}

/// Projects a shape onto the mode basis: `s = U^T (S - mean)`.
pub fn embed(model: &ShapeModel, shape: &ShapeVector) -> Result<Embedding> {
    if shape.len() != model.mean.len() {
        return Err(Error::LengthMismatch { expected: model.mean.len(), got: shape.len() });
    }
    let diff = DVector::from_iterator(
        shape.len(),
        shape.coords().iter().zip(model.mean.coords().iter()).map(|(a, b)| a - b),
    );
    let s = model.basis.transpose() * diff;
    Ok(Embedding { s: s.iter().copied().collect() })
}

/// Reconstructs a shape from its embedding: `S = mean + U s`.
pub fn reconstruct(model: &ShapeModel, emb: &Embedding) -> Result<ShapeVector> {
    if emb.len() != model.num_modes() {
        return Err(Error::LengthMismatch { expected: model.num_modes(), got: emb.len() });
    }
    let s = DVector::from_column_slice(&emb.s);
    let rec = &model.basis * s;
    let coords: Vec<f64> =
        model.mean.coords().iter().zip(rec.iter()).map(|(m, d)| m + d).collect();
    ShapeVector::new(coords)
}

/// Reconstructs a shape from separate identity and expression embeddings:
/// sum of both means and both mode products.
pub fn compose_identity_expression(
    model: &ShapeModel,
    s_id: &Embedding,
    s_expr: &Embedding,
) -> Result<ShapeVector> {
    let part = model.expression().ok_or(Error::MissingExpressionPart)?;
    if s_id.len() != model.num_modes() {
        return Err(Error::LengthMismatch { expected: model.num_modes(), got: s_id.len() });
    }
    if s_expr.len() != part.eigenvalues.len() {
        return Err(Error::LengthMismatch { expected: part.eigenvalues.len(), got: s_expr.len() });
    }
    let id = &model.basis * DVector::from_column_slice(&s_id.s);
    let expr = &part.basis * DVector::from_column_slice(&s_expr.s);
    let coords: Vec<f64> = model
        .mean
        .coords()
        .iter()
        .zip(part.mean_offset.coords().iter())
        .zip(id.iter().zip(expr.iter()))
        .map(|((m, d), (a, b))| m + d + a + b)
        .collect();
    ShapeVector::new(coords)
}

/// The ellipsoid quadratic form `s^T Lambda^{-1} s`; values `<= 1` lie inside
/// the high-confidence region of the training distribution.
pub fn ellipsoid_check(model: &ShapeModel, emb: &Embedding) -> Result<f64> {
    if emb.len() != model.num_modes() {
        return Err(Error::LengthMismatch { expected: model.num_modes(), got: emb.len() });
    }
    Ok(emb
        .s
        .iter()
        .zip(model.eigenvalues.iter())
        .map(|(&s, &l)| s * s / l)
        .sum())
}
