//! Deterministic synthetic scenes: a randomized deformable face-like mesh
//! family, a statistical model built from it, and a textured render of one
//! sampled shape under a known pose, with landmarks, noise, and outliers.
//!
//! Everything is derived from a single seed through a counter-based stream
//! cipher RNG, so identical parameters reproduce identical scenes down to
//! the byte.

use frontal_core::geometry::{PointSet3, SimilarityTransform};
use frontal_core::image::Image;
use frontal_core::pipeline::canvas_for_model;
use frontal_core::raster::{interpolate_attribute, rasterize_mesh, GridSpec};
use frontal_core::shape::{build_model, reconstruct, Embedding, ShapeModel, ShapeVector};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub seed: u64,
    /// Target vertex count; rounded to the nearest full grid (`nu * nv`).
    pub n_vertices: u32,
    /// Training-set size for the shape model.
    pub m_shapes: u32,
    /// Number of independent deformation fields in the mesh family.
    pub k_target: u32,
    pub yaw_deg: f64,
    /// Isotropic Gaussian landmark noise, in pixels.
    pub noise_sigma: f64,
    /// Fraction of landmarks displaced by 50x the cloud radius;
    /// `floor(frac * J)` landmarks are affected.
    pub outlier_frac: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 7,
            n_vertices: 2000,
            m_shapes: 20,
            k_target: 8,
            yaw_deg: 30.0,
            noise_sigma: 0.0,
            outlier_frac: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub model: ShapeModel,
    /// Textured render of the posed view; landmark coordinates index into
    /// this image's pixel frame.
    pub input: Image,
    /// Observed landmarks: posed, with noise and outliers applied.
    pub landmarks: PointSet3,
    /// The same landmarks before noise and outliers.
    pub clean_landmarks: PointSet3,
    /// Ground-truth pose: maps input pixel coordinates to the model frame.
    pub true_pose: SimilarityTransform,
    pub true_embedding: Embedding,
    /// Frontal ground-truth render on the model's canonical canvas.
    pub frontal_truth: Image,
    /// True landmark positions in the frontal render's pixel frame.
    pub truth_landmarks: PointSet3,
    /// Sorted indices of the displaced landmarks.
    pub outlier_indices: Vec<usize>,
    pub view_scale: f64,
}

pub fn synth_scene(p: &SynthParams) -> Result<SynthScene> {
    validate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    // Grid resolution with a 4:5 (width:height) aspect.
    let n_target = p.n_vertices as f64;
    let nu = (n_target * 0.8).sqrt().round().max(8.0) as usize;
    let nv = (n_target / nu as f64).round().max(10.0) as usize;

    let (base, uv) = base_mesh(nu, nv);
    let triangles = grid_triangles(nu, nv);
    let landmark_indices = landmark_vertex_indices(nu, nv);

    // Smooth deformation fields, unit RMS each, windowed to vanish at the
    // mesh boundary. Each field has its similarity-motion component at the
    // landmarks projected out, so sampled deformations cannot masquerade as
    // pose.
    let fields: Vec<Vec<f64>> = (0..p.k_target)
        .map(|_| {
            let mut f = deformation_field(&mut rng, &uv);
            remove_landmark_rigid_component(&mut f, &base, &landmark_indices);
            f
        })
        .collect();

    // Deformed samples are rigidly re-registered onto the base before the
    // model build, like registered scans: otherwise the smooth fields leak
    // near-rigid components into the modes and pose becomes unidentifiable.
    let base_set = PointSet3::new(
        base.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect::<Vec<_>>(),
    )?;
    let m = p.m_shapes as usize;
    let mut training = Vec::with_capacity(m);
    for _ in 0..m {
        let mut coords = base.clone();
        for (pidx, field) in fields.iter().enumerate() {
            let amp = 4.0 * 0.75f64.powi(pidx as i32) * uniform_unit_var(&mut rng);
            for (c, f) in coords.iter_mut().zip(field.iter()) {
                *c += amp * f;
            }
        }
        let deformed = PointSet3::new(
            coords.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect::<Vec<_>>(),
        )?;
        let to_base = frontal_core::geometry::horn_align(&deformed, &base_set, None)?;
        let registered: Vec<f64> = deformed
            .iter()
            .map(|v| to_base.apply_point(v))
            .flat_map(|v| [v.x, v.y, v.z])
            .collect();
        training.push(ShapeVector::new(registered)?);
    }
    let model = build_model(&training, 0.95, 1, triangles, landmark_indices)?;
    let k = model.num_modes();

    // Embedding sampled strictly inside the confidence ellipsoid.
    let dir: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let true_embedding = Embedding {
        s: dir
            .iter()
            .zip(model.eigenvalues())
            .map(|(&g, &l)| 0.9 * l.sqrt() * g / norm)
            .collect(),
    };
    let true_shape = reconstruct(&model, &true_embedding)?;
    let verts_frontal =
        PointSet3::new(true_shape.vertices().collect::<Vec<_>>()).expect("finite vertices");

    // Per-vertex texture: low-frequency stripes plus a finer modulation,
    // evaluated on the undeformed parameterization so all renders share it.
    let texture = vertex_texture(&mut rng, &uv);

    let canvas = canvas_for_model(&model);
    let frontal_truth = render_textured(&verts_frontal, model.triangles(), &canvas, &texture)?;
    let truth_landmarks = PointSet3::new(
        model
            .landmark_indices()
            .iter()
            .map(|&i| {
                let v = verts_frontal[i as usize];
                Vector3::new(v.x - canvas.origin[0], v.y - canvas.origin[1], v.z)
            })
            .collect(),
    )?;

    // Posed view. Zero yaw reuses the canonical frame so the input render
    // is the frontal render; otherwise the mesh is rotated about the
    // vertical axis, scaled, and framed with a margin.
    let yaw = p.yaw_deg.to_radians();
    let (input, clean_landmarks, true_pose, view_scale) = if p.yaw_deg == 0.0 {
        let input = render_textured(&verts_frontal, model.triangles(), &canvas, &texture)?;
        let pose = SimilarityTransform::new(
            1.0,
            [1.0, 0.0, 0.0, 0.0],
            Vector3::new(canvas.origin[0], canvas.origin[1], 0.0),
        )?;
        (input, truth_landmarks.clone(), pose, 1.0)
    } else {
        let view_scale = (0.44 * (rng.gen::<f64>() - 0.5)).exp();
        let half = yaw / 2.0;
        let view_rot = [half.cos(), 0.0, half.sin(), 0.0];
        let rot = frontal_core::geometry::quat_to_matrix(view_rot)?;
        let rotated: Vec<Vector3<f64>> =
            verts_frontal.iter().map(|v| view_scale * (rot * v)).collect();
        let pad = 16.0;
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &rotated {
            min_x = min_x.min(v.x);
            max_x = max_x.max(v.x);
            min_y = min_y.min(v.y);
            max_y = max_y.max(v.y);
        }
        let t_view = Vector3::new(pad - min_x, pad - min_y, 0.0);
        let posed: Vec<Vector3<f64>> = rotated.iter().map(|v| v + t_view).collect();
        let grid = GridSpec {
            origin: [0.0, 0.0],
            width: (max_x - min_x + 2.0 * pad).ceil() as u32 + 1,
            height: (max_y - min_y + 2.0 * pad).ceil() as u32 + 1,
        };
        let posed_set = PointSet3::new(posed)?;
        let input = render_textured(&posed_set, model.triangles(), &grid, &texture)?;
        let clean = PointSet3::new(
            model
                .landmark_indices()
                .iter()
                .map(|&i| posed_set[i as usize])
                .collect(),
        )?;
        // The pose inverts the view: model = (1/s) R^T (px - t).
        let inv_scale = 1.0 / view_scale;
        let pose_quat = [view_rot[0], -view_rot[1], -view_rot[2], -view_rot[3]];
        let pose_t = -inv_scale * (rot.transpose() * t_view);
        let pose = SimilarityTransform::new(inv_scale, pose_quat, pose_t)?;
        (input, clean, pose, view_scale)
    };

    // Landmark noise.
    let j = clean_landmarks.len();
    let mut observed: Vec<Vector3<f64>> = clean_landmarks.iter().copied().collect();
    if p.noise_sigma > 0.0 {
        for pt in observed.iter_mut() {
            *pt += p.noise_sigma * gaussian3(&mut rng);
        }
    }

    // Gross outliers: floor(frac * J) distinct landmarks displaced by 50x
    // the clean cloud radius.
    let n_out = (p.outlier_frac * j as f64).floor() as usize;
    let mut outlier_indices = choose_distinct(&mut rng, j, n_out);
    let radius = clean_landmarks.rms_radius();
    for &idx in &outlier_indices {
        let mut dir = gaussian3(&mut rng);
        while dir.norm() < 1e-9 {
            dir = gaussian3(&mut rng);
        }
        observed[idx] += 50.0 * radius * dir.normalize();
    }
    outlier_indices.sort_unstable();

    Ok(SynthScene {
        model,
        input,
        landmarks: PointSet3::new(observed)?,
        clean_landmarks,
        true_pose,
        true_embedding,
        frontal_truth,
        truth_landmarks,
        outlier_indices,
        view_scale,
    })
}

fn validate(p: &SynthParams) -> Result<()> {
    let bad = |reason: &'static str| Error::Core(frontal_core::Error::InvalidParameter(reason));
    if !(64..=20000).contains(&p.n_vertices) {
        return Err(bad("n_vertices must be in [64, 20000]"));
    }
    if !(4..=64).contains(&p.m_shapes) {
        return Err(bad("m_shapes must be in [4, 64]"));
    }
    if !(1..=16).contains(&p.k_target) {
        return Err(bad("k_target must be in [1, 16]"));
    }
    if !(p.yaw_deg.is_finite() && p.yaw_deg.abs() <= 75.0) {
        return Err(bad("yaw_deg must be within [-75, 75]"));
    }
    if !(p.noise_sigma.is_finite() && (0.0..=10.0).contains(&p.noise_sigma)) {
        return Err(bad("noise_sigma must be in [0, 10]"));
    }
    if !(p.outlier_frac.is_finite() && (0.0..=0.5).contains(&p.outlier_frac)) {
        return Err(bad("outlier_frac must be in [0, 0.5]"));
    }
    Ok(())
}

/// Base face-like surface: a dome with a nose bump, width 128 x height 160
/// model units (pixels), bulging toward negative depth.
fn base_mesh(nu: usize, nv: usize) -> (Vec<f64>, Vec<(f64, f64)>) {
    let mut coords = Vec::with_capacity(3 * nu * nv);
    let mut uv = Vec::with_capacity(nu * nv);
    for r in 0..nv {
        for c in 0..nu {
            let uh = -1.0 + 2.0 * c as f64 / (nu - 1) as f64;
            let vh = -1.0 + 2.0 * r as f64 / (nv - 1) as f64;
            let x = 64.0 * uh;
            let y = 80.0 * vh;
            let dome = (1.0 - 0.85 * (uh * uh + vh * vh)).max(0.0);
            let nose = (-((uh / 0.18).powi(2) + ((vh - 0.05) / 0.22).powi(2))).exp();
            let z = -(26.0 * dome + 13.0 * nose);
            coords.extend_from_slice(&[x, y, z]);
            uv.push((uh, vh));
        }
    }
    (coords, uv)
}

fn grid_triangles(nu: usize, nv: usize) -> Vec<[u32; 3]> {
    let mut tris = Vec::with_capacity(2 * (nu - 1) * (nv - 1));
    for r in 0..nv - 1 {
        for c in 0..nu - 1 {
            let i = (r * nu + c) as u32;
            tris.push([i, i + 1, i + nu as u32]);
            tris.push([i + 1, i + 1 + nu as u32, i + nu as u32]);
        }
    }
    tris
}

/// The 68-point landmark layout in normalized face coordinates
/// (u right, v down), following the standard annotation order: jaw 0-16,
/// brows 17-26, nose 27-35, eyes 36-47, outer lip 48-59, inner lip 60-67.
fn landmark_layout() -> [(f64, f64); 68] {
    let mut pts = [(0.0f64, 0.0f64); 68];
    use std::f64::consts::PI;
    for (i, p) in pts.iter_mut().enumerate().take(17) {
        let t = i as f64 / 16.0;
        *p = (-0.85 * (PI * t).cos(), 0.05 + 0.8 * (PI * t).sin());
    }
    for i in 0..5 {
        let t = i as f64 / 4.0;
        pts[17 + i] = (-0.62 + 0.44 * t, -0.52 - 0.06 * (PI * t).sin());
        pts[22 + i] = (0.18 + 0.44 * t, -0.58 + 0.06 * (PI * t).sin());
    }
    for i in 0..4 {
        pts[27 + i] = (0.0, -0.42 + 0.13 * i as f64);
    }
    for i in 0..5 {
        pts[31 + i] = (-0.16 + 0.08 * i as f64, 0.1);
    }
    for i in 0..6 {
        let a = PI * i as f64 / 3.0;
        pts[36 + i] = (-0.38 + 0.12 * a.cos(), -0.38 + 0.06 * a.sin());
        pts[42 + i] = (0.38 + 0.12 * a.cos(), -0.38 + 0.06 * a.sin());
    }
    for i in 0..12 {
        let a = PI * i as f64 / 6.0;
        pts[48 + i] = (0.28 * a.cos(), 0.45 + 0.12 * a.sin());
    }
    for i in 0..8 {
        let a = PI * i as f64 / 4.0;
        pts[60 + i] = (0.16 * a.cos(), 0.45 + 0.05 * a.sin());
    }
    pts
}

fn landmark_vertex_indices(nu: usize, nv: usize) -> Vec<u32> {
    let n = nu * nv;
    let mut used = vec![false; n];
    let mut out = Vec::with_capacity(68);
    for (uh, vh) in landmark_layout() {
        let col = (((uh + 1.0) / 2.0) * (nu - 1) as f64).round() as usize;
        let row = (((vh + 1.0) / 2.0) * (nv - 1) as f64).round() as usize;
        let mut idx = row.min(nv - 1) * nu + col.min(nu - 1);
        while used[idx] {
            idx = (idx + 1) % n;
        }
        used[idx] = true;
        out.push(idx as u32);
    }
    out
}

/// A smooth 3D displacement field over the parameterization: per coordinate,
/// two random sinusoids, windowed to vanish at the boundary and normalized
/// to unit RMS.
fn deformation_field(rng: &mut ChaCha8Rng, uv: &[(f64, f64)]) -> Vec<f64> {
    let mut waves = [[0.0f64; 3]; 6];
    let mut coord_w = [0.0f64; 6];
    for (i, w) in waves.iter_mut().enumerate() {
        *w = [
            0.5 + 2.0 * rng.gen::<f64>(),
            0.5 + 2.0 * rng.gen::<f64>(),
            std::f64::consts::TAU * rng.gen::<f64>(),
        ];
        coord_w[i] = uniform_unit_var(rng);
    }
    let mut field = Vec::with_capacity(3 * uv.len());
    let mut ssq = 0.0;
    for &(uh, vh) in uv {
        let window = (1.0 - 0.9 * (uh * uh + vh * vh)).max(0.0);
        for c in 0..3 {
            let w1 = waves[2 * c];
            let w2 = waves[2 * c + 1];
            let v = coord_w[2 * c] * (w1[0] * uh + w1[1] * vh + w1[2]).sin()
                + coord_w[2 * c + 1] * (w2[0] * uh + w2[1] * vh + w2[2]).cos();
            let v = window * v;
            ssq += v * v;
            field.push(v);
        }
    }
    let rms = (ssq / field.len() as f64).sqrt().max(1e-9);
    for v in field.iter_mut() {
        *v /= rms;
    }
    field
}

/// Subtracts the best-fit infinitesimal similarity motion (translation,
/// rotation, scale) of the field's landmark restriction, extended over the
/// whole mesh, then renormalizes to unit RMS. After this, deformations are
/// first-order orthogonal to pose changes at the landmark subset.
fn remove_landmark_rigid_component(field: &mut [f64], base: &[f64], landmark_indices: &[u32]) {
    let vertex = |i: usize| Vector3::new(base[3 * i], base[3 * i + 1], base[3 * i + 2]);
    let disp = |f: &[f64], i: usize| Vector3::new(f[3 * i], f[3 * i + 1], f[3 * i + 2]);
    let centroid: Vector3<f64> = landmark_indices
        .iter()
        .map(|&i| vertex(i as usize))
        .sum::<Vector3<f64>>()
        / landmark_indices.len() as f64;

    // Tangent basis of similarity motions at a point: three translations,
    // three rotations about the landmark centroid, and scaling.
    let tangent = |v: &Vector3<f64>| -> [Vector3<f64>; 7] {
        let d = v - centroid;
        [
            Vector3::x(),
            Vector3::y(),
            Vector3::z(),
            Vector3::x().cross(&d),
            Vector3::y().cross(&d),
            Vector3::z().cross(&d),
            d,
        ]
    };

    let mut gram = nalgebra::SMatrix::<f64, 7, 7>::zeros();
    let mut rhs = nalgebra::SVector::<f64, 7>::zeros();
    for &li in landmark_indices {
        let v = vertex(li as usize);
        let t = tangent(&v);
        let f = disp(field, li as usize);
        for a in 0..7 {
            rhs[a] += t[a].dot(&f);
            for b in 0..7 {
                gram[(a, b)] += t[a].dot(&t[b]);
            }
        }
    }
    let coef = match nalgebra::linalg::Cholesky::new(
        gram + nalgebra::SMatrix::<f64, 7, 7>::identity() * 1e-9,
    ) {
        Some(ch) => ch.solve(&rhs),
        None => return,
    };

    let n = field.len() / 3;
    let mut ssq = 0.0;
    for i in 0..n {
        let t = tangent(&vertex(i));
        let mut correction = Vector3::zeros();
        for a in 0..7 {
            correction += coef[a] * t[a];
        }
        for c in 0..3 {
            field[3 * i + c] -= correction[c];
            ssq += field[3 * i + c] * field[3 * i + c];
        }
    }
    let rms = (ssq / field.len() as f64).sqrt().max(1e-9);
    for v in field.iter_mut() {
        *v /= rms;
    }
}

fn vertex_texture(rng: &mut ChaCha8Rng, uv: &[(f64, f64)]) -> Vec<f64> {
    let phases: Vec<f64> = (0..5).map(|_| std::f64::consts::TAU * rng.gen::<f64>()).collect();
    uv.iter()
        .map(|&(uh, vh)| {
            let v = 128.0
                + 46.0 * (2.6 * uh + phases[0]).sin()
                + 34.0 * (3.4 * vh + phases[1]).cos()
                + 22.0 * (2.1 * (uh + vh) + phases[2]).sin()
                + 14.0 * (5.4 * uh + phases[3]).cos() * (4.6 * vh + phases[4]).sin();
            v.clamp(8.0, 247.0)
        })
        .collect()
}

/// Rasterizes the mesh with interpolated per-vertex intensity onto a white
/// canvas; all pixels are valid.
fn render_textured(
    verts: &PointSet3,
    triangles: &[[u32; 3]],
    grid: &GridSpec,
    texture: &[f64],
) -> Result<Image> {
    let raster = rasterize_mesh(verts, triangles, grid)?;
    let attrs = interpolate_attribute(&raster, triangles, texture);
    let mut pixels = vec![255u8; grid.width as usize * grid.height as usize];
    for (px, attr) in pixels.iter_mut().zip(attrs.iter()) {
        if let Some(v) = attr {
            *px = v.clamp(0.0, 255.0).round() as u8;
        }
    }
    Ok(Image::new(grid.width, grid.height, 1, pixels)?)
}

/// Unit-variance uniform sample on `[-sqrt(3), sqrt(3)]`.
fn uniform_unit_var(rng: &mut ChaCha8Rng) -> f64 {
    (rng.gen::<f64>() * 2.0 - 1.0) * 3.0f64.sqrt()
}

/// Standard 3D Gaussian via Box-Muller.
fn gaussian3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let mut pairs = [0.0f64; 4];
    for v in pairs.iter_mut() {
        *v = rng.gen::<f64>();
    }
    let r1 = (-2.0 * (1.0 - pairs[0]).ln()).sqrt();
    let r2 = (-2.0 * (1.0 - pairs[2]).ln()).sqrt();
    let a1 = std::f64::consts::TAU * pairs[1];
    let a2 = std::f64::consts::TAU * pairs[3];
    Vector3::new(r1 * a1.cos(), r1 * a1.sin(), r2 * a2.cos())
}

/// `count` distinct values from `0..n`, by partial Fisher-Yates.
fn choose_distinct(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count.min(n) {
        let pick = i + (rng.gen::<u64>() as usize) % (n - i);
        pool.swap(i, pick);
    }
    pool.truncate(count.min(n));
    pool
}
