use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use frontal::report::{sig6, AlignJson, FitJson, PoseJson, SceneJson, TransformJson};
use frontal::synth::{synth_scene, SynthParams};
use frontal::{landmarks, model_file, pnm};
use frontal_core::align::{align, AlignConfig};
use frontal_core::fit::{fit, FitConfig};
use frontal_core::geometry::{yaw_degrees, PointSet3};
use frontal_core::pipeline::{run_pipeline, PipelineConfig};
use frontal_core::shape::{build_model, ShapeVector};
use frontal_core::warp::Sampling;
use frontal_core::zncc::{mouth_region, scale_landmarks, zncc_search};

/// Robust 3D landmark alignment, deformable shape fitting, and face
/// frontalization.
#[derive(Parser)]
#[command(name = "frontal", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SolverArgs {
    /// Convergence threshold on the EM parameter change.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Maximum EM iterations.
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Initial gamma shape of the precision prior.
    #[arg(long, default_value_t = 1.0)]
    mu_init: f64,
}

impl SolverArgs {
    fn config(&self) -> AlignConfig {
        AlignConfig {
            eps: self.eps,
            max_iter: self.max_iter,
            mu_init: self.mu_init,
            ..AlignConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Robustly estimate the similarity transform mapping source landmarks
    /// onto target landmarks.
    Align {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
        /// Output transform JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a statistical shape model from registered training shapes.
    BuildModel {
        /// Directory holding shape_*.lm vertex files plus triangles.txt and
        /// landmarks.txt (see README for the layout).
        #[arg(long)]
        shapes: PathBuf,
        /// Fraction of total variance the retained modes must cover.
        #[arg(long, default_value_t = 0.95)]
        variance: f64,
        /// Minimum number of retained modes.
        #[arg(long, default_value_t = 1)]
        min_k: usize,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the deformable model to a landmark set.
    Fit {
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Ellipsoid penalty weight on the embedding.
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[command(flatten)]
        solver: SolverArgs,
        /// Output fit JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Frontalize a posed face image from its 3D landmarks.
    Frontalize {
        /// Input image (binary PGM or PPM).
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output frontal image; a mask sidecar, a pose JSON, and a
        /// frontalized-landmark file are written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Mirror-fill occluded pixels across the face midline.
        #[arg(long)]
        soft_symmetry: bool,
        /// Sample the input bilinearly instead of nearest-pixel.
        #[arg(long)]
        bilinear: bool,
        /// Ellipsoid penalty weight for the model fit.
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Score a frontalized image against a ground-truth frontal image with
    /// mouth-region ZNCC.
    Zncc {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred_landmarks: PathBuf,
        #[arg(long)]
        truth_landmarks: PathBuf,
        /// Shift search radius in pixels.
        #[arg(long, default_value_t = 10)]
        max_shift: i32,
        /// Mouth bounding-box margin in pixels.
        #[arg(long, default_value_t = 5)]
        margin: i64,
    },
    /// Generate a deterministic synthetic scene (model, posed render,
    /// landmarks, ground truth).
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 30.0)]
        yaw: f64,
        /// Landmark noise sigma in pixels.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Fraction of landmarks turned into gross outliers.
        #[arg(long, default_value_t = 0.0)]
        outliers: f64,
        /// Approximate vertex count of the generated mesh.
        #[arg(long, default_value_t = 2000)]
        n_vertices: u32,
        /// Training shapes behind the generated model.
        #[arg(long, default_value_t = 20)]
        m_shapes: u32,
        /// Independent deformation fields in the mesh family.
        #[arg(long, default_value_t = 8)]
        k_target: u32,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Align { source, target, solver, out } => {
            let (x, _) = landmarks::load_landmarks(&source)?;
            let (z, _) = landmarks::load_landmarks(&target)?;
            let res = align(&x, &z, &solver.config())?;
            let record = AlignJson::from_result(&res);
            write_json(&out, &record)?;
            print_transform(&record.transform);
            println!("mu {}", sig6(res.student.mu));
            println!("iterations {}", res.iterations);
            Ok(())
        }
        Command::BuildModel { shapes, variance, min_k, out } => {
            let (training, triangles, lm_indices) = load_training_dir(&shapes)?;
            let model = build_model(&training, variance, min_k, triangles, lm_indices)?;
            model_file::save_model(&out, &model)?;
            println!("vertices {}", model.num_vertices());
            println!("modes {}", model.num_modes());
            println!(
                "variance_captured {}",
                sig6(model.eigenvalues().iter().sum::<f64>())
            );
            Ok(())
        }
        Command::Fit { landmarks: lm_path, model, eta, solver, out } => {
            let (y, _) = landmarks::load_landmarks(&lm_path)?;
            let model = model_file::load_model(&model)?;
            let cfg = FitConfig { eta, align: solver.config() };
            let res = fit(&y, &model, &cfg)?;
            let record = FitJson::from_result(&res);
            write_json(&out, &record)?;
            print_transform(&record.transform);
            println!("embedding_norm {}", sig6(res.embedding.s.iter().map(|v| v * v).sum::<f64>().sqrt()));
            println!("ellipsoid {}", sig6(res.ellipsoid));
            println!("iterations {}", res.iterations);
            if res.ellipsoid > 1.0 {
                eprintln!("warning: embedding lies outside the 99% confidence ellipsoid");
            }
            Ok(())
        }
        Command::Frontalize {
            image,
            landmarks: lm_path,
            model,
            out,
            soft_symmetry,
            bilinear,
            eta,
            solver,
        } => {
            let input = pnm::load_image(&image)?;
            let (x, _) = landmarks::load_landmarks(&lm_path)?;
            let model = model_file::load_model(&model)?;
            let cfg = PipelineConfig {
                align: solver.config(),
                eta,
                sampling: if bilinear { Sampling::Bilinear } else { Sampling::Nearest },
                soft_symmetry,
                supersample: 1,
            };
            let res = run_pipeline(&input, &x, &model, &cfg)?;
            pnm::save_image(&out, &res.frontal)?;

            let pose = PoseJson::new(&res.pose, &res.head_pose, res.align.iterations, res.fit.iterations);
            write_json(&sibling(&out, "pose.json"), &pose)?;

            // Frontalized landmarks in output-image pixel coordinates.
            let y = frontal_core::pipeline::frontalize_landmarks(&x, &res.pose);
            let canvas = frontal_core::pipeline::canvas_for_model(&model);
            let shifted = PointSet3::new(
                y.iter()
                    .map(|p| nalgebra::Vector3::new(p.x - canvas.origin[0], p.y - canvas.origin[1], p.z))
                    .collect(),
            )?;
            landmarks::save_landmarks(&sibling(&out, "landmarks.lm"), &shifted, None)?;

            println!("yaw_deg {}", sig6(yaw_degrees(&res.head_pose)));
            println!("scale {}", sig6(res.pose.scale()));
            println!("align_iterations {}", res.align.iterations);
            println!("fit_iterations {}", res.fit.iterations);
            if res.fit.ellipsoid > 1.0 {
                eprintln!("warning: embedding lies outside the 99% confidence ellipsoid");
            }
            Ok(())
        }
        Command::Zncc { pred, truth, pred_landmarks, truth_landmarks, max_shift, margin } => {
            let pred_img = pnm::load_image(&pred)?;
            let truth_img = pnm::load_image(&truth)?;
            let (lm_f, _) = landmarks::load_landmarks(&pred_landmarks)?;
            let (lm_t, _) = landmarks::load_landmarks(&truth_landmarks)?;

            let factor = frontal_core::zncc::landmark_scale_factor(&lm_f, &lm_t)?;
            let scaled = frontal_core::zncc::resample_nearest(&pred_img, factor);
            let lm_scaled = scale_landmarks(&lm_f, factor);
            let region = mouth_region(&lm_scaled, margin)?
                .clamped(scaled.width(), scaled.height())?;
            let res = zncc_search(&scaled, &truth_img, &region, max_shift)?;
            println!("zncc {}", sig6(res.coefficient));
            println!("shift {} {}", res.shift.0, res.shift.1);
            println!("scale_factor {}", sig6(factor));
            Ok(())
        }
        Command::Synth { seed, yaw, noise, outliers, n_vertices, m_shapes, k_target, out } => {
            let params = SynthParams {
                seed,
                n_vertices,
                m_shapes,
                k_target,
                yaw_deg: yaw,
                noise_sigma: noise,
                outlier_frac: outliers,
            };
            let scene = synth_scene(&params)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            model_file::save_model(&out.join("model.bin"), &scene.model)?;
            pnm::save_image(&out.join("input.pgm"), &scene.input)?;
            pnm::save_image(&out.join("truth.pgm"), &scene.frontal_truth)?;
            landmarks::save_landmarks(&out.join("landmarks.lm"), &scene.landmarks, None)?;
            landmarks::save_landmarks(
                &out.join("truth_landmarks.lm"),
                &scene.truth_landmarks,
                None,
            )?;
            let canvas = frontal_core::pipeline::canvas_for_model(&scene.model);
            let record = SceneJson {
                seed,
                yaw_deg: yaw,
                noise_sigma: noise,
                outlier_frac: outliers,
                pose: TransformJson::from_transform(&scene.true_pose),
                embedding: scene.true_embedding.s.clone(),
                outlier_indices: scene.outlier_indices.clone(),
                n_vertices: scene.model.num_vertices(),
                k_modes: scene.model.num_modes(),
                canvas_origin: canvas.origin,
                canvas_size: [canvas.width, canvas.height],
            };
            write_json(&out.join("scene.json"), &record)?;
            println!("vertices {}", scene.model.num_vertices());
            println!("modes {}", scene.model.num_modes());
            println!("outliers {}", scene.outlier_indices.len());
            Ok(())
        }
    }
}

fn print_transform(t: &TransformJson) {
    println!("scale {}", sig6(t.scale));
    println!(
        "quaternion {} {} {} {}",
        sig6(t.quaternion.w),
        sig6(t.quaternion.x),
        sig6(t.quaternion.y),
        sig6(t.quaternion.z)
    );
    println!(
        "translation {} {} {}",
        sig6(t.translation[0]),
        sig6(t.translation[1]),
        sig6(t.translation[2])
    );
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `front.pgm` -> `front.<suffix>` next to the output image.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}.{suffix}"))
}

/// Training directory layout: `shape_*.lm` vertex files (sorted
/// lexicographically), `triangles.txt` (one `i j k` triple per line), and
/// `landmarks.txt` (one vertex index per line). Optional `expr_*.lm` files
/// are not consumed here; expression blocks come from dedicated tooling.
fn load_training_dir(dir: &Path) -> anyhow::Result<(Vec<ShapeVector>, Vec<[u32; 3]>, Vec<u32>)> {
    let mut shape_paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("shape_") && n.ends_with(".lm"))
                .unwrap_or(false)
        })
        .collect();
    shape_paths.sort();
    if shape_paths.len() < 2 {
        bail!("need at least 2 shape_*.lm files in {}", dir.display());
    }
    let mut training = Vec::with_capacity(shape_paths.len());
    for p in &shape_paths {
        let (pts, _) = landmarks::load_landmarks(p)?;
        let coords: Vec<f64> = pts.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        training.push(ShapeVector::new(coords)?);
    }

    let tri_path = dir.join("triangles.txt");
    let tri_text = std::fs::read_to_string(&tri_path)
        .with_context(|| format!("reading {}", tri_path.display()))?;
    let mut triangles = Vec::new();
    for (ln, line) in tri_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let idx: Vec<u32> = line
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<Result<_, _>>()
            .with_context(|| format!("{}:{}", tri_path.display(), ln + 1))?;
        if idx.len() != 3 {
            bail!("{}:{}: expected 3 indices", tri_path.display(), ln + 1);
        }
        triangles.push([idx[0], idx[1], idx[2]]);
    }

    let lm_path = dir.join("landmarks.txt");
    let lm_text = std::fs::read_to_string(&lm_path)
        .with_context(|| format!("reading {}", lm_path.display()))?;
    let lm_indices: Vec<u32> = lm_text
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing {}", lm_path.display()))?;

    Ok((training, triangles, lm_indices))
}
