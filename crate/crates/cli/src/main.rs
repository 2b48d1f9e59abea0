//! `geofit3d` command-line front end.

mod output;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use nalgebra::{DVector, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use geofit3d::camera::{Camera, CameraKind};
use geofit3d::contour::{fit_contours, load_edges, load_gray, render_contour, save_edges, ContourConfig, PairFilter};
use geofit3d::experiments::{self, FitDistance, INTEROCULAR_PX};
use geofit3d::flexibility::{
    flexibility_modes, plausibility_filter, projection_matrix, truncate_modes, write_spectrum_csv, LandmarkTolerance,
};
use geofit3d::par::Exec;
use geofit3d::report::{read_alpha_csv, FitReport};
use geofit3d::sampling::observe;
use geofit3d::shapemodel::{load_model, write_model, write_obj, SyntheticModelSpec};
use geofit3d::{fit_landmarks, FitConfig, Landmarks2D, ShapeModel};

use output::Outputs;

/// Exit status for numeric failures; invalid input exits with 2.
const EXIT_NUMERIC: u8 = 3;
const EXIT_INVALID: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "geofit3d", version, about = "Fit 3D morphable shape models to 2D landmarks and contours")]
#[command(after_help = "Environment: GEOFIT_THREADS caps the worker pool; RUST_LOG sets the log level.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to a landmark CSV (`vertex_index,x,y`) and write a JSON report.
    FitLandmarks(FitLandmarksArgs),
    /// Landmark fit refined with occluding contours matched to an edge map.
    FitContours(FitContoursArgs),
    /// Flexibility modes of a fitted face as CSV (`mode,eigenvalue,landmark_change_px,retained,plausible`).
    FlexModes(FlexModesArgs),
    /// Fixed-distance ambiguity table (`gen_distance_m,fit_distance_m,d_l_pct,d_s_mm`).
    AmbiguitySweep(AmbiguityArgs),
    /// Perspective versus orthographic landmark difference over distance (`face,distance_m,d_l_pct`).
    PerspectiveSweep(PerspectiveSweepArgs),
    /// Free-distance estimates started from the true rotation and focal length.
    DistanceBias(DistanceBiasArgs),
    /// Write a synthetic shape model (SMM1 binary).
    Synth(SynthArgs),
    /// Project model landmarks of a face to a landmark CSV, optionally rendering its contour edges.
    Project(ProjectArgs),
    /// Separable solver against alternating least squares (`seed,snls_objective,als_objective,snls_d_s_mm,als_d_s_mm`).
    CompareAls(CompareAlsArgs),
    /// Compare analytic Jacobians with finite differences; fails if any error reaches the tolerance.
    CheckJacobians(CheckJacobiansArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CameraArg {
    Ortho,
    Persp,
}

impl From<CameraArg> for CameraKind {
    fn from(c: CameraArg) -> Self {
        match c {
            CameraArg::Ortho => CameraKind::Ortho,
            CameraArg::Persp => CameraKind::Persp,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct FitOptions {
    /// Tikhonov weight on the sigma-normalised coefficients.
    #[arg(long, default_value_t = 1e-3)]
    reg: f64,
    /// Box bound |alpha_i| <= K sigma_i; `none` disables it.
    #[arg(long, default_value = "2", value_parser = parse_bound)]
    bound_sigmas: Bound,
    /// Principal point `cx,cy` in pixels (perspective).
    #[arg(long, default_value = "0,0", value_parser = parse_point)]
    principal_point: Vector2<f64>,
    /// Distance (metres) assumed by the perspective initialisation.
    #[arg(long, default_value_t = 1.0)]
    initial_distance: f64,
}

#[derive(Debug, Clone, Copy)]
struct Bound(Option<f64>);

impl FitOptions {
    fn config(&self) -> FitConfig {
        FitConfig {
            tikhonov_weight: self.reg,
            coeff_bound_sigmas: self.bound_sigmas.0,
            initial_distance: self.initial_distance,
            principal_point: self.principal_point,
            ..FitConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct FitLandmarksArgs {
    /// Shape model (SMM1).
    #[arg(long)]
    model: PathBuf,
    /// Landmark CSV with header `vertex_index,x,y`.
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long, value_enum)]
    camera: CameraArg,
    /// Fix the subject distance t_z (metres); perspective only.
    #[arg(long)]
    fix_tz: Option<f64>,
    #[command(flatten)]
    fit: FitOptions,
    /// JSON report (schema geofit3d/1).
    #[arg(long)]
    out: PathBuf,
    /// Fitted mesh as OBJ.
    #[arg(long)]
    mesh: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitContoursArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    landmarks: PathBuf,
    /// Edge map: binary PBM/PGM mask (nonzero = edge) or `x,y` CSV.
    #[arg(long)]
    edges: PathBuf,
    /// Image whose size bounds a CSV edge list.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, value_enum)]
    camera: CameraArg,
    #[arg(long)]
    fix_tz: Option<f64>,
    #[command(flatten)]
    fit: FitOptions,
    /// Maximum pairing rounds; 0 keeps the landmark fit.
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    /// Keep contour pairs at or below this distance percentile.
    #[arg(long, default_value_t = 90.0)]
    percentile: f64,
    /// Drop contour pairs farther apart than this many pixels.
    #[arg(long)]
    max_pair_distance: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Fitted mesh as OBJ; boundary vertex indices go to `<mesh>.boundary.txt`.
    #[arg(long)]
    mesh: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FlexModesArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON report from fit-landmarks or fit-contours.
    #[arg(long)]
    fit: PathBuf,
    /// Mean surface change (metres) a unit mode weight produces.
    #[arg(long, default_value_t = 0.002)]
    k1: f64,
    /// Landmark-change threshold for retaining a mode.
    #[arg(long, default_value_t = 2.0)]
    k2: f64,
    /// Unit of --k2.
    #[arg(long, value_enum, default_value = "px")]
    k2_unit: ToleranceUnit,
    /// Plausibility shell half-width in standard deviations of the coefficient norm.
    #[arg(long, default_value_t = 3.0)]
    plausible_sigmas: f64,
    #[arg(long)]
    out: PathBuf,
    /// Write mode_<i>_{m1,0,p1}.obj for every retained plausible mode.
    #[arg(long)]
    mesh_dir: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ToleranceUnit {
    Px,
    Pct,
}

#[derive(Args, Debug, Clone)]
struct ExperimentOptions {
    /// Number of synthetic faces.
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// Base seed; face i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian landmark noise (pixels).
    #[arg(long, default_value_t = 0.0)]
    noise_px: f64,
}

#[derive(Args, Debug)]
struct AmbiguityArgs {
    #[arg(long)]
    model: PathBuf,
    /// Generating distances (metres).
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.6,1.2,2.4")]
    gen_dist: Vec<f64>,
    /// Fitting distances (metres, or `ortho`).
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.6,1.2,2.4,ortho")]
    fit_dist: Vec<FitDistance>,
    #[command(flatten)]
    exp: ExperimentOptions,
    #[command(flatten)]
    fit: FitOptions,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PerspectiveSweepArgs {
    #[arg(long)]
    model: PathBuf,
    /// Distances (metres).
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.75,1,1.5,2,2.5,5,10")]
    distances: Vec<f64>,
    #[command(flatten)]
    exp: ExperimentOptions,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DistanceBiasArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.6,1.2,2.4")]
    distances: Vec<f64>,
    #[command(flatten)]
    exp: ExperimentOptions,
    #[command(flatten)]
    fit: FitOptions,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    n_vertices: usize,
    #[arg(long, default_value_t = 40)]
    n_modes: usize,
    /// Face diameter (metres).
    #[arg(long, default_value_t = 0.2)]
    scale: f64,
    /// Number of designated landmarks.
    #[arg(long, default_value_t = 70)]
    n_landmarks: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Coefficient CSV (header `alpha`); the mean face when omitted.
    #[arg(long)]
    alpha: Option<PathBuf>,
    #[arg(long, value_enum)]
    camera: CameraArg,
    /// Subject distance t_z (metres), perspective only.
    #[arg(long, default_value_t = 0.5)]
    distance: f64,
    /// Axis-angle rotation `rx,ry,rz` (radians).
    #[arg(long, default_value = "0,0,0", value_parser = parse_vec3)]
    rotation: Vector3<f64>,
    /// Projected interocular distance of the frontal face (pixels).
    #[arg(long, default_value_t = INTEROCULAR_PX)]
    interocular_px: f64,
    /// Image position `cx,cy` of the optical axis (principal point or orthographic offset).
    #[arg(long, default_value = "0,0", value_parser = parse_point)]
    center: Vector2<f64>,
    #[arg(long, default_value_t = 0.0)]
    noise_px: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Landmark CSV with header `vertex_index,x,y`.
    #[arg(long)]
    out: PathBuf,
    /// Render the occluding contour to this edge file (.pbm, .pgm or .csv).
    #[arg(long)]
    edges_out: Option<PathBuf>,
    /// Edge image size `WxH`.
    #[arg(long, default_value = "512x512", value_parser = parse_size)]
    image_size: (u32, u32),
}

#[derive(Args, Debug)]
struct CompareAlsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 50)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    noise_px: f64,
    #[arg(long, default_value_t = 0.0)]
    reg: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CheckJacobiansArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn parse_floats<const N: usize>(s: &str) -> std::result::Result<[f64; N], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated numbers, got {s:?}"));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        let v: f64 = p.parse().map_err(|_| format!("not a number: {p:?}"))?;
        if !v.is_finite() {
            return Err(format!("not finite: {p:?}"));
        }
        *o = v;
    }
    Ok(out)
}

fn parse_point(s: &str) -> std::result::Result<Vector2<f64>, String> {
    parse_floats::<2>(s).map(|[x, y]| Vector2::new(x, y))
}

fn parse_vec3(s: &str) -> std::result::Result<Vector3<f64>, String> {
    parse_floats::<3>(s).map(|[x, y, z]| Vector3::new(x, y, z))
}

fn parse_bound(s: &str) -> std::result::Result<Bound, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Bound(None));
    }
    match s.parse::<f64>() {
        Ok(k) if k > 0.0 && k.is_finite() => Ok(Bound(Some(k))),
        _ => Err(format!("expected a positive number or `none`, got {s:?}")),
    }
}

fn parse_size(s: &str) -> std::result::Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: u32 = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: u32 = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err("image size must be non-zero".into());
    }
    Ok((w, h))
}

/// Error carrying an explicit exit status.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Exit(code, _)) = err.downcast_ref::<Exit>() {
        return *code;
    }
    match err.chain().find_map(|e| e.downcast_ref::<geofit3d::Error>()) {
        Some(e) if !e.is_invalid_input() => EXIT_NUMERIC,
        _ => EXIT_INVALID,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("GEOFIT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Exit(EXIT_INVALID, format!("GEOFIT_THREADS must be a positive integer, got {value:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::FitLandmarks(a) => cmd_fit_landmarks(a),
        Command::FitContours(a) => cmd_fit_contours(a),
        Command::FlexModes(a) => cmd_flex_modes(a),
        Command::AmbiguitySweep(a) => cmd_ambiguity(a),
        Command::PerspectiveSweep(a) => cmd_perspective_sweep(a),
        Command::DistanceBias(a) => cmd_distance_bias(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Project(a) => cmd_project(a),
        Command::CompareAls(a) => cmd_compare_als(a),
        Command::CheckJacobians(a) => cmd_check_jacobians(a),
    }
}

fn model_from(path: &Path) -> Result<ShapeModel> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn landmarks_from(path: &Path) -> Result<Landmarks2D> {
    Landmarks2D::load(path).with_context(|| format!("loading landmarks {}", path.display()))
}

fn stage_mesh(outputs: &mut Outputs, path: &Path, model: &ShapeModel, alpha: &DVector<f64>) -> Result<()> {
    let shape = model.synthesize(alpha)?;
    outputs.write(path, |w| Ok(write_obj(&shape, model.topology(), w)?))
}

fn stage_report(outputs: &mut Outputs, path: &Path, report: &FitReport) -> Result<()> {
    outputs.write(path, |w| {
        report.to_writer(&mut *w)?;
        writeln!(w)?;
        Ok(())
    })
}

fn print_fit(report: &FitReport) {
    match report.landmark_error_pct {
        Some(d) => println!("objective {:.6e}, landmark error {d:.6} % interocular", report.objective),
        None => println!("objective {:.6e}", report.objective),
    }
}

fn cmd_fit_landmarks(a: FitLandmarksArgs) -> Result<()> {
    let model = model_from(&a.model)?;
    let landmarks = landmarks_from(&a.landmarks)?;
    let fit = fit_landmarks(&model, &landmarks, &a.fit.config(), a.camera.into(), a.fix_tz)?;
    let report = FitReport::new(&model, &landmarks, &fit);
    let mut outputs = Outputs::default();
    stage_report(&mut outputs, &a.out, &report)?;
    if let Some(mesh) = &a.mesh {
        stage_mesh(&mut outputs, mesh, &model, &fit.alpha)?;
    }
    outputs.commit()?;
    print_fit(&report);
    Ok(())
}

fn cmd_fit_contours(a: FitContoursArgs) -> Result<()> {
    let model = model_from(&a.model)?;
    let landmarks = landmarks_from(&a.landmarks)?;
    let dims = match &a.image {
        Some(p) => {
            let img = load_gray(p).with_context(|| format!("loading image {}", p.display()))?;
            Some(img.dimensions())
        }
        None => None,
    };
    let edges = load_edges(&a.edges, dims).with_context(|| format!("loading edges {}", a.edges.display()))?;
    let contour = ContourConfig {
        max_rounds: a.rounds,
        filter: PairFilter {
            percentile: Some(a.percentile),
            max_distance: a.max_pair_distance,
        },
        ..ContourConfig::default()
    };
    if !(0.0..=100.0).contains(&a.percentile) {
        bail!(Exit(EXIT_INVALID, format!("percentile must be in [0, 100], got {}", a.percentile)));
    }
    let result = fit_contours(&model, &landmarks, &edges, &a.fit.config(), a.camera.into(), a.fix_tz, &contour)?;
    let mut report = FitReport::new(&model, &landmarks, &result.fit);
    report.contour_rounds = Some(result.rounds.len());
    let mut outputs = Outputs::default();
    stage_report(&mut outputs, &a.out, &report)?;
    if let Some(mesh) = &a.mesh {
        stage_mesh(&mut outputs, mesh, &model, &result.fit.alpha)?;
        let mut sidecar = mesh.clone().into_os_string();
        sidecar.push(".boundary.txt");
        outputs.write(Path::new(&sidecar), |w| {
            for v in &result.boundary.vertices {
                writeln!(w, "{v}")?;
            }
            Ok(())
        })?;
    }
    outputs.commit()?;
    print_fit(&report);
    println!(
        "{} contour rounds, {} pairs in the final refit",
        result.rounds.len(),
        result.correspondences.len()
    );
    Ok(())
}

fn cmd_flex_modes(a: FlexModesArgs) -> Result<()> {
    let model = model_from(&a.model)?;
    let report = FitReport::load(&a.fit).with_context(|| format!("loading report {}", a.fit.display()))?;
    report.validate_for(&model)?;
    let alpha = report.alpha();
    let projected = geofit3d::fit::project_landmarks(&model, &alpha, &report.camera, &report.landmark_indices)?;
    let landmarks = Landmarks2D::from_pairs(&report.landmark_indices, &projected)?;
    let pi = projection_matrix(&model, &landmarks, &report.camera)?;
    let spectrum = flexibility_modes(&model, &pi, a.k1)?;
    let k2 = match a.k2_unit {
        ToleranceUnit::Px => LandmarkTolerance::Pixels(a.k2),
        ToleranceUnit::Pct => LandmarkTolerance::PercentInterocular(a.k2),
    };
    let checks = truncate_modes(&spectrum, &model, &alpha, &landmarks, &report.camera, a.k1, k2, Exec::Parallel)?;
    let retained: Vec<usize> = checks.iter().filter(|c| c.retained).map(|c| c.index).collect();
    let plausible = plausibility_filter(&spectrum, &retained, &alpha, model.sigma(), a.plausible_sigmas);
    let mut outputs = Outputs::default();
    outputs.write(&a.out, |w| Ok(write_spectrum_csv(&checks, &plausible, w)?))?;
    if let Some(dir) = &a.mesh_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for &i in &plausible {
            let mode = spectrum.mode(i);
            for (tag, w) in [("m1", -1.0), ("0", 0.0), ("p1", 1.0)] {
                let shape = model.synthesize(&(&alpha + &mode * w))?;
                outputs.write(&dir.join(format!("mode_{i}_{tag}.obj")), |out| {
                    Ok(write_obj(&shape, model.topology(), out)?)
                })?;
            }
        }
    }
    outputs.commit()?;
    println!(
        "{} modes, {} within the landmark tolerance, {} plausible",
        spectrum.len(),
        retained.len(),
        plausible.len()
    );
    Ok(())
}

fn experiment_faces(model: &ShapeModel, exp: &ExperimentOptions) -> Result<Vec<DVector<f64>>> {
    if exp.seeds == 0 {
        bail!(Exit(EXIT_INVALID, "--seeds must be at least 1".into()));
    }
    Ok(experiments::sample_faces(model, exp.seeds, exp.seed))
}

fn cmd_ambiguity(a: AmbiguityArgs) -> Result<()> {
    let model = model_from(&a.model)?;
    let faces = experiment_faces(&model, &a.exp)?;
    let cells = experiments::ambiguity_table(
        &model,
        &faces,
        &a.gen_dist,
        &a.fit_dist,
        a.exp.noise_px,
        &a.fit.config(),
        Exec::Parallel,
    )?;
    let mut outputs = Outputs::default();
    outputs.write(&a.out, |w| Ok(experiments::write_ambiguity_csv(&cells, w)?))?;
    outputs.commit()?;
    for c in &cells {
        info!(
            "gen {} fit {}: d_L {:.4} %, d_S {:.4} mm",
            c.gen_distance,
            c.fit_distance,
            c.mean_landmark_error(),
            c.mean_surface_error() * 1e3
        );
    }
    println!("{} cells written", cells.len());
    Ok(())
}

fn cmd_perspective_sweep(a: PerspectiveSweepArgs) -> Result<()> {
    let model = model_from(&a.model)?;
    let faces = experiment_faces(&model, &a.exp)?;
    let rows = experiments::persp_vs_ortho_sweep(&model, &faces, &a.distances, Exec::Parallel)?;
    let mut outputs = Outputs::default();
    outputs.write(&a.out, |w| Ok(experiments::write_sweep_csv(&rows, w)?))?;
    outputs.commit()?;
    println!("{} rows written", rows.len());
    Ok(())
}

fn cmd_distance_bias(a: DistanceBiasArgs) -> Result<()> {
    let model = model_from(&a.model)?;
    let faces = experiment_faces(&model, &a.exp)?;
    let rows = experiments::distance_bias_experiment(
        &model,
        &faces,
        &a.distances,
        a.exp.noise_px,
        &a.fit.config(),
        Exec::Parallel,
    )?;
    let mut outputs = Outputs::default();
    outputs.write(&a.out, |w| Ok(experiments::write_distance_csv(&rows, w)?))?;
    outputs.commit()?;
    let flagged = rows.iter().filter(|r| r.low_confidence).count();
    println!("{} rows written, {flagged} flagged low-confidence", rows.len());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let model = SyntheticModelSpec::new(a.seed, a.n_vertices, a.n_modes, a.scale)
        .with_landmarks(a.n_landmarks)
        .build()?;
    let mut outputs = Outputs::default();
    outputs.write(&a.out, |w| Ok(write_model(&model, w)?))?;
    outputs.commit()?;
    println!(
        "{} vertices, {} modes, {} landmarks",
        model.num_vertices(),
        model.num_modes(),
        model.landmark_indices().len()
    );
    Ok(())
}

fn cmd_project(a: ProjectArgs) -> Result<()> {
    let model = model_from(&a.model)?;
    let alpha = match &a.alpha {
        Some(p) => {
            let file = std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            read_alpha_csv(file)?
        }
        None => DVector::zeros(model.num_modes()),
    };
    if alpha.len() != model.num_modes() {
        bail!(Exit(
            EXIT_INVALID,
            format!("{} coefficients given, the model has {} modes", alpha.len(), model.num_modes())
        ));
    }
    let camera = match a.camera {
        CameraArg::Persp => {
            let mut cam = experiments::normalized_camera(&model, &alpha, a.distance, a.interocular_px)?;
            cam.rotation = a.rotation;
            cam.principal_point = a.center;
            Camera::Persp(cam)
        }
        CameraArg::Ortho => {
            let mut pose = experiments::normalized_pose(&model, &alpha, a.interocular_px)?;
            pose.rotation = a.rotation;
            pose.t2d = a.center / pose.scale;
            Camera::Ortho(pose)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let landmarks = observe(&model, &alpha, &camera, model.landmark_indices(), a.noise_px, &mut rng)?;
    let mut outputs = Outputs::default();
    outputs.write(&a.out, |w| Ok(landmarks.write_csv(w)?))?;
    if let Some(path) = &a.edges_out {
        let (w, h) = a.image_size;
        let edges = render_contour(&model, &alpha, &camera, w, h)?;
        outputs.write_path(path, |tmp| Ok(save_edges(&edges, tmp)?))?;
    }
    outputs.commit()?;
    println!("{} landmarks written", landmarks.len());
    Ok(())
}

fn cmd_compare_als(a: CompareAlsArgs) -> Result<()> {
    let model = model_from(&a.model)?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| a.seed + i).collect();
    let config = FitConfig {
        tikhonov_weight: a.reg,
        ..FitConfig::unconstrained()
    };
    let rows = experiments::snls_vs_als(&model, &seeds, a.noise_px, &config, Exec::Parallel)?;
    let mut outputs = Outputs::default();
    outputs.write(&a.out, |w| Ok(experiments::write_comparison_csv(&rows, w)?))?;
    outputs.commit()?;
    let wins = rows
        .iter()
        .filter(|r| r.snls_objective <= r.als_objective * (1.0 + 1e-8))
        .count();
    println!("SNLS objective <= ALS on {wins}/{} seeds", rows.len());
    Ok(())
}

fn cmd_check_jacobians(a: CheckJacobiansArgs) -> Result<()> {
    let model = model_from(&a.model)?;
    let checks = experiments::jacobian_audit(&model, a.trials, a.seed, Exec::Parallel)?;
    let mut failed = 0;
    for c in &checks {
        let ok = c.max() < a.tolerance;
        failed += usize::from(!ok);
        println!(
            "trial {:3}: ortho {:.3e}  persp-dlt {:.3e}  rodrigues {:.3e}  {}",
            c.trial,
            c.ortho,
            c.persp_dlt,
            c.rodrigues,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        bail!(Exit(
            EXIT_NUMERIC,
            format!("{failed} of {} trials at or above tolerance {:e}", checks.len(), a.tolerance)
        ));
    }
    println!("all {} trials below {:e}", checks.len(), a.tolerance);
    Ok(())
}
