use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

use unwarp::config::{ClusteringMode, RunConfig};
use unwarp::estimation::{
    estimate_fundamental_ransac, estimate_homography_ransac, match_descriptors, matched_points, write_matches_csv,
    RansacParams,
};
use unwarp::evaluation::{
    emit_report, evaluate_pairs, load_manifest, load_view_list, localization_rates, relocalize, write_rankings_csv,
    Mode, RelocMode,
};
use unwarp::features::{extract_plain, extract_rectified_features, extractor_by_id, read_features, write_features};
use unwarp::io::{
    load_depth, load_gray, mask_to_labels, read_intrinsics, save_gray_png, save_label_png, write_intrinsics,
};
use unwarp::rectification::{rectify_image, KeypointTransport};
use unwarp::synthetic::{
    binned_campaign, relocalization_scene, two_view_case, write_case, write_dataset, write_jsonl, write_reloc_scene,
    CaseOptions, Layout, RelocTruth,
};
use unwarp::Error;

#[derive(Parser, Debug)]
#[command(
    name = "unwarp",
    version,
    about = "Depth-driven perspective rectification and matching evaluation"
)]
struct Cli {
    /// JSON file with any subset of the run configuration fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Per-field overrides of the run configuration.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Side of the square window used for normal estimation.
    #[arg(long, global = true)]
    normal_window: Option<usize>,
    /// Widest normal window tried on noisy depth.
    #[arg(long, global = true)]
    normal_window_max: Option<usize>,
    /// Median plane-fit uncertainty that triggers a wider normal window, degrees.
    #[arg(long, global = true)]
    normal_uncertainty_deg: Option<f64>,
    /// Number of dominant plane directions kept.
    #[arg(long, global = true)]
    clusters: Option<usize>,
    /// Assignment threshold to a plane direction, degrees.
    #[arg(long, global = true)]
    theta_assign: Option<f64>,
    /// Maximum incidence angle kept for rectification, degrees.
    #[arg(long, global = true)]
    glancing: Option<f64>,
    /// Smallest patch kept, as a fraction of image pixels.
    #[arg(long, global = true)]
    min_patch_frac: Option<f64>,
    /// Clamp on the longer side of a rectified patch, pixels.
    #[arg(long, global = true)]
    max_output_dim: Option<usize>,
    /// Nearest/second-nearest descriptor distance ratio.
    #[arg(long, global = true)]
    ratio: Option<f64>,
    /// Homography inlier threshold, pixels.
    #[arg(long, global = true)]
    homography_px: Option<f64>,
    /// Sampson inlier threshold, pixels.
    #[arg(long, global = true)]
    sampson_px: Option<f64>,
    /// Rotation error below which a pair counts as localized, degrees.
    #[arg(long, global = true)]
    success_deg: Option<f64>,
    /// Global RANSAC seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Normal clustering mode.
    #[arg(long, global = true, value_enum)]
    clustering: Option<ClusteringArg>,
    /// Feature extractor id.
    #[arg(long, global = true)]
    extractor: Option<String>,
    /// Iteration cap for orthogonal clustering.
    #[arg(long, global = true)]
    cluster_max_iters: Option<usize>,
    /// Pixel stride used when fitting the frame.
    #[arg(long, global = true)]
    cluster_stride: Option<usize>,
    /// Histogram mode: number of sphere cells.
    #[arg(long, global = true)]
    hist_bins: Option<usize>,
    /// Histogram mode: minimum peak mass as a fraction of normals.
    #[arg(long, global = true)]
    hist_threshold_frac: Option<f64>,
    /// Histogram mode: peak suppression radius, degrees.
    #[arg(long, global = true)]
    hist_nms_deg: Option<f64>,
    /// Refit each patch normal to its 3-D points.
    #[arg(long, global = true)]
    plane_refit: Option<bool>,
    /// How keypoints return from rectified patches.
    #[arg(long, global = true, value_enum)]
    keypoint_transport: Option<TransportArg>,
    /// Feature budget per image.
    #[arg(long, global = true)]
    max_features: Option<usize>,
    /// Keep only mutual nearest-neighbour matches.
    #[arg(long, global = true)]
    mutual: Option<bool>,
    /// RANSAC stopping confidence.
    #[arg(long, global = true)]
    ransac_confidence: Option<f64>,
    /// RANSAC iteration cap.
    #[arg(long, global = true)]
    ransac_max_iters: Option<usize>,
    /// Ground-axis gate for re-localization, degrees.
    #[arg(long, global = true)]
    ground_gate_deg: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClusteringArg {
    Orthogonal,
    Histogram,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum TransportArg {
    Full,
    PositionOnly,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalMode {
    Rectified,
    Plain,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RelocArg {
    Homography,
    Fundamental,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MatchModel {
    Homography,
    Fundamental,
    None,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum LayoutArg {
    SinglePlane,
    TwoOrthogonal,
    GroundPlusWall,
    OppositeGround,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::SinglePlane => Layout::SinglePlane,
            LayoutArg::TwoOrthogonal => Layout::TwoOrthogonal,
            LayoutArg::GroundPlusWall => Layout::GroundPlusWall,
            LayoutArg::OppositeGround => Layout::OppositeGround,
        }
    }
}

#[derive(Args, Debug)]
struct ViewInput {
    #[arg(long)]
    image: PathBuf,
    /// PFM (meters) or 16-bit PNG depth.
    #[arg(long)]
    depth: PathBuf,
    /// Intrinsics JSON: {"fx", "fy", "cx", "cy", "width", "height"}.
    #[arg(long)]
    k: PathBuf,
    /// Raw PNG depth units per meter.
    #[arg(long)]
    depth_scale: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rectify the planar patches of one image.
    Rectify {
        #[command(flatten)]
        input: ViewInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract features (rectified by default) into a binary feature file.
    Extract {
        #[command(flatten)]
        input: ViewInput,
        /// Skip rectification and extract on the original image only.
        #[arg(long)]
        plain: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match two feature files and flag model inliers.
    Match {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum, default_value = "homography")]
        model: MatchModel,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate relative-pose recovery over a pair manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "rectified")]
        mode: EvalMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank database views for every query by inlier count.
    Relocalize {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        database: PathBuf,
        #[arg(long, value_enum, default_value = "homography")]
        mode: RelocArg,
        /// Ground normal in camera coordinates, "x,y,z"; restricts
        /// rectification to patches near it.
        #[arg(long, value_parser = parse_axis, allow_hyphen_values = true)]
        ground_axis: Option<Vector3<f64>>,
        /// `reloc.json` from `synth --reloc`; adds top-1 accuracy.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic dataset with exact ground truth.
    Synth {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "single_plane")]
        layout: Vec<LayoutArg>,
        /// View separation of a single pair, degrees.
        #[arg(long, default_value_t = 30.0)]
        sep: f64,
        /// Camera distance, meters.
        #[arg(long, default_value_t = 3.0)]
        distance: f64,
        /// Pairs per ten-degree bin over all 18 bins instead of one pair.
        #[arg(long, conflicts_with = "reloc")]
        campaign: Option<usize>,
        /// Write a re-localization scene with this many queries and
        /// database views instead.
        #[arg(long)]
        reloc: Option<usize>,
        /// Gaussian depth noise as a fraction of depth.
        #[arg(long, default_value_t = 0.0)]
        depth_noise: f64,
        #[arg(long, default_value_t = 480)]
        width: usize,
        #[arg(long, default_value_t = 360)]
        height: usize,
        #[arg(long, default_value_t = 390.0)]
        focal: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Rectify { .. } => "rectify",
            Command::Extract { .. } => "extract",
            Command::Match { .. } => "match",
            Command::Evaluate { .. } => "evaluate",
            Command::Relocalize { .. } => "relocalize",
            Command::Synth { .. } => "synth",
        }
    }
}

fn parse_axis(s: &str) -> Result<Vector3<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] if (x * x + y * y + z * z) > 0.0 => Ok(Vector3::new(*x, *y, *z).normalize()),
        _ => Err("expected three comma-separated numbers, not all zero".into()),
    }
}

fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) {
    macro_rules! set {
        ($($field:ident <- $arg:ident),* $(,)?) => {
            $(if let Some(v) = o.$arg.clone() { cfg.$field = v; })*
        };
    }
    set!(
        normal_window <- normal_window,
        normal_window_max <- normal_window_max,
        normal_uncertainty_deg <- normal_uncertainty_deg,
        clusters <- clusters,
        theta_assign_deg <- theta_assign,
        glancing_max_deg <- glancing,
        min_patch_frac <- min_patch_frac,
        max_output_dim <- max_output_dim,
        ratio <- ratio,
        homography_inlier_px <- homography_px,
        sampson_px <- sampson_px,
        success_deg <- success_deg,
        seed <- seed,
        extractor <- extractor,
        cluster_max_iters <- cluster_max_iters,
        cluster_stride <- cluster_stride,
        hist_bins <- hist_bins,
        hist_threshold_frac <- hist_threshold_frac,
        hist_nms_deg <- hist_nms_deg,
        plane_refit <- plane_refit,
        max_features <- max_features,
        mutual <- mutual,
        ransac_confidence <- ransac_confidence,
        ransac_max_iters <- ransac_max_iters,
        ground_gate_deg <- ground_gate_deg,
    );
    if let Some(c) = o.clustering {
        cfg.clustering = match c {
            ClusteringArg::Orthogonal => ClusteringMode::Orthogonal,
            ClusteringArg::Histogram => ClusteringMode::Histogram,
        };
    }
    if let Some(t) = o.keypoint_transport {
        cfg.keypoint_transport = match t {
            TransportArg::Full => KeypointTransport::Full,
            TransportArg::PositionOnly => KeypointTransport::PositionOnly,
        };
    }
}

/// Usage problems exit with 1, everything else with 2.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.overrides);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = build_config(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot configure threads: {e}")))?;
    }
    eprintln!("config: {}", cfg.to_json());
    let start = Instant::now();
    dispatch(&cli.command, &cfg)?;
    eprintln!(
        "{} finished in {:.2} s",
        cli.command.name(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_input(input: &ViewInput) -> unwarp::Result<(unwarp::GrayImage, unwarp::DepthMap, unwarp::Intrinsics)> {
    let k = read_intrinsics(&input.k)?;
    let image = load_gray(&input.image)?;
    let depth = load_depth(&input.depth, input.depth_scale)?;
    Ok((image, depth, k))
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<(), Failure> {
    match command {
        Command::Rectify { input, out } => cmd_rectify(input, cfg, out)?,
        Command::Extract { input, plain, out } => cmd_extract(input, *plain, cfg, out)?,
        Command::Match { a, b, model, out } => cmd_match(a, b, *model, cfg, out)?,
        Command::Evaluate { manifest, mode, out } => cmd_evaluate(manifest, *mode, cfg, out)?,
        Command::Relocalize {
            queries,
            database,
            mode,
            ground_axis,
            truth,
            out,
        } => cmd_relocalize(queries, database, *mode, *ground_axis, truth.as_deref(), cfg, out)?,
        Command::Synth {
            layout,
            sep,
            distance,
            campaign,
            reloc,
            depth_noise,
            width,
            height,
            focal,
            out,
        } => {
            let opts = CaseOptions {
                width: *width,
                height: *height,
                focal: *focal,
                depth_noise: *depth_noise,
            };
            let layouts: Vec<Layout> = layout.iter().map(|&l| l.into()).collect();
            cmd_synth(&layouts, *sep, *distance, *campaign, *reloc, &opts, cfg.seed, out)?
        }
    }
    Ok(())
}

fn cmd_rectify(input: &ViewInput, cfg: &RunConfig, out: &Path) -> unwarp::Result<()> {
    let (image, depth, k) = load_input(input)?;
    let rset = rectify_image(&image, &depth, &k, &cfg.rectify_config())?;
    std::fs::create_dir_all(out)?;
    for (i, p) in rset.patches.iter().enumerate() {
        save_gray_png(&out.join(format!("patch_{i:02}.png")), &p.raster.image)?;
        std::fs::write(
            out.join(format!("patch_{i:02}.json")),
            serde_json::to_string_pretty(&p.sidecar())?,
        )?;
    }
    save_label_png(&out.join("assignment.png"), &rset.assignment.0)?;
    save_label_png(&out.join("non_planar.png"), &mask_to_labels(&rset.non_planar))?;
    eprintln!("{} patches", rset.patches.len());
    Ok(())
}

fn cmd_extract(input: &ViewInput, plain: bool, cfg: &RunConfig, out: &Path) -> unwarp::Result<()> {
    let extractor = extractor_by_id(&cfg.extractor, cfg.max_features)?;
    let (image, depth, k) = load_input(input)?;
    let fs = if plain {
        extract_plain(&image, extractor.as_ref())?
    } else {
        let rset = rectify_image(&image, &depth, &k, &cfg.rectify_config())?;
        extract_rectified_features(
            &image,
            &rset,
            extractor.as_ref(),
            cfg.keypoint_transport,
            Some(cfg.max_features),
        )?
    };
    write_features(out, &fs)?;
    eprintln!("{} features", fs.len());
    Ok(())
}

fn cmd_match(a: &Path, b: &Path, model: MatchModel, cfg: &RunConfig, out: &Path) -> unwarp::Result<()> {
    let fa = read_features(a)?;
    let fb = read_features(b)?;
    let matches = match_descriptors(&fa, &fb, cfg.ratio, cfg.mutual)?;
    let (xa, xb) = matched_points(&fa.keypoints, &fb.keypoints, &matches);
    let params = |threshold| RansacParams {
        threshold,
        confidence: cfg.ransac_confidence,
        max_iters: cfg.ransac_max_iters,
        seed: cfg.seed,
    };
    let inliers = match model {
        MatchModel::Homography => {
            estimate_homography_ransac(&xa, &xb, &params(cfg.homography_inlier_px)).map(|f| f.inliers)
        }
        MatchModel::Fundamental => estimate_fundamental_ransac(&xa, &xb, &params(cfg.sampson_px)).map(|f| f.inliers),
        MatchModel::None => Ok(Vec::new()),
    };
    let inliers = inliers.unwrap_or_else(|e| {
        log::warn!("no model fitted: {e}");
        Vec::new()
    });
    write_matches_csv(out, &matches, &inliers)?;
    eprintln!("{} matches, {} inliers", matches.len(), inliers.len());
    Ok(())
}

fn cmd_evaluate(manifest: &Path, mode: EvalMode, cfg: &RunConfig, out: &Path) -> unwarp::Result<()> {
    let dataset = load_manifest(manifest)?;
    let modes: &[Mode] = match mode {
        EvalMode::Rectified => &[Mode::Rectified],
        EvalMode::Plain => &[Mode::Plain],
        EvalMode::Both => &[Mode::Rectified, Mode::Plain],
    };
    let mut results = Vec::new();
    for &m in modes {
        results.extend(evaluate_pairs(&dataset, cfg, m, cfg.seed)?);
    }
    let rates = localization_rates(&results);
    emit_report(&results, &rates, out)?;
    for r in &rates {
        let (n, ok) = r.bins.iter().fold((0, 0), |(n, ok), b| (n + b.count, ok + b.localized));
        eprintln!("{}: {ok}/{n} pairs localized", r.mode.as_str());
    }
    Ok(())
}

fn cmd_relocalize(
    queries: &Path,
    database: &Path,
    mode: RelocArg,
    ground_axis: Option<Vector3<f64>>,
    truth: Option<&Path>,
    cfg: &RunConfig,
    out: &Path,
) -> unwarp::Result<()> {
    let q = load_view_list(queries)?;
    let d = load_view_list(database)?;
    let mode = match mode {
        RelocArg::Homography => RelocMode::Homography,
        RelocArg::Fundamental => RelocMode::Fundamental,
    };
    let rankings = relocalize(&q, &d, mode, ground_axis, cfg, cfg.seed)?;
    std::fs::create_dir_all(out)?;
    write_rankings_csv(&out.join("rankings.csv"), &rankings)?;
    if let Some(path) = truth {
        let truth: RelocTruth = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut w = csv::Writer::from_path(out.join("top1.csv"))?;
        w.write_record(["query", "top", "inliers", "truth", "correct"])?;
        let mut correct = 0;
        for r in &rankings {
            let (top, inliers) = r.ranking[0];
            let expected = truth.ground_truth.get(r.query).copied();
            let ok = expected == Some(top);
            correct += usize::from(ok);
            w.write_record([
                r.query.to_string(),
                top.to_string(),
                inliers.to_string(),
                expected.map(|e| e.to_string()).unwrap_or_default(),
                u8::from(ok).to_string(),
            ])?;
        }
        w.flush()?;
        eprintln!("top-1 correct: {correct}/{}", rankings.len());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    layouts: &[Layout],
    sep: f64,
    distance: f64,
    campaign: Option<usize>,
    reloc: Option<usize>,
    opts: &CaseOptions,
    seed: u64,
    out: &Path,
) -> unwarp::Result<()> {
    if let Some(n) = reloc {
        let scene = relocalization_scene(n, seed, opts)?;
        write_reloc_scene(out, &scene)?;
        eprintln!("wrote {n} queries and {n} database views");
        return Ok(());
    }
    if let Some(per_bin) = campaign {
        let specs = binned_campaign(per_bin, layouts, seed);
        let manifest = write_dataset(out, &specs, opts)?;
        eprintln!("wrote {} pairs to {}", specs.len(), manifest.display());
        return Ok(());
    }
    let layout = layouts.first().copied().unwrap_or(Layout::SinglePlane);
    let case = two_view_case(sep, distance, layout, seed, opts)?;
    let record = write_case(out, "pair", &case)?;
    write_jsonl(&out.join("manifest.jsonl"), &[record])?;
    write_intrinsics(&out.join("k.json"), &case.k)?;
    eprintln!("wrote 1 pair to {}", out.join("manifest.jsonl").display());
    Ok(())
}
