//! Pair manifests, difficulty binning, pose-evaluation campaigns,
//! exhaustive re-localization and report files.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Point2, Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::estimation::{
    derive_seed, estimate_fundamental_ransac, estimate_homography_ransac, estimate_relative_pose, match_descriptors,
    matched_points, rotation_error_deg, translation_error_deg, PoseModel, PoseParams, RansacParams, RelativePose,
};
use crate::features::{extract_plain, extract_rectified_features, extractor_by_id, FeatureExtractor, FeatureSet};
use crate::geometry::{backproject_map, estimate_normals, select_normal_window, DepthMap, Intrinsics, NormalMap};
use crate::io::{load_depth, load_gray};
use crate::raster::GrayImage;
use crate::rectification::{rectify_image, AxisFilter};

/// Number of ten-degree difficulty bins.
pub const NUM_BINS: usize = 18;

/// One manifest line as stored on disk. Paths are relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub img_a: String,
    pub img_b: String,
    pub depth_a: String,
    pub depth_b: String,
    #[serde(rename = "K_a")]
    pub k_a: Intrinsics,
    #[serde(rename = "K_b")]
    pub k_b: Intrinsics,
    /// `[w, x, y, z]`.
    pub q_ab: [f64; 4],
    pub t_ab: [f64; 3],
    pub scene: String,
    /// Raw units per meter for 16-bit PNG depth; ignored for PFM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_scale_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_scale_b: Option<f64>,
}

/// A validated pair with resolved paths and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub id: usize,
    pub img_a: PathBuf,
    pub img_b: PathBuf,
    pub depth_a: PathBuf,
    pub depth_b: PathBuf,
    pub k_a: Intrinsics,
    pub k_b: Intrinsics,
    pub depth_scale_a: Option<f64>,
    pub depth_scale_b: Option<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scene: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub entries: Vec<PairEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn existing(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingFile(path))
    }
}

fn entry_from_record(id: usize, line: usize, rec: ManifestRecord, base: &Path) -> Result<PairEntry> {
    let bad = |message: String| Error::Manifest { line, message };
    let norm = rec.q_ab.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !((norm - 1.0).abs() <= 1e-6) {
        return Err(Error::BadQuaternion {
            entry: format!("line {line} ({})", rec.scene),
            norm,
        });
    }
    rec.k_a.validate().map_err(|e| bad(e.to_string()))?;
    rec.k_b.validate().map_err(|e| bad(e.to_string()))?;
    let t = Vector3::from(rec.t_ab);
    if !t.iter().all(|v| v.is_finite()) {
        return Err(bad("translation must be finite".into()));
    }
    let [w, x, y, z] = rec.q_ab;
    let rotation = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
        .to_rotation_matrix()
        .into_inner();
    Ok(PairEntry {
        id,
        img_a: existing(resolve(base, &rec.img_a))?,
        img_b: existing(resolve(base, &rec.img_b))?,
        depth_a: existing(resolve(base, &rec.depth_a))?,
        depth_b: existing(resolve(base, &rec.depth_b))?,
        k_a: rec.k_a,
        k_b: rec.k_b,
        depth_scale_a: rec.depth_scale_a,
        depth_scale_b: rec.depth_scale_b,
        rotation,
        translation: if t.norm() > 0.0 { t.normalize() } else { t },
        scene: rec.scene,
    })
}

/// Parse a JSON-lines manifest. Blank lines are skipped; an empty manifest
/// is valid but logged.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        entries.push(entry_from_record(entries.len(), line_no, rec, base)?);
    }
    if entries.is_empty() {
        log::warn!("manifest {} contains no pairs", path.display());
    }
    Ok(Dataset { entries })
}

/// One view in a re-localization list file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub image: String,
    pub depth: String,
    #[serde(rename = "K")]
    pub k: Intrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewEntry {
    pub image: PathBuf,
    pub depth: PathBuf,
    pub k: Intrinsics,
    pub depth_scale: Option<f64>,
}

/// Parse a JSON-lines list of views, resolving paths against its directory.
pub fn load_view_list(path: &Path) -> Result<Vec<ViewEntry>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Manifest { line: i + 1, message };
        let rec: ViewRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        rec.k.validate().map_err(|e| bad(e.to_string()))?;
        out.push(ViewEntry {
            image: existing(resolve(base, &rec.image))?,
            depth: existing(resolve(base, &rec.depth))?,
            k: rec.k,
            depth_scale: rec.depth_scale,
        });
    }
    Ok(out)
}

/// Ten-degree bin of the total rotation angle, clamped to the last bin.
/// Bins are closed on the left: exactly 10 degrees falls in bin 1, with a
/// 1e-9 degree allowance so a rotation built from an exact boundary angle
/// is not pushed down a bin by rounding.
pub fn difficulty_bin(rotation: &Matrix3<f64>) -> Result<usize> {
    let angle = rotation_error_deg(rotation, &Matrix3::identity())?;
    Ok(bin_of_angle(angle))
}

pub fn bin_of_angle(angle_deg: f64) -> usize {
    (((angle_deg + 1e-9) / 10.0).floor().max(0.0) as usize).min(NUM_BINS - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Rectified,
    Plain,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Rectified => "rectified",
            Mode::Plain => "plain",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectified" => Ok(Mode::Rectified),
            "plain" => Ok(Mode::Plain),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

/// Pipeline stage at which a pair evaluation stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureStage {
    Load,
    Rectify,
    Extract,
    Match,
    Estimate,
}

impl FailureStage {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureStage::Load => "load",
            FailureStage::Rectify => "rectify",
            FailureStage::Extract => "extract",
            FailureStage::Match => "match",
            FailureStage::Estimate => "estimate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub pair_id: usize,
    pub scene: String,
    pub mode: Mode,
    pub bin: usize,
    pub gt_angle_deg: f64,
    pub matches: usize,
    pub inliers: usize,
    pub model: Option<PoseModel>,
    pub pose: Option<RelativePose>,
    pub rotation_error_deg: Option<f64>,
    pub translation_error_deg: Option<f64>,
    /// Rotation error present and below the success threshold.
    pub success: bool,
    pub failure: Option<FailureStage>,
}

struct LoadedView {
    image: GrayImage,
    depth: DepthMap,
}

fn load_view(image: &Path, depth: &Path, scale: Option<f64>, k: &Intrinsics) -> Result<LoadedView> {
    let image = load_gray(image)?;
    let depth = load_depth(depth, scale)?;
    for dims in [image.dims(), depth.0.dims()] {
        if dims != k.dims() {
            return Err(Error::DimensionMismatch {
                expected: k.dims(),
                actual: dims,
            });
        }
    }
    Ok(LoadedView { image, depth })
}

/// Features of one view plus its per-pixel normals.
fn view_features(
    view: &LoadedView,
    k: &Intrinsics,
    mode: Mode,
    config: &RunConfig,
    axis_filter: Option<AxisFilter>,
    extractor: &dyn FeatureExtractor,
) -> std::result::Result<(FeatureSet, NormalMap), FailureStage> {
    match mode {
        Mode::Rectified => {
            let mut rc = config.rectify_config();
            rc.axis_filter = axis_filter;
            let rset = rectify_image(&view.image, &view.depth, k, &rc).map_err(|_| FailureStage::Rectify)?;
            let fs = extract_rectified_features(
                &view.image,
                &rset,
                extractor,
                config.keypoint_transport,
                Some(config.max_features),
            )
            .map_err(|_| FailureStage::Extract)?;
            Ok((fs, rset.normals))
        }
        Mode::Plain => {
            let fs = extract_plain(&view.image, extractor).map_err(|_| FailureStage::Extract)?;
            let normals = backproject_map(&view.depth, k)
                .and_then(|p| {
                    let window = select_normal_window(
                        &p,
                        config.normal_window,
                        config.normal_window_max,
                        config.normal_uncertainty_deg,
                    );
                    estimate_normals(&p, k, window)
                })
                .map_err(|_| FailureStage::Rectify)?;
            Ok((fs, normals))
        }
    }
}

fn normal_at(normals: &NormalMap, x: f64, y: f64) -> Option<Vector3<f64>> {
    normals.try_get(x.round() as i64, y.round() as i64).copied().flatten()
}

fn evaluate_pair(
    entry: &PairEntry,
    config: &RunConfig,
    mode: Mode,
    seed: u64,
    extractor: &dyn FeatureExtractor,
) -> PairResult {
    let gt_angle_deg = rotation_error_deg(&entry.rotation, &Matrix3::identity()).unwrap_or(f64::NAN);
    let mut result = PairResult {
        pair_id: entry.id,
        scene: entry.scene.clone(),
        mode,
        bin: bin_of_angle(gt_angle_deg),
        gt_angle_deg,
        matches: 0,
        inliers: 0,
        model: None,
        pose: None,
        rotation_error_deg: None,
        translation_error_deg: None,
        success: false,
        failure: None,
    };
    let views = load_view(&entry.img_a, &entry.depth_a, entry.depth_scale_a, &entry.k_a).and_then(|a| {
        Ok((
            a,
            load_view(&entry.img_b, &entry.depth_b, entry.depth_scale_b, &entry.k_b)?,
        ))
    });
    let (va, vb) = match views {
        Ok(v) => v,
        Err(e) => {
            log::warn!("pair {}: {e}", entry.id);
            result.failure = Some(FailureStage::Load);
            return result;
        }
    };
    let features = view_features(&va, &entry.k_a, mode, config, None, extractor)
        .and_then(|a| Ok((a, view_features(&vb, &entry.k_b, mode, config, None, extractor)?)));
    let ((fa, normals_a), (fb, _)) = match features {
        Ok(f) => f,
        Err(stage) => {
            result.failure = Some(stage);
            return result;
        }
    };
    let Ok(matches) = match_descriptors(&fa, &fb, config.ratio, config.mutual) else {
        result.failure = Some(FailureStage::Match);
        return result;
    };
    result.matches = matches.len();
    let (xa, xb) = matched_points(&fa.keypoints, &fb.keypoints, &matches);
    let hints: Vec<Option<Vector3<f64>>> = xa.iter().map(|p| normal_at(&normals_a, p.x, p.y)).collect();
    let params = PoseParams {
        sampson_px: config.sampson_px,
        confidence: config.ransac_confidence,
        max_iters: config.ransac_max_iters,
        seed,
        ..Default::default()
    };
    let estimate = match estimate_relative_pose(&xa, &xb, &entry.k_a, &entry.k_b, &params, Some(&hints)) {
        Ok(e) => e,
        Err(_) => {
            result.failure = Some(FailureStage::Estimate);
            return result;
        }
    };
    result.inliers = estimate.inliers.len();
    result.model = Some(estimate.model);
    result.pose = Some(estimate.pose);
    result.translation_error_deg = Some(translation_error_deg(&estimate.pose.translation, &entry.translation));
    match rotation_error_deg(&estimate.pose.rotation, &entry.rotation) {
        Ok(err) => {
            result.rotation_error_deg = Some(err);
            result.success = err < config.success_deg;
        }
        Err(_) => result.failure = Some(FailureStage::Estimate),
    }
    result
}

/// Evaluate every pair of `dataset` in `mode`. Pairs run in parallel with
/// seeds derived from `seed` and the pair id; results follow manifest order.
pub fn evaluate_pairs(dataset: &Dataset, config: &RunConfig, mode: Mode, seed: u64) -> Result<Vec<PairResult>> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("dataset has no pairs".into()));
    }
    config.validate()?;
    let extractor = extractor_by_id(&config.extractor, config.max_features)?;
    Ok(dataset
        .entries
        .par_iter()
        .map(|e| evaluate_pair(e, config, mode, derive_seed(seed, e.id as u64), extractor.as_ref()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BinRate {
    pub count: usize,
    pub localized: usize,
}

impl BinRate {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// `None` for an empty bin.
    pub fn rate(&self) -> Option<f64> {
        (self.count > 0).then(|| self.localized as f64 / self.count as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinRates {
    pub mode: Mode,
    pub bins: [BinRate; NUM_BINS],
}

/// Per-bin success rates, one entry per mode present (rectified first).
pub fn localization_rates(results: &[PairResult]) -> Vec<BinRates> {
    let mut out = Vec::new();
    for mode in [Mode::Rectified, Mode::Plain] {
        let mut bins = [BinRate::default(); NUM_BINS];
        let mut any = false;
        for r in results.iter().filter(|r| r.mode == mode) {
            any = true;
            bins[r.bin].count += 1;
            bins[r.bin].localized += usize::from(r.success);
        }
        if any {
            out.push(BinRates { mode, bins });
        }
    }
    out
}

/// Database ids ordered by inlier count (ties by lower id).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryRanking {
    pub query: usize,
    /// `(database id, inliers)`.
    pub ranking: Vec<(usize, usize)>,
}

impl QueryRanking {
    pub fn top(&self) -> Option<usize> {
        self.ranking.first().map(|r| r.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelocMode {
    /// Rectified features, homography inliers.
    Homography,
    /// Plain features, fundamental-matrix inliers.
    Fundamental,
}

impl std::str::FromStr for RelocMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homography" => Ok(RelocMode::Homography),
            "fundamental" => Ok(RelocMode::Fundamental),
            other => Err(Error::InvalidConfig(format!("unknown relocalization mode `{other}`"))),
        }
    }
}

fn reloc_features(
    view: &ViewEntry,
    mode: RelocMode,
    config: &RunConfig,
    filter: Option<AxisFilter>,
    extractor: &dyn FeatureExtractor,
) -> FeatureSet {
    let loaded = match load_view(&view.image, &view.depth, view.depth_scale, &view.k) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("{}: {e}", view.image.display());
            return FeatureSet::empty(extractor.descriptor_kind());
        }
    };
    let fs = match mode {
        RelocMode::Homography => {
            view_features(&loaded, &view.k, Mode::Rectified, config, filter, extractor).map(|f| f.0)
        }
        RelocMode::Fundamental => extract_plain(&loaded.image, extractor).map_err(|_| FailureStage::Extract),
    };
    fs.unwrap_or_else(|stage| {
        log::warn!("{}: failed at {}", view.image.display(), stage.as_str());
        FeatureSet::empty(extractor.descriptor_kind())
    })
}

fn pair_inliers(a: &FeatureSet, b: &FeatureSet, mode: RelocMode, config: &RunConfig, seed: u64) -> usize {
    let Ok(matches) = match_descriptors(a, b, config.ratio, config.mutual) else {
        return 0;
    };
    let (xa, xb): (Vec<Point2<f64>>, Vec<Point2<f64>>) = matched_points(&a.keypoints, &b.keypoints, &matches);
    let threshold = match mode {
        RelocMode::Homography => config.homography_inlier_px,
        RelocMode::Fundamental => config.sampson_px,
    };
    let params = RansacParams {
        threshold,
        confidence: config.ransac_confidence,
        max_iters: config.ransac_max_iters,
        seed,
    };
    let fit = match mode {
        RelocMode::Homography => estimate_homography_ransac(&xa, &xb, &params).map(|f| f.inliers.len()),
        RelocMode::Fundamental => estimate_fundamental_ransac(&xa, &xb, &params).map(|f| f.inliers.len()),
    };
    fit.unwrap_or(0)
}

/// Match every query against every database view and rank the database by
/// inlier count. With `ground_axis` (unit normal in camera coordinates),
/// homography mode only rectifies patches within `ground_gate_deg` of it.
pub fn relocalize(
    queries: &[ViewEntry],
    database: &[ViewEntry],
    mode: RelocMode,
    ground_axis: Option<Vector3<f64>>,
    config: &RunConfig,
    seed: u64,
) -> Result<Vec<QueryRanking>> {
    if queries.is_empty() || database.is_empty() {
        return Err(Error::InvalidConfig(
            "relocalization needs queries and database views".into(),
        ));
    }
    config.validate()?;
    let extractor = extractor_by_id(&config.extractor, config.max_features)?;
    let filter = ground_axis.map(|axis| AxisFilter {
        axis,
        max_angle_deg: config.ground_gate_deg,
    });
    let features = |views: &[ViewEntry]| -> Vec<FeatureSet> {
        views
            .par_iter()
            .map(|v| reloc_features(v, mode, config, filter, extractor.as_ref()))
            .collect()
    };
    let qf = features(queries);
    let df = features(database);
    let nd = df.len();
    let counts: Vec<usize> = (0..qf.len() * nd)
        .into_par_iter()
        .map(|i| pair_inliers(&qf[i / nd], &df[i % nd], mode, config, derive_seed(seed, i as u64)))
        .collect();
    Ok(counts
        .chunks(nd)
        .enumerate()
        .map(|(q, row)| {
            let mut ranking: Vec<(usize, usize)> = row.iter().copied().enumerate().collect();
            ranking.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            QueryRanking { query: q, ranking }
        })
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_pairs_csv(path: &Path, results: &[PairResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "pair_id",
        "scene",
        "mode",
        "bin",
        "gt_angle_deg",
        "matches",
        "inliers",
        "model",
        "rotation_error_deg",
        "translation_error_deg",
        "success",
        "failure",
    ])?;
    for r in results {
        w.write_record([
            r.pair_id.to_string(),
            r.scene.clone(),
            r.mode.as_str().to_string(),
            r.bin.to_string(),
            format!("{:.6}", r.gt_angle_deg),
            r.matches.to_string(),
            r.inliers.to_string(),
            r.model.map(|m| m.as_str().to_string()).unwrap_or_default(),
            opt(r.rotation_error_deg),
            opt(r.translation_error_deg),
            u8::from(r.success).to_string(),
            r.failure.map(|f| f.as_str().to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rates_csv(path: &Path, rates: &[BinRates]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "bin", "count", "localized", "rate", "empty"])?;
    for r in rates {
        for (k, b) in r.bins.iter().enumerate() {
            w.write_record([
                r.mode.as_str().to_string(),
                k.to_string(),
                b.count.to_string(),
                b.localized.to_string(),
                opt(b.rate()),
                u8::from(b.is_empty()).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_rankings_csv(path: &Path, rankings: &[QueryRanking]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["query", "rank", "database", "inliers"])?;
    for q in rankings {
        for (rank, (db, inliers)) in q.ranking.iter().enumerate() {
            w.write_record([
                q.query.to_string(),
                rank.to_string(),
                db.to_string(),
                inliers.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Standalone SVG with one polyline per mode over the occupied bins.
pub fn rates_svg(rates: &[BinRates]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 60.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 20.0;
    const BOTTOM: f64 = 50.0;
    let px = |k: usize| LEFT + (W - LEFT - RIGHT) * k as f64 / (NUM_BINS - 1) as f64;
    let py = |r: f64| TOP + (H - TOP - BOTTOM) * (1.0 - r);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (px(0), px(NUM_BINS - 1), py(0.0), py(1.0));
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..NUM_BINS {
        let x = px(k);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{y0}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{k}</text>"#,
            y0 + 4.0,
            y0 + 16.0
        );
    }
    for i in 0..=5 {
        let r = i as f64 / 5.0;
        let y = py(r);
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{r:.1}</text>"#,
            x0 - 4.0,
            x0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">difficulty bin (10 degree steps)</text>"#,
        (x0 + x1) / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">localization rate</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (i, r) in rates.iter().enumerate() {
        let color = match r.mode {
            Mode::Rectified => "#1f77b4",
            Mode::Plain => "#d62728",
        };
        let points: Vec<String> = r
            .bins
            .iter()
            .enumerate()
            .filter_map(|(k, b)| b.rate().map(|v| format!("{:.1},{:.1}", px(k), py(v))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = TOP + 14.0 + 16.0 * i as f64;
        let lx = x1 - 110.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            ly - 4.0,
            lx + 24.0,
            ly - 4.0,
            lx + 30.0,
            r.mode.as_str()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Write `pairs.csv`, `rates.csv` and `rates.svg` into `dir`.
pub fn emit_report(results: &[PairResult], rates: &[BinRates], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_pairs_csv(&dir.join("pairs.csv"), results)?;
    write_rates_csv(&dir.join("rates.csv"), rates)?;
    std::fs::write(dir.join("rates.svg"), rates_svg(rates))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};

    fn rot_z(deg: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), deg.to_radians()).into_inner()
    }

    #[test]
    fn bin_boundaries() {
        assert_eq!(difficulty_bin(&Matrix3::identity()).unwrap(), 0);
        assert_eq!(difficulty_bin(&rot_z(95.0)).unwrap(), 9);
        assert_eq!(difficulty_bin(&rot_z(179.9)).unwrap(), 17);
        assert_eq!(bin_of_angle(10.0), 1);
        for k in 1..18 {
            let deg = 10.0 * k as f64;
            for axis in [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()] {
                let r = Rotation3::from_axis_angle(&axis, deg.to_radians());
                assert_eq!(difficulty_bin(r.matrix()).unwrap(), k.min(NUM_BINS - 1), "{deg} deg");
            }
        }
        assert_eq!(bin_of_angle(9.999_999), 0);
        let axis = Unit::new_normalize(Vector3::new(1.0, -2.0, 0.5));
        let r = Rotation3::from_axis_angle(&axis, 35f64.to_radians()).into_inner();
        assert_eq!(difficulty_bin(&r).unwrap(), 3);
        assert!(matches!(difficulty_bin(&(rot_z(5.0) * 1.1)), Err(Error::NotARotation)));
    }

    fn result(mode: Mode, bin: usize, success: bool) -> PairResult {
        PairResult {
            pair_id: 0,
            scene: "s".into(),
            mode,
            bin,
            gt_angle_deg: bin as f64 * 10.0 + 1.0,
            matches: 10,
            inliers: 5,
            model: None,
            pose: None,
            rotation_error_deg: Some(if success { 1.0 } else { 20.0 }),
            translation_error_deg: None,
            success,
            failure: None,
        }
    }

    #[test]
    fn rates_per_bin() {
        let mut rs: Vec<PairResult> = (0..10).map(|i| result(Mode::Rectified, 3, i < 7)).collect();
        rs.push(result(Mode::Rectified, 5, true));
        let rates = localization_rates(&rs);
        assert_eq!(rates.len(), 1);
        assert_eq!(rates[0].bins[3].rate(), Some(0.7));
        assert_eq!(rates[0].bins[5].rate(), Some(1.0));
        assert!(rates[0].bins[0].is_empty());
        assert_eq!(rates[0].bins[0].rate(), None);
        let total: usize = rates[0].bins.iter().map(|b| b.count).sum();
        assert_eq!(total, rs.len());
    }

    #[test]
    fn report_files_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let mut rs = Vec::new();
        for bin in 0..NUM_BINS {
            rs.push(result(Mode::Rectified, bin, true));
            rs.push(result(Mode::Plain, bin, bin < 4));
        }
        let rates = localization_rates(&rs);
        emit_report(&rs, &rates, dir.path()).unwrap();
        let rates_csv = std::fs::read_to_string(dir.path().join("rates.csv")).unwrap();
        assert_eq!(rates_csv.lines().count(), 1 + 36);
        let first = std::fs::read(dir.path().join("pairs.csv")).unwrap();
        emit_report(&rs, &rates, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("pairs.csv")).unwrap(), first);
        assert_eq!(
            std::fs::read_to_string(dir.path().join("rates.csv")).unwrap(),
            rates_csv
        );
        let svg = std::fs::read_to_string(dir.path().join("rates.svg")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn empty_report_has_headers_and_axes() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&[], &localization_rates(&[]), dir.path()).unwrap();
        for f in ["pairs.csv", "rates.csv"] {
            assert_eq!(std::fs::read_to_string(dir.path().join(f)).unwrap().lines().count(), 1);
        }
        let svg = std::fs::read_to_string(dir.path().join("rates.svg")).unwrap();
        assert!(svg.contains("<line") && !svg.contains("<polyline"));
    }
}
