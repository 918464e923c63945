//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! `cargo test --test acceptance -- 5 10` runs a subset by number.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Point2, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unwarp::estimation::{estimate_essential_ransac, recover_pose, rotation_error_deg, RansacParams};
use unwarp::evaluation::{
    difficulty_bin, evaluate_pairs, load_manifest, load_view_list, localization_rates, relocalize, BinRates, Mode,
    PairResult, RelocMode, NUM_BINS,
};
use unwarp::geometry::{backproject_map, estimate_normals};
use unwarp::rectification::rectify_image;
use unwarp::segmentation::cluster_normals_orthogonal;
use unwarp::synthetic::{
    binned_campaign, plane_to_image, relocalization_scene, render_view, two_view_case, write_dataset,
    write_reloc_scene, CameraPose, CaseOptions, Layout, ScenePlane, Texture, TwoViewCase,
};
use unwarp::{Intrinsics, NormalMap, RunConfig};

const CAMPAIGN_SEED: u64 = 2024;
const RELOC_SEED: u64 = 11;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Axial angle between two directions in degrees, computed independently
/// of the library.
fn axial_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let (a, b) = (a.normalize(), b.normalize());
    a.cross(&b).norm().atan2(a.dot(&b).abs()).to_degrees()
}

fn small_k() -> Intrinsics {
    Intrinsics::new(400.0, 400.0, 159.5, 119.5, 320, 240).unwrap()
}

fn identity_pose() -> CameraPose {
    CameraPose::new(Matrix3::identity(), Vector3::zeros()).unwrap()
}

fn fronto_parallel_identity() -> Outcome {
    let k = small_k();
    let plane = ScenePlane::new(
        Vector3::new(-5.0, -5.0, 3.0),
        Vector3::x(),
        Vector3::y(),
        (10.0, 10.0),
        Texture::new(1),
    )
    .unwrap();
    let view = render_view(&[plane], &identity_pose(), &k).unwrap();
    let cfg = RunConfig::default().rectify_config();
    let start = Instant::now();
    let rset = rectify_image(&view.image, &view.depth, &k, &cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    if rset.patches.len() != 1 {
        return Err(format!("{} patches", rset.patches.len()));
    }
    let h = rset.patches[0].homography.matrix() / rset.patches[0].homography.matrix()[(2, 2)];
    let a = h.fixed_view::<2, 2>(0, 0).into_owned();
    let perspective = h[(2, 0)].abs().max(h[(2, 1)].abs());
    let unit_similarity = (a.transpose() * a - nalgebra::Matrix2::identity()).amax();
    let ok =
        perspective <= 1e-6 && unit_similarity <= 1e-6 && a.determinant() > 0.0 && elapsed < Duration::from_secs(1);
    check(
        ok,
        format!(
            "1 patch, perspective {perspective:.1e}, |AᵀA-I| {unit_similarity:.1e}, {:.3} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn normal_accuracy() -> Outcome {
    let k = small_k();
    let tilt = 45f64.to_radians();
    let u = Vector3::x();
    let v = Vector3::new(0.0, tilt.cos(), tilt.sin());
    let center = Vector3::new(0.0, 0.0, 3.0);
    let plane = ScenePlane::new(center - 5.0 * u - 5.0 * v, u, v, (10.0, 10.0), Texture::new(2)).unwrap();
    let truth = u.cross(&v);
    let view = render_view(&[plane], &identity_pose(), &k).unwrap();
    let points = backproject_map(&view.depth, &k).unwrap();
    let normals = estimate_normals(&points, &k, 5).unwrap();
    let (w, h) = normals.dims();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let inside = (y - 2..=y + 2).all(|yy| (x - 2..=x + 2).all(|xx| *view.plane_id.get(xx, yy) == 1));
            if !inside {
                continue;
            }
            let n = normals.get(x, y).ok_or(format!("no normal at ({x}, {y})"))?;
            worst = worst.max(axial_angle_deg(&n, &truth));
            checked += 1;
        }
    }
    let rset = rectify_image(&view.image, &view.depth, &k, &RunConfig::default().rectify_config())
        .map_err(|e| e.to_string())?;
    let refined = rset
        .patches
        .iter()
        .max_by_key(|p| p.patch.pixel_count)
        .map(|p| axial_angle_deg(&p.patch.normal, &truth))
        .ok_or("no patch")?;
    check(
        checked > 0 && worst <= 0.5 && refined <= 0.2,
        format!("{checked} interior pixels, worst {worst:.2e} deg, refined {refined:.2e} deg"),
    )
}

/// Views of every layout used as clustering and rectification oracles.
fn oracle_cases() -> &'static [TwoViewCase] {
    static CASES: OnceLock<Vec<TwoViewCase>> = OnceLock::new();
    CASES.get_or_init(|| {
        let opts = CaseOptions::default();
        let mut cases = Vec::new();
        for (i, layout) in Layout::ALL.iter().enumerate() {
            for (j, sep) in [20.0, 70.0, 130.0].into_iter().enumerate() {
                let seed = 100 + (i * 10 + j) as u64;
                cases.push(two_view_case(sep, 3.0, *layout, seed, &opts).unwrap());
            }
        }
        cases
    })
}

fn views(case: &TwoViewCase) -> [(&unwarp::synthetic::RenderedView, &CameraPose); 2] {
    [(&case.view_a, &case.pose_a), (&case.view_b, &case.pose_b)]
}

fn orthogonality_and_antipodal_invariance() -> Outcome {
    let params = RunConfig::default().rectify_config().orthogonal;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut scenes = 0;
    for case in oracle_cases() {
        for (view, _) in views(case) {
            let points = backproject_map(&view.depth, &case.k).unwrap();
            let normals = estimate_normals(&points, &case.k, 5).unwrap();
            let (frame, assignment) = cluster_normals_orthogonal(&normals, &params);
            let frame = frame.ok_or(format!("no frame for {}", case.layout))?;
            let c = frame.matrix();
            worst = worst.max((c.transpose() * c - Matrix3::identity()).amax());
            let flipped: NormalMap = normals.map(|n| n.map(|n| if rng.random_bool(0.5) { -n } else { n }));
            let (_, reassigned) = cluster_normals_orthogonal(&flipped, &params);
            if reassigned != assignment {
                return Err(format!("assignment changed under sign flips on {}", case.layout));
            }
            scenes += 1;
        }
    }
    check(
        worst <= 1e-9,
        format!("{scenes} views, max |CᵀC-I| {worst:.1e}, assignments unchanged"),
    )
}

fn similarity_residual() -> Outcome {
    let cfg = RunConfig::default().rectify_config();
    let mut worst: f64 = 0.0;
    let mut patches = 0;
    for case in oracle_cases() {
        for (view, pose) in views(case) {
            let rset = rectify_image(&view.image, &view.depth, &case.k, &cfg).map_err(|e| e.to_string())?;
            let mut covered = vec![false; case.planes.len()];
            for p in &rset.patches {
                // Oracle plane under the patch by majority vote.
                let mut votes = vec![0usize; case.planes.len() + 1];
                for (m, id) in p.patch.mask.data().iter().zip(view.plane_id.data()) {
                    if *m {
                        votes[*id as usize] += 1;
                    }
                }
                let id = (1..votes.len()).max_by_key(|&i| votes[i]).unwrap();
                covered[id - 1] = true;
                let g = plane_to_image(&case.planes[id - 1], pose, &case.k).unwrap();
                let m = p.homography.matrix() * g.matrix();
                let m = m / m[(2, 2)];
                worst = worst.max(m[(2, 0)].abs()).max(m[(2, 1)].abs());
                patches += 1;
            }
            // Every plane covering a tenth of the frame must produce a patch.
            let area = view.plane_id.len() as f64;
            for (i, seen) in covered.iter().enumerate() {
                let share = view.plane_id.data().iter().filter(|&&l| l as usize == i + 1).count() as f64 / area;
                if share > 0.1 && !seen {
                    return Err(format!(
                        "plane {i} of {} ({:.0}% of frame) has no patch",
                        case.layout,
                        100.0 * share
                    ));
                }
            }
        }
    }
    check(
        worst <= 1e-6,
        format!("{patches} patches, max bottom-row residual {worst:.1e}"),
    )
}

struct Campaign {
    rectified: BinRates,
    plain: BinRates,
    runtime: Duration,
}

fn run_campaign(depth_noise: f64) -> Campaign {
    let dir = tempfile::tempdir().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let results: Vec<PairResult> = pool.install(|| {
        let specs = binned_campaign(10, &[Layout::SinglePlane, Layout::TwoOrthogonal], CAMPAIGN_SEED);
        assert_eq!(specs.len(), 180);
        let opts = CaseOptions {
            depth_noise,
            ..CaseOptions::default()
        };
        let manifest = write_dataset(dir.path(), &specs, &opts).unwrap();
        let dataset = load_manifest(&manifest).unwrap();
        let cfg = RunConfig::default();
        let mut results = evaluate_pairs(&dataset, &cfg, Mode::Rectified, cfg.seed).unwrap();
        results.extend(evaluate_pairs(&dataset, &cfg, Mode::Plain, cfg.seed).unwrap());
        results
    });
    let runtime = start.elapsed();
    let rates = localization_rates(&results);
    let pick = |mode| rates.iter().find(|r| r.mode == mode).cloned().unwrap();
    Campaign {
        rectified: pick(Mode::Rectified),
        plain: pick(Mode::Plain),
        runtime,
    }
}

fn clean_campaign() -> &'static Campaign {
    static C: OnceLock<Campaign> = OnceLock::new();
    C.get_or_init(|| run_campaign(0.0))
}

fn rate(r: &BinRates, bin: usize) -> Option<f64> {
    r.bins[bin].rate()
}

fn rate_row(r: &BinRates) -> String {
    r.bins
        .iter()
        .map(|b| b.rate().map_or("-".into(), |v| format!("{v:.1}")))
        .collect::<Vec<_>>()
        .join(" ")
}

fn pooled(r: &BinRates, bins: std::ops::RangeInclusive<usize>) -> f64 {
    let (n, ok) = bins.fold((0, 0), |(n, ok), b| (n + r.bins[b].count, ok + r.bins[b].localized));
    ok as f64 / n as f64
}

fn trend_reproduction() -> Outcome {
    let c = clean_campaign();
    let mut problems = Vec::new();
    for bin in 0..NUM_BINS {
        let (Some(rect), plain) = (rate(&c.rectified, bin), rate(&c.plain, bin)) else {
            continue;
        };
        let floor = match bin {
            0..=8 => Some(0.9),
            9..=13 => Some(0.7),
            _ => None,
        };
        if let Some(floor) = floor {
            if rect < floor {
                problems.push(format!("rectified bin {bin} = {rect:.2} < {floor}"));
            }
        }
        if let Some(plain) = plain {
            if rect < plain {
                problems.push(format!("bin {bin}: rectified {rect:.2} < plain {plain:.2}"));
            }
        }
    }
    match rate(&c.plain, 8) {
        Some(p) if p < 0.3 => {}
        other => problems.push(format!("plain bin 8 = {other:?}, expected < 0.3")),
    }
    if c.runtime > Duration::from_secs(600) {
        problems.push(format!("runtime {:.0} s", c.runtime.as_secs_f64()));
    }
    let detail = format!(
        "rectified [{}] plain [{}] {:.0} s",
        rate_row(&c.rectified),
        rate_row(&c.plain),
        c.runtime.as_secs_f64()
    );
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", problems.join("; ")))
    }
}

fn opposite_view_relocalization() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let scene = relocalization_scene(20, RELOC_SEED, &CaseOptions::default()).unwrap();
    write_reloc_scene(dir.path(), &scene).unwrap();
    let queries = load_view_list(&dir.path().join("queries.jsonl")).unwrap();
    let database = load_view_list(&dir.path().join("database.jsonl")).unwrap();
    let cfg = RunConfig::default();
    let top1 = |mode, axis| -> Result<usize, String> {
        let rankings = relocalize(&queries, &database, mode, axis, &cfg, cfg.seed).map_err(|e| e.to_string())?;
        Ok(rankings
            .iter()
            .filter(|r| r.top() == Some(scene.ground_truth[r.query]))
            .count())
    };
    let homography = top1(RelocMode::Homography, Some(scene.ground_axis))?;
    let fundamental = top1(RelocMode::Fundamental, None)?;
    check(
        homography >= 18 && fundamental <= 8,
        format!("homography top-1 {homography}/20, plain fundamental top-1 {fundamental}/20"),
    )
}

fn random_rotation(rng: &mut ChaCha8Rng, max_deg: f64) -> Rotation3<f64> {
    let axis = Unit::new_normalize(Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    Rotation3::from_axis_angle(&axis, rng.random_range(0.0..max_deg).to_radians())
}

/// Angle of `a * bᵀ` from the trace, independent of the library metric.
fn trace_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (((a * b.transpose()).trace() - 1.0) / 2.0)
        .clamp(-1.0, 1.0)
        .acos()
        .to_degrees()
}

fn pose_solver_exactness() -> Outcome {
    let k = Intrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).unwrap();
    let project = |p: &Vector3<f64>| Point2::new(500.0 * p.x / p.z + 319.5, 500.0 * p.y / p.z + 239.5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_r, mut worst_t) = (0f64, 0f64);
    let (mut found, mut planted) = (0usize, 0usize);
    let mut min_recall: f64 = 1.0;
    for case in 0..100u64 {
        let r = random_rotation(&mut rng, 40.0).into_inner();
        let t = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        );
        let mut xa = Vec::new();
        let mut xb = Vec::new();
        while xa.len() < 50 {
            let p = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(4.0..10.0),
            );
            let q = r * p + t;
            if q.z > 0.5 {
                xa.push(project(&p));
                xb.push(project(&q));
            }
        }
        let params = RansacParams::new(1.0, case);
        let fit = estimate_essential_ransac(&xa, &xb, &k, &k, &params).map_err(|e| e.to_string())?;
        let pose = recover_pose(&fit.matrix, &xa, &xb, &k, &k).map_err(|e| e.to_string())?;
        worst_r = worst_r.max(trace_angle_deg(&pose.rotation, &r));
        worst_t = worst_t.max(axial_angle_deg(&pose.translation, &t).max(0.0));
        let dir = pose.translation.normalize().dot(&t.normalize());
        if dir < 0.0 {
            worst_t = 180.0;
        }

        // Same geometry with 30% of the second-view points replaced.
        let mut xb_out = xb.clone();
        let outliers: BTreeSet<usize> = rand::seq::index::sample(&mut rng, 50, 15).into_iter().collect();
        for &i in &outliers {
            xb_out[i] = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        }
        let fit = estimate_essential_ransac(&xa, &xb_out, &k, &k, &RansacParams::new(2.0, case))
            .map_err(|e| e.to_string())?;
        let hits = fit.inliers.iter().filter(|i| !outliers.contains(i)).count();
        found += hits;
        planted += 35;
        min_recall = min_recall.min(hits as f64 / 35.0);
    }
    let recall = found as f64 / planted as f64;
    check(
        worst_r < 1e-3 && worst_t < 1e-2 && recall >= 0.98,
        format!(
            "max rotation error {worst_r:.1e} deg, max translation error {worst_t:.1e} deg, inlier recall {recall:.3} (worst case {min_recall:.2})"
        ),
    )
}

fn metric_and_binning() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let angles: [f64; 10] = [0.0, 1e-4, 0.5, 5.0, 30.0, 90.0, 135.0, 179.0, 179.9, 180.0];
    for &deg in &angles {
        for _ in 0..20 {
            let gt = random_rotation(&mut rng, 180.0);
            let axis = Unit::new_normalize(Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
            let delta = Rotation3::from_axis_angle(&axis, deg.to_radians());
            let est = (delta * gt).into_inner();
            let err = rotation_error_deg(&est, gt.matrix()).map_err(|e| e.to_string())?;
            worst = worst.max((err - deg).abs());
        }
    }
    let bin = |deg: f64| difficulty_bin(Rotation3::from_axis_angle(&Vector3::y_axis(), deg.to_radians()).matrix());
    let bins = [bin(0.0), bin(10.0), bin(179.9)].map(|b| b.map_err(|e| e.to_string()));
    let bins: Vec<usize> = bins.into_iter().collect::<Result<_, _>>()?;
    check(
        worst <= 1e-9 && bins == [0, 1, 17],
        format!("max metric error {worst:.1e} deg, bins for 0/10/179.9 deg = {bins:?}"),
    )
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_unwarp"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{:?}: {}", args, String::from_utf8_lossy(&out.stderr)))
    }
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for name in names {
        let x = std::fs::read(a.join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(name)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{name} differs between thread counts"));
        }
    }
    Ok(())
}

fn thread_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let size = ["--width", "320", "--height", "240", "--focal", "260"];
    let mut synth = vec![
        "synth",
        "--campaign",
        "1",
        "--layout",
        "single_plane,two_orthogonal",
        "--seed",
        "5",
    ];
    synth.extend(size);
    let data = p("data");
    synth.extend(["--out", &data]);
    cli(&synth)?;
    let mut reloc = vec!["synth", "--reloc", "4", "--seed", "5"];
    reloc.extend(size);
    let scene = p("scene");
    reloc.extend(["--out", &scene]);
    cli(&reloc)?;

    let manifest = format!("{data}/manifest.jsonl");
    let queries = format!("{scene}/queries.jsonl");
    let database = format!("{scene}/database.jsonl");
    let truth = format!("{scene}/reloc.json");
    for threads in ["1", "8"] {
        let eval_out = p(&format!("eval{threads}"));
        cli(&[
            "--threads",
            threads,
            "evaluate",
            "--manifest",
            &manifest,
            "--mode",
            "both",
            "--out",
            &eval_out,
        ])?;
        let reloc_out = p(&format!("reloc{threads}"));
        cli(&[
            "--threads",
            threads,
            "relocalize",
            "--queries",
            &queries,
            "--database",
            &database,
            "--truth",
            &truth,
            "--out",
            &reloc_out,
        ])?;
    }
    same_files(
        &dir.path().join("eval1"),
        &dir.path().join("eval8"),
        &["pairs.csv", "rates.csv"],
    )?;
    same_files(
        &dir.path().join("reloc1"),
        &dir.path().join("reloc8"),
        &["rankings.csv", "top1.csv"],
    )?;
    Ok("evaluate and relocalize CSVs byte-identical for 1 and 8 threads".into())
}

fn noise_robustness() -> Outcome {
    let clean = pooled(&clean_campaign().rectified, 0..=8);
    let noisy = run_campaign(0.01);
    let degraded = pooled(&noisy.rectified, 0..=8);
    check(
        clean - degraded <= 0.15,
        format!(
            "rectified bins 0-8: clean {clean:.3}, 1% depth noise {degraded:.3}; noisy rows [{}]",
            rate_row(&noisy.rectified)
        ),
    )
}

fn main() {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        (1, "fronto-parallel identity", fronto_parallel_identity),
        (2, "normal accuracy", normal_accuracy),
        (
            3,
            "orthogonality and antipodal invariance",
            orthogonality_and_antipodal_invariance,
        ),
        (4, "similarity residual", similarity_residual),
        (5, "trend reproduction", trend_reproduction),
        (6, "opposite-view relocalization", opposite_view_relocalization),
        (7, "pose solver exactness", pose_solver_exactness),
        (8, "metric and binning", metric_and_binning),
        (9, "thread-count determinism", thread_determinism),
        (10, "depth noise robustness", noise_robustness),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{id}] {name}: {detail} ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{id}] {name}: {detail} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
