use nalgebra::{Matrix3, Point2, Vector3};

use super::epipolar::{estimate_essential_ransac, normalize};
use super::homography::estimate_homography_ransac;
use super::ransac::RansacParams;
use super::RelativePose;
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::rectification::Homography;

/// Which two-view model produced a pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseModel {
    Essential,
    Homography,
}

impl PoseModel {
    pub fn as_str(self) -> &'static str {
        match self {
            PoseModel::Essential => "essential",
            PoseModel::Homography => "homography",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub pose: RelativePose,
    pub model: PoseModel,
    pub inliers: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseParams {
    pub sampson_px: f64,
    /// Transfer-error threshold of the competing plane model.
    pub homography_px: f64,
    /// Prefer the plane model when it explains at least this fraction of
    /// the epipolar inlier count.
    pub planar_ratio: f64,
    pub confidence: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for PoseParams {
    fn default() -> Self {
        Self {
            sampson_px: 2.0,
            homography_px: 4.0,
            planar_ratio: 0.8,
            confidence: 0.999,
            max_iters: 10_000,
            seed: 0,
        }
    }
}

/// Midpoint triangulation; returns the point in camera-A coordinates, or
/// `None` for (near) parallel rays.
fn triangulate_midpoint(r: &Matrix3<f64>, t: &Vector3<f64>, a: &Point2<f64>, b: &Point2<f64>) -> Option<Vector3<f64>> {
    let da = Vector3::new(a.x, a.y, 1.0);
    let cb = -r.transpose() * t;
    let db = r.transpose() * Vector3::new(b.x, b.y, 1.0);
    let (aa, ab, bb) = (da.dot(&da), da.dot(&db), db.dot(&db));
    let (d, e) = (da.dot(&cb), db.dot(&cb));
    let det = ab * ab - aa * bb;
    if det.abs() < 1e-12 * aa * bb {
        return None;
    }
    let la = (-d * bb + ab * e) / det;
    let lb = (aa * e - ab * d) / det;
    Some((da * la + cb + db * lb) * 0.5)
}

fn cheirality_count(r: &Matrix3<f64>, t: &Vector3<f64>, xa: &[Point2<f64>], xb: &[Point2<f64>]) -> usize {
    xa.iter()
        .zip(xb)
        .filter(|(a, b)| triangulate_midpoint(r, t, a, b).is_some_and(|x| x.z > 0.0 && (r * x + t).z > 0.0))
        .count()
}

/// Pose from an essential matrix: the four `(R, t)` factorizations are
/// scored by how many correspondences triangulate in front of both cameras.
/// Points are in pixels.
pub fn recover_pose(
    e: &Matrix3<f64>,
    xa: &[Point2<f64>],
    xb: &[Point2<f64>],
    ka: &Intrinsics,
    kb: &Intrinsics,
) -> Result<RelativePose> {
    if xa.is_empty() || xa.len() != xb.len() {
        return Err(Error::InsufficientMatches {
            needed: 1,
            got: xa.len().min(xb.len()),
        });
    }
    let na: Vec<_> = xa.iter().map(|p| normalize(ka, p)).collect();
    let nb: Vec<_> = xb.iter().map(|p| normalize(kb, p)).collect();
    let svd = e.svd(true, true);
    let (mut u, mut v_t) = (
        svd.u.ok_or_else(|| Error::Degenerate("SVD failed".into()))?,
        svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?,
    );
    // Move the null direction to the last column.
    let imin = svd.singular_values.imin();
    if imin != 2 {
        u.swap_columns(imin, 2);
        v_t.swap_rows(imin, 2);
    }
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v_t.determinant() < 0.0 {
        v_t.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t: Vector3<f64> = u.column(2).into();
    let candidates = [
        (u * w * v_t, t),
        (u * w * v_t, -t),
        (u * w.transpose() * v_t, t),
        (u * w.transpose() * v_t, -t),
    ];
    let counts: Vec<usize> = candidates
        .iter()
        .map(|(r, t)| cheirality_count(r, t, &na, &nb))
        .collect();
    let best = *counts.iter().max().expect("four candidates");
    if best == 0 || counts.iter().filter(|&&c| c == best).count() > 1 {
        return Err(Error::AmbiguousPose);
    }
    let i = counts.iter().position(|&c| c == best).expect("max exists");
    let (r, t) = candidates[i];
    RelativePose::new(r, t)
}

/// One factorization `H ~ R + t n^T / d` of a calibrated plane homography.
/// `normal` satisfies `normal . X = d > 0` for plane points `X` in camera A,
/// so it points away from camera A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographySolution {
    pub rotation: Matrix3<f64>,
    /// Translation divided by the plane distance.
    pub translation: Vector3<f64>,
    pub normal: Vector3<f64>,
}

/// Decompose a pixel homography (A to B) into the physically possible
/// solutions: the four algebraic factorizations restricted to those with
/// the correspondences in front of the plane's visible side.
pub fn decompose_homography(
    h: &Homography,
    xa: &[Point2<f64>],
    xb: &[Point2<f64>],
    ka: &Intrinsics,
    kb: &Intrinsics,
) -> Result<Vec<HomographySolution>> {
    let mut hc = kb.inverse_matrix() * h.matrix() * ka.matrix();
    let sv = hc.svd(false, false).singular_values;
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if !(s[1] > 0.0) {
        return Err(Error::Degenerate("singular calibrated homography".into()));
    }
    hc /= s[1];
    let na: Vec<_> = xa.iter().map(|p| normalize(ka, p)).collect();
    let nb: Vec<_> = xb.iter().map(|p| normalize(kb, p)).collect();
    let positive = na
        .iter()
        .zip(&nb)
        .filter(|(a, b)| Vector3::new(b.x, b.y, 1.0).dot(&(hc * Vector3::new(a.x, a.y, 1.0))) > 0.0)
        .count();
    if 2 * positive < na.len() {
        hc = -hc;
    }

    // Right singular vectors of H are the eigenvectors of H^T H.
    let svd = hc.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s1 = svd.singular_values[order[0]].powi(2);
    let s3 = svd.singular_values[order[2]].powi(2);
    if s1 - s3 < 1e-12 {
        return Err(Error::Degenerate("homography is a pure rotation".into()));
    }
    let v1: Vector3<f64> = v_t.row(order[0]).transpose();
    let v2: Vector3<f64> = v_t.row(order[1]).transpose();
    let v3: Vector3<f64> = v_t.row(order[2]).transpose();
    let den = (s1 - s3).sqrt();
    let a = (1.0 - s3).max(0.0).sqrt();
    let b = (s1 - 1.0).max(0.0).sqrt();
    let mut out = Vec::new();
    for u in [(v1 * a + v3 * b) / den, (v1 * a - v3 * b) / den] {
        let um = Matrix3::from_columns(&[v2, u, v2.cross(&u)]);
        let (hv2, hu) = (hc * v2, hc * u);
        let wm = Matrix3::from_columns(&[hv2, hu, hv2.cross(&hu)]);
        let r = wm * um.transpose();
        let n = v2.cross(&u);
        let t = (hc - r) * n;
        out.push(HomographySolution {
            rotation: r,
            translation: t,
            normal: n,
        });
        out.push(HomographySolution {
            rotation: r,
            translation: -t,
            normal: -n,
        });
    }
    let visible: Vec<_> = out
        .into_iter()
        .filter(|s| {
            let front = na
                .iter()
                .filter(|a| s.normal.dot(&Vector3::new(a.x, a.y, 1.0)) > 0.0)
                .count();
            2 * front > na.len()
        })
        .collect();
    if visible.is_empty() {
        return Err(Error::AmbiguousPose);
    }
    Ok(visible)
}

/// Relative pose with planar-scene model selection: an essential matrix is
/// fitted, and when a single homography explains nearly as many matches the
/// homography is decomposed instead (the epipolar model is ill-posed on a
/// dominant plane). `normals_a` optionally gives a camera-facing surface
/// normal in camera A per correspondence, used to pick between the plane
/// solutions.
pub fn estimate_relative_pose(
    xa: &[Point2<f64>],
    xb: &[Point2<f64>],
    ka: &Intrinsics,
    kb: &Intrinsics,
    params: &PoseParams,
    normals_a: Option<&[Option<Vector3<f64>>]>,
) -> Result<PoseEstimate> {
    if xa.len() < 8 {
        return Err(Error::InsufficientMatches {
            needed: 8,
            got: xa.len(),
        });
    }
    let rp = |threshold, salt: u64| RansacParams {
        threshold,
        confidence: params.confidence,
        max_iters: params.max_iters,
        seed: params.seed ^ salt,
    };
    let essential = estimate_essential_ransac(xa, xb, ka, kb, &rp(params.sampson_px, 0));
    let plane = estimate_homography_ransac(xa, xb, &rp(params.homography_px, 0x9e37_79b9_7f4a_7c15));

    let e_count = essential.as_ref().map_or(0, |f| f.inliers.len());
    let use_plane = match &plane {
        Ok(p) => p.inliers.len() >= 8 && p.inliers.len() as f64 >= params.planar_ratio * e_count as f64,
        Err(_) => false,
    };
    if use_plane {
        let p = plane.as_ref().expect("checked");
        if let Ok(pose) = pose_from_plane(&p.homography, &p.inliers, xa, xb, ka, kb, normals_a) {
            return Ok(PoseEstimate {
                pose,
                model: PoseModel::Homography,
                inliers: p.inliers.clone(),
            });
        }
    }
    let fit = essential?;
    let (ia, ib): (Vec<_>, Vec<_>) = fit.inliers.iter().map(|&i| (xa[i], xb[i])).unzip();
    let pose = recover_pose(&fit.matrix, &ia, &ib, ka, kb)?;
    Ok(PoseEstimate {
        pose,
        model: PoseModel::Essential,
        inliers: fit.inliers,
    })
}

fn pose_from_plane(
    h: &Homography,
    inliers: &[usize],
    xa: &[Point2<f64>],
    xb: &[Point2<f64>],
    ka: &Intrinsics,
    kb: &Intrinsics,
    normals_a: Option<&[Option<Vector3<f64>>]>,
) -> Result<RelativePose> {
    let (ia, ib): (Vec<_>, Vec<_>) = inliers.iter().map(|&i| (xa[i], xb[i])).unzip();
    let sols = decompose_homography(h, &ia, &ib, ka, kb)?;
    let hint = normals_a.and_then(|ns| {
        let picked: Vec<Vector3<f64>> = inliers.iter().filter_map(|&i| ns.get(i).copied().flatten()).collect();
        if picked.is_empty() {
            return None;
        }
        // Camera-facing normals point opposite to the plane-side convention.
        let sum: Vector3<f64> = picked.iter().sum();
        (sum.norm() > 0.0).then(|| -sum.normalize())
    });
    let best = match hint {
        Some(n) => sols
            .iter()
            .max_by(|a, b| a.normal.dot(&n).total_cmp(&b.normal.dot(&n)))
            .expect("non-empty"),
        None => &sols[0],
    };
    RelativePose::new(best.rotation, best.translation)
}
