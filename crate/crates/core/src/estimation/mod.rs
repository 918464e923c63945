//! Two-view estimation: descriptor matching, RANSAC homography and
//! essential/fundamental fitting, pose recovery and the rotation metric.

mod epipolar;
mod homography;
mod matching;
mod pose;
mod ransac;

use nalgebra::{DMatrix, Matrix3, Point2, Vector3};

use crate::error::{Error, Result};
use crate::features::Keypoint;

pub use epipolar::{
    eight_point_essential, eight_point_fundamental, enforce_essential, estimate_essential_ransac,
    estimate_fundamental_ransac, sampson_distance, EpipolarFit,
};
pub use homography::{dlt_homography, estimate_homography_ransac, symmetric_transfer_error, HomographyFit};
pub use matching::{match_descriptors, write_matches_csv, Match, MatchSet};
pub use pose::{
    decompose_homography, estimate_relative_pose, recover_pose, HomographySolution, PoseEstimate, PoseModel, PoseParams,
};
pub use ransac::{derive_seed, splitmix64, RansacParams};

/// Relative pose mapping camera-A coordinates into camera B:
/// `X_b = R X_a + t`, with `t` of unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        let n = translation.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Degenerate("zero translation".into()));
        }
        Ok(Self {
            rotation,
            translation: translation / n,
        })
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    if !(ortho < 1e-6) || (r.determinant() - 1.0).abs() > 1e-6 {
        return Err(Error::NotARotation);
    }
    Ok(())
}

/// Angle of the smallest rotation taking `r_gt` onto `r_est`, in degrees.
///
/// Evaluated as `atan2(sin, cos)` of the relative rotation, which equals
/// the arccosine of `(trace - 1) / 2` but keeps full precision near 0 and
/// 180 degrees.
pub fn rotation_error_deg(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> Result<f64> {
    check_rotation(r_est)?;
    check_rotation(r_gt)?;
    let m = r_est * r_gt.transpose();
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin = (axis.norm() / 2.0).min(1.0);
    Ok(sin.atan2(cos).to_degrees())
}

/// Angle between two translation directions, in degrees.
pub fn translation_error_deg(t_est: &Vector3<f64>, t_gt: &Vector3<f64>) -> f64 {
    let (a, b) = (t_est.normalize(), t_gt.normalize());
    a.cross(&b).norm().atan2(a.dot(&b)).to_degrees()
}

/// Positions of matched keypoints as parallel point lists.
pub fn matched_points(a: &[Keypoint], b: &[Keypoint], matches: &MatchSet) -> (Vec<Point2<f64>>, Vec<Point2<f64>>) {
    matches
        .matches
        .iter()
        .map(|m| {
            let (ka, kb) = (&a[m.a], &b[m.b]);
            (Point2::new(ka.x, ka.y), Point2::new(kb.x, kb.y))
        })
        .unzip()
}

/// Similarity that moves the centroid to the origin and the mean distance
/// to `sqrt(2)`.
pub(crate) fn normalizing_transform(pts: &[Point2<f64>]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    let (cx, cy) = (cx / n, cy / n);
    let mean = pts
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(mean > 1e-12) {
        return Err(Error::Degenerate("coincident points".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

pub(crate) fn transform(t: &Matrix3<f64>, p: &Point2<f64>) -> Point2<f64> {
    let v = t * Vector3::new(p.x, p.y, 1.0);
    Point2::new(v.x / v.z, v.y / v.z)
}

/// Right null vector of `a` (9 columns), failing when the null space is not
/// one-dimensional.
pub(crate) fn null_vector_9(a: DMatrix<f64>, what: &str) -> Result<[f64; 9]> {
    let mut a = a;
    if a.nrows() < 9 {
        a = a.resize_vertically(9, 0.0);
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Degenerate(format!("{what}: SVD failed")))?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let (s0, s1, smax) = (
        svd.singular_values[order[0]],
        svd.singular_values[order[1]],
        svd.singular_values[order[8]],
    );
    if !(smax > 0.0) || s1 <= 1e-10 * smax || !s0.is_finite() {
        return Err(Error::Degenerate(format!("{what}: rank-deficient system")));
    }
    let row = v_t.row(order[0]);
    let mut out = [0.0; 9];
    out.iter_mut().zip(row.iter()).for_each(|(o, v)| *o = *v);
    Ok(out)
}
