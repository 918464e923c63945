use nalgebra::{DMatrix, Matrix3, Point2, Vector3};

use super::ransac::{self, RansacParams};
use super::{normalizing_transform, null_vector_9, transform};
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;

#[derive(Debug, Clone)]
pub struct EpipolarFit {
    /// Fundamental matrix (pixel coordinates) or essential matrix
    /// (normalized coordinates), unit Frobenius norm.
    pub matrix: Matrix3<f64>,
    pub inliers: Vec<usize>,
}

/// Linear eight-point estimate in Hartley-normalized coordinates. Returns
/// the normalized matrix with the two normalizing transforms; the pixel
/// matrix is `t2^T m t1`.
fn eight_point_normalized(
    x1: &[Point2<f64>],
    x2: &[Point2<f64>],
) -> Result<(Matrix3<f64>, Matrix3<f64>, Matrix3<f64>)> {
    if x1.len() != x2.len() {
        return Err(Error::LengthMismatch(x1.len(), x2.len()));
    }
    if x1.len() < 8 {
        return Err(Error::InsufficientMatches {
            needed: 8,
            got: x1.len(),
        });
    }
    let t1 = normalizing_transform(x1)?;
    let t2 = normalizing_transform(x2)?;
    let mut a = DMatrix::zeros(x1.len(), 9);
    for (i, (p, q)) in x1.iter().zip(x2).enumerate() {
        let (p, q) = (transform(&t1, p), transform(&t2, q));
        let row = [q.x * p.x, q.x * p.y, q.x, q.y * p.x, q.y * p.y, q.y, p.x, p.y, 1.0];
        for (c, v) in row.iter().enumerate() {
            a[(i, c)] = *v;
        }
    }
    let f = Matrix3::from_row_slice(&null_vector_9(a, "eight-point")?);
    Ok((f, t1, t2))
}

fn with_singular_values(m: &Matrix3<f64>, s: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Result<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let (u, v_t) = (
        svd.u.ok_or_else(|| Error::Degenerate("SVD failed".into()))?,
        svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?,
    );
    // nalgebra does not sort singular values.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sorted = Vector3::new(
        svd.singular_values[order[0]],
        svd.singular_values[order[1]],
        svd.singular_values[order[2]],
    );
    let target = s(&sorted);
    let mut d = Matrix3::zeros();
    for (k, &i) in order.iter().enumerate() {
        d[(i, i)] = target[k];
    }
    Ok(u * d * v_t)
}

/// Normalized eight-point fundamental matrix. Rank 2 is enforced in the
/// normalized frame, where the matrix is well conditioned.
pub fn eight_point_fundamental(x1: &[Point2<f64>], x2: &[Point2<f64>]) -> Result<Matrix3<f64>> {
    let (f, t1, t2) = eight_point_normalized(x1, x2)?;
    let f = with_singular_values(&f, |s| Vector3::new(s[0], s[1], 0.0))?;
    let f = t2.transpose() * f * t1;
    Ok(f / f.norm())
}

/// Project onto the essential manifold: singular values `(1, 1, 0)`.
pub fn enforce_essential(e: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    with_singular_values(e, |_| Vector3::new(1.0, 1.0, 0.0))
}

/// Eight-point essential matrix from normalized image coordinates.
pub fn eight_point_essential(x1: &[Point2<f64>], x2: &[Point2<f64>]) -> Result<Matrix3<f64>> {
    let (e, t1, t2) = eight_point_normalized(x1, x2)?;
    let e = t2.transpose() * e * t1;
    enforce_essential(&(e / e.norm()))
}

/// First-order geometric distance of a correspondence to the epipolar
/// constraint, in the units of the input coordinates.
pub fn sampson_distance(m: &Matrix3<f64>, p: &Point2<f64>, q: &Point2<f64>) -> f64 {
    let x1 = Vector3::new(p.x, p.y, 1.0);
    let x2 = Vector3::new(q.x, q.y, 1.0);
    let fx1 = m * x1;
    let ftx2 = m.transpose() * x2;
    let num = x2.dot(&fx1);
    let den = fx1.x * fx1.x + fx1.y * fx1.y + ftx2.x * ftx2.x + ftx2.y * ftx2.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num.abs() / den.sqrt()
}

fn epipolar_ransac(
    x1: &[Point2<f64>],
    x2: &[Point2<f64>],
    threshold: f64,
    params: &RansacParams,
    solve: impl Fn(&[Point2<f64>], &[Point2<f64>]) -> Result<Matrix3<f64>>,
) -> Result<EpipolarFit> {
    if x1.len() != x2.len() {
        return Err(Error::LengthMismatch(x1.len(), x2.len()));
    }
    if x1.len() < 8 {
        return Err(Error::InsufficientMatches {
            needed: 8,
            got: x1.len(),
        });
    }
    let fit = |idx: &[usize]| -> Option<Matrix3<f64>> {
        let a: Vec<_> = idx.iter().map(|&i| x1[i]).collect();
        let b: Vec<_> = idx.iter().map(|&i| x2[i]).collect();
        solve(&a, &b).ok()
    };
    let residual = |m: &Matrix3<f64>, i: usize| sampson_distance(m, &x1[i], &x2[i]);
    let p = RansacParams { threshold, ..*params };
    let (best, _) = ransac::run(x1.len(), 8, &p, fit, residual);
    let best = best.ok_or(Error::NoConsensus)?;
    if best.inliers.len() < 8 {
        return Err(Error::NoConsensus);
    }
    let mut model = best.model;
    let mut inliers = best.inliers;
    for _ in 0..5 {
        let Some(refit) = fit(&inliers) else { break };
        let (next, _) = ransac::score(&refit, x1.len(), threshold, &residual);
        if next.len() < inliers.len() {
            break;
        }
        let done = next == inliers;
        model = refit;
        inliers = next;
        if done {
            break;
        }
    }
    Ok(EpipolarFit { matrix: model, inliers })
}

/// RANSAC essential matrix. Points are in pixels; `params.threshold` is the
/// Sampson distance in pixels, converted through the mean focal length.
pub fn estimate_essential_ransac(
    xa: &[Point2<f64>],
    xb: &[Point2<f64>],
    ka: &Intrinsics,
    kb: &Intrinsics,
    params: &RansacParams,
) -> Result<EpipolarFit> {
    let na: Vec<_> = xa.iter().map(|p| normalize(ka, p)).collect();
    let nb: Vec<_> = xb.iter().map(|p| normalize(kb, p)).collect();
    let focal = 0.5 * (ka.mean_focal() + kb.mean_focal());
    epipolar_ransac(&na, &nb, params.threshold / focal, params, eight_point_essential)
}

/// RANSAC fundamental matrix on pixel coordinates with a pixel Sampson
/// threshold.
pub fn estimate_fundamental_ransac(
    xa: &[Point2<f64>],
    xb: &[Point2<f64>],
    params: &RansacParams,
) -> Result<EpipolarFit> {
    epipolar_ransac(xa, xb, params.threshold, params, eight_point_fundamental)
}

pub(crate) fn normalize(k: &Intrinsics, p: &Point2<f64>) -> Point2<f64> {
    let v = k.unproject(p.x, p.y);
    Point2::new(v.x, v.y)
}
