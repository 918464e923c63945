use nalgebra::{DMatrix, Matrix3, Point2};

use super::ransac::{self, RansacParams};
use super::{normalizing_transform, null_vector_9, transform};
use crate::error::{Error, Result};
use crate::rectification::Homography;

#[derive(Debug, Clone)]
pub struct HomographyFit {
    pub homography: Homography,
    /// Indices into the input correspondences, ascending.
    pub inliers: Vec<usize>,
}

fn collinear(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> bool {
    let area = (b - a).perp(&(c - a)).abs();
    let scale = (b - a)
        .norm_squared()
        .max((c - a).norm_squared())
        .max((c - b).norm_squared());
    area <= 1e-9 * scale
}

fn any_collinear_triple(pts: &[Point2<f64>]) -> bool {
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                if collinear(&pts[i], &pts[j], &pts[k]) {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalized direct linear transform from at least four correspondences.
pub fn dlt_homography(src: &[Point2<f64>], dst: &[Point2<f64>]) -> Result<Homography> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 4 {
        return Err(Error::InsufficientMatches {
            needed: 4,
            got: src.len(),
        });
    }
    if src.len() == 4 && (any_collinear_triple(src) || any_collinear_triple(dst)) {
        return Err(Error::Degenerate("three collinear points in a minimal sample".into()));
    }
    let ts = normalizing_transform(src)?;
    let td = normalizing_transform(dst)?;
    let mut a = DMatrix::zeros(2 * src.len(), 9);
    for (i, (p, q)) in src.iter().zip(dst).enumerate() {
        let (p, q) = (transform(&ts, p), transform(&td, q));
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let h = null_vector_9(a, "homography")?;
    let hn = Matrix3::from_row_slice(&h);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("normalization not invertible".into()))?;
    Homography::new(td_inv * hn * ts)
}

/// `max(|H p - q|, |H^-1 q - p|)`; infinite when either side maps to
/// infinity.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, p: &Point2<f64>, q: &Point2<f64>) -> f64 {
    let fwd = h
        .apply(p.x, p.y)
        .map(|(x, y)| ((x - q.x).powi(2) + (y - q.y).powi(2)).sqrt());
    let bwd = h_inv
        .apply(q.x, q.y)
        .map(|(x, y)| ((x - p.x).powi(2) + (y - p.y).powi(2)).sqrt());
    match (fwd, bwd) {
        (Some(f), Some(b)) => f.max(b),
        _ => f64::INFINITY,
    }
}

/// RANSAC over 4-point samples with a final least-squares refit on the
/// consensus set (repeated while the set keeps growing).
pub fn estimate_homography_ransac(
    src: &[Point2<f64>],
    dst: &[Point2<f64>],
    params: &RansacParams,
) -> Result<HomographyFit> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 4 {
        return Err(Error::InsufficientMatches {
            needed: 4,
            got: src.len(),
        });
    }
    let fit = |idx: &[usize]| -> Option<(Homography, Homography)> {
        let s: Vec<_> = idx.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = idx.iter().map(|&i| dst[i]).collect();
        let h = dlt_homography(&s, &d).ok()?;
        let hi = h.inverse().ok()?;
        Some((h, hi))
    };
    let residual = |m: &(Homography, Homography), i: usize| symmetric_transfer_error(&m.0, &m.1, &src[i], &dst[i]);
    let (best, degenerate) = ransac::run(src.len(), 4, params, fit, residual);
    let Some(best) = best else {
        return Err(if degenerate {
            Error::Degenerate("every homography sample was degenerate".into())
        } else {
            Error::NoConsensus
        });
    };
    if best.inliers.len() < 4 {
        return Err(Error::NoConsensus);
    }
    let mut model = best.model;
    let mut inliers = best.inliers;
    for _ in 0..5 {
        let Some(refit) = fit(&inliers) else { break };
        let (next, _) = ransac::score(&refit, src.len(), params.threshold, &residual);
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
    Ok(HomographyFit {
        homography: model.0,
        inliers,
    })
}
