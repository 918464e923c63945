//! Pinhole camera math: back-projection, viewing rays and per-pixel surface
//! normals from depth.
//!
//! Camera frame is x-right, y-down, z-forward. Normals are oriented toward
//! the camera, i.e. `n . r < 0` for the viewing ray `r` of their pixel.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidIntrinsics("principal point must be finite".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("image dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Normalized image coordinates `K^-1 (u, v, 1)`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Pixel coordinates of a camera-frame point; `None` behind the camera.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Mean focal length, used to express normalized-plane residuals in pixels.
    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }
}

/// Back-project pixel `(u, v)` at depth `d` into the camera frame.
pub fn backproject(u: f64, v: f64, d: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::InvalidDepth(d));
    }
    Ok(Vector3::new(d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d))
}

/// Unit viewing ray through pixel `(u, v)`.
pub fn viewing_ray(k: &Intrinsics, u: f64, v: f64) -> Vector3<f64> {
    k.unproject(u, v).normalize()
}

/// Angle in degrees between the surface normal and the reversed viewing ray.
pub fn incidence_angle(n: &Vector3<f64>, r: &Vector3<f64>) -> Result<f64> {
    let c = n.dot(r);
    if c >= 0.0 {
        return Err(Error::Orientation(c));
    }
    Ok((-c).min(1.0).acos().to_degrees())
}

/// Dense depth; a pixel is valid when its depth is finite and positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(pub Raster<f64>);

impl DepthMap {
    pub fn new(raster: Raster<f64>) -> Self {
        Self(raster)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.0.height()
    }

    #[inline]
    pub fn depth(&self, x: usize, y: usize) -> Option<f64> {
        let d = *self.0.get(x, y);
        (d.is_finite() && d > 0.0).then_some(d)
    }

    pub fn raster(&self) -> &Raster<f64> {
        &self.0
    }

    pub fn valid_count(&self) -> usize {
        self.0.data().iter().filter(|d| d.is_finite() && **d > 0.0).count()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.map(|d| d * s))
    }
}

/// Camera-frame 3-D point per pixel; `None` where depth is invalid.
pub type PointGrid = Raster<Option<Vector3<f64>>>;

/// Unit camera-facing normal per pixel; `None` where no plane could be fit.
pub type NormalMap = Raster<Option<Vector3<f64>>>;

pub fn backproject_map(depth: &DepthMap, k: &Intrinsics) -> Result<PointGrid> {
    if depth.0.dims() != k.dims() {
        return Err(Error::DimensionMismatch {
            expected: k.dims(),
            actual: depth.0.dims(),
        });
    }
    Ok(Raster::from_fn(k.width, k.height, |x, y| {
        depth
            .depth(x, y)
            .map(|d| Vector3::new(d * (x as f64 - k.cx) / k.fx, d * (y as f64 - k.cy) / k.fy, d))
    }))
}

/// Fewest valid window points accepted for a plane fit.
pub const MIN_FIT_POINTS: usize = 6;

/// Per-pixel total-least-squares plane fit over a `window x window`
/// neighbourhood of back-projected points.
pub fn estimate_normals(points: &PointGrid, k: &Intrinsics, window: usize) -> Result<NormalMap> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "normal window must be odd and >= 3, got {window}"
        )));
    }
    let (w, h) = points.dims();
    let half = (window / 2) as i64;
    let rows: Vec<Vec<Option<Vector3<f64>>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| fit_window_normal(points, k, x as i64, y as i64, half))
                .collect()
        })
        .collect();
    Raster::from_vec(w, h, rows.into_iter().flatten().collect())
}

/// Centered covariance and point count of the valid points in a window.
fn window_covariance(points: &PointGrid, x: i64, y: i64, half: i64) -> Option<(Matrix3<f64>, usize)> {
    // Accumulate around a reference point to keep the covariance well conditioned.
    let mut reference: Option<Vector3<f64>> = *points.get(x as usize, y as usize);
    let mut n = 0usize;
    let mut sum = Vector3::zeros();
    let mut outer = Matrix3::zeros();
    for yy in (y - half)..=(y + half) {
        for xx in (x - half)..=(x + half) {
            if let Some(Some(p)) = points.try_get(xx, yy) {
                let r = *reference.get_or_insert(*p);
                let q = p - r;
                n += 1;
                sum += q;
                outer += q * q.transpose();
            }
        }
    }
    if n < MIN_FIT_POINTS {
        return None;
    }
    let nf = n as f64;
    let mean = sum / nf;
    Some((outer / nf - mean * mean.transpose(), n))
}

/// Collinear or coincident windows do not define a plane.
fn is_planar_spread(eig: &[f64; 3]) -> bool {
    eig[1] > 1e-12 * (eig[0] + eig[1] + eig[2]).max(f64::MIN_POSITIVE)
}

fn fit_window_normal(points: &PointGrid, k: &Intrinsics, x: i64, y: i64, half: i64) -> Option<Vector3<f64>> {
    let (cov, _) = window_covariance(points, x, y, half)?;
    let (normal, eig) = smallest_eigenvector(&cov)?;
    if !is_planar_spread(&eig) {
        return None;
    }
    let ray = k.unproject(x as f64, y as f64);
    let mut normal = normal.normalize();
    if normal.dot(&ray) > 0.0 {
        normal = -normal;
    }
    Some(normal)
}

/// Median, over a sparse pixel grid, of the standard error in degrees of
/// the window plane fits: off-plane spread over in-plane spread, shrinking
/// with the square root of the point count. Zero on exact planes.
pub fn normal_uncertainty_deg(points: &PointGrid, window: usize) -> Option<f64> {
    let (w, h) = points.dims();
    let stride = (((w * h) as f64 / 4000.0).sqrt() as usize).max(1);
    let half = (window / 2) as i64;
    let mut errs: Vec<f64> = (0..h)
        .step_by(stride)
        .flat_map(|y| (0..w).step_by(stride).map(move |x| (x, y)))
        .filter_map(|(x, y)| {
            let (cov, n) = window_covariance(points, x as i64, y as i64, half)?;
            let (_, eig) = smallest_eigenvector(&cov)?;
            is_planar_spread(&eig).then(|| (eig[0].max(0.0) / (eig[1] * n as f64)).sqrt().atan().to_degrees())
        })
        .collect();
    if errs.is_empty() {
        return None;
    }
    let mid = errs.len() / 2;
    Some(*errs.select_nth_unstable_by(mid, f64::total_cmp).1)
}

/// Smallest odd window from `base` up to `max` whose median fit uncertainty
/// is at most `max_uncertainty_deg`. Clean depth keeps `base`, noisy depth
/// gets a wider support. If even `max` stays above twice the target the
/// depth is not planar at these scales and `base` is returned, since wide
/// windows over structured clutter yield consistent but spurious normals.
pub fn select_normal_window(points: &PointGrid, base: usize, max: usize, max_uncertainty_deg: f64) -> usize {
    let mut window = base;
    while window < max {
        match normal_uncertainty_deg(points, window) {
            Some(err) if err > max_uncertainty_deg => window += 2,
            _ => return window,
        }
    }
    match normal_uncertainty_deg(points, window) {
        Some(err) if err > 2.0 * max_uncertainty_deg => base,
        _ => window.max(base),
    }
}

/// Eigenvector of the smallest eigenvalue of a symmetric 3x3 matrix together
/// with the eigenvalues sorted ascending.
pub(crate) fn smallest_eigenvector(m: &Matrix3<f64>) -> Option<(Vector3<f64>, [f64; 3])> {
    let (vecs, vals) = sorted_eigen(m)?;
    Some((vecs[0], vals))
}

/// Eigenvector of the largest eigenvalue of a symmetric 3x3 matrix together
/// with the eigenvalues sorted ascending.
pub(crate) fn principal_eigenvector(m: &Matrix3<f64>) -> Option<(Vector3<f64>, [f64; 3])> {
    let (vecs, vals) = sorted_eigen(m)?;
    Some((vecs[2], vals))
}

/// Eigen-decomposition of a symmetric 3x3 matrix, eigenpairs sorted by
/// ascending eigenvalue.
pub(crate) fn sorted_eigen(m: &Matrix3<f64>) -> Option<([Vector3<f64>; 3], [f64; 3])> {
    if !m.iter().all(|v| v.is_finite()) {
        return None;
    }
    let eig = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vecs = order.map(|i| eig.eigenvectors.column(i).into_owned());
    let vals = order.map(|i| eig.eigenvalues[i]);
    Some((vecs, vals))
}
