//! Per-patch rectifying homographies: a virtual camera sharing the original
//! camera center is rotated (by the smallest possible rotation) until it faces
//! the patch plane head-on, and the patch is resampled into that view.

use nalgebra::{Matrix2, Matrix3, Rotation3, Unit, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ClusteringMode;
use crate::error::{Error, Result};
use crate::features::Keypoint;
use crate::geometry::{backproject_map, estimate_normals, select_normal_window, DepthMap, Intrinsics, NormalMap};
use crate::raster::{GrayImage, Mask, Raster};
use crate::segmentation::{
    cluster_normals_histogram, cluster_normals_orthogonal, connected_components, largest_component,
    refine_patch_normal, refit_patch_plane, AssignmentMap, HistogramParams, OrthogonalParams, PlanarPatch,
};

/// Projective map between pixel planes, stored with `H[2][2] = 1` whenever
/// that entry is not (numerically) zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("non-finite homography".into()));
        }
        let scale = m.amax();
        if scale == 0.0 {
            return Err(Error::Degenerate("zero homography".into()));
        }
        let m = if m[(2, 2)].abs() > 1e-12 * scale {
            m / m[(2, 2)]
        } else {
            m / scale
        };
        if m.determinant().abs() <= 1e-12 {
            return Err(Error::Degenerate("singular homography".into()));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    pub fn scaling(s: f64) -> Result<Self> {
        Self::new(Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .0
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("homography not invertible".into()))?;
        Self::new(inv)
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::new(self.0 * other.0)
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w.abs() < 1e-15 {
            return None;
        }
        Some((
            (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w,
            (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w,
        ))
    }

    /// Homogeneous scale `w` of the mapped point.
    #[inline]
    pub fn w(&self, x: f64, y: f64) -> f64 {
        self.0[(2, 0)] * x + self.0[(2, 1)] * y + self.0[(2, 2)]
    }

    /// Jacobian of the dehomogenized map at `(x, y)`.
    pub fn jacobian(&self, x: f64, y: f64) -> Option<Matrix2<f64>> {
        let m = &self.0;
        let w = self.w(x, y);
        if w.abs() < 1e-15 {
            return None;
        }
        let (u, v) = self.apply(x, y)?;
        Some(
            Matrix2::new(
                m[(0, 0)] - u * m[(2, 0)],
                m[(0, 1)] - u * m[(2, 1)],
                m[(1, 0)] - v * m[(2, 0)],
                m[(1, 1)] - v * m[(2, 1)],
            ) / w,
        )
    }

    /// Local area magnification `|det J|` at `(x, y)`.
    #[inline]
    pub fn area_scale(&self, x: f64, y: f64) -> f64 {
        let w = self.w(x, y);
        (self.0.determinant() / (w * w * w)).abs()
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(v))
    }
}

/// Smallest rotation taking the desired optical axis `-n` onto `+z`.
pub fn rectifying_rotation(n: &Vector3<f64>) -> Result<Rotation3<f64>> {
    let d = -n.normalize();
    let ez = Vector3::z();
    let cos = d.dot(&ez).clamp(-1.0, 1.0);
    let axis = d.cross(&ez);
    let sin = axis.norm();
    if sin < 1e-15 {
        if cos > 0.0 {
            return Ok(Rotation3::identity());
        }
        return Err(Error::Degenerate(
            "normal points away from the camera along the optical axis".into(),
        ));
    }
    Ok(Rotation3::from_axis_angle(
        &Unit::new_unchecked(axis / sin),
        sin.atan2(cos),
    ))
}

/// Drop mask pixels seen at more than `theta_max_deg` incidence (or from
/// behind), keeping the largest remaining 4-connected piece.
pub fn glancing_mask(mask: &Mask, normal: &Vector3<f64>, k: &Intrinsics, theta_max_deg: f64) -> Option<Mask> {
    let cos_max = theta_max_deg.to_radians().cos();
    let trimmed = Raster::from_fn(mask.width(), mask.height(), |x, y| {
        if !*mask.get(x, y) {
            return false;
        }
        let r = k.unproject(x as f64, y as f64).normalize();
        let c = -normal.dot(&r);
        c > 0.0 && c > cos_max
    });
    if trimmed.count() == 0 {
        return None;
    }
    largest_component(&trimmed)
}

/// Output framing of a rectified patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectFraming {
    pub homography: Homography,
    pub width: usize,
    pub height: usize,
    pub scale: f64,
}

/// `H = S * K R K^-1` where the similarity `S` preserves the patch area (up
/// to the output clamp) and moves the warped bounding box to the origin.
pub fn rectifying_homography(
    k: &Intrinsics,
    rotation: &Rotation3<f64>,
    mask: &Mask,
    max_output_dim: usize,
) -> Result<RectFraming> {
    let raw = k.matrix() * rotation.matrix() * k.inverse_matrix();
    let base = Homography::new(raw)?;
    // Depth sign in the virtual view; taken before normalization, which may
    // flip the sign of the whole matrix.
    let depth_row = raw.row(2).transpose();
    let pixels: Vec<(f64, f64)> = (0..mask.height())
        .flat_map(|y| (0..mask.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| *mask.get(x, y))
        .map(|(x, y)| (x as f64, y as f64))
        .collect();
    if pixels.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut warped_area = 0.0;
    let mut warped = Vec::with_capacity(pixels.len());
    for &(x, y) in &pixels {
        if depth_row.dot(&Vector3::new(x, y, 1.0)) <= 1e-9 {
            return Err(Error::Degenerate("patch crosses the virtual image plane".into()));
        }
        warped_area += base.area_scale(x, y);
        warped.push(base.apply(x, y).expect("w checked"));
    }
    let mut scale = (pixels.len() as f64 / warped_area).sqrt();
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(u, v) in &warped {
        min_x = min_x.min(u);
        min_y = min_y.min(v);
        max_x = max_x.max(u);
        max_y = max_y.max(v);
    }
    let span = (max_x - min_x).max(max_y - min_y);
    let max_span = max_output_dim.saturating_sub(1).max(1) as f64;
    if span * scale > max_span {
        scale = max_span / span;
    }
    let dim = |extent: f64| ((extent * scale) - 1e-9).ceil().max(0.0) as usize + 1;
    let (width, height) = (dim(max_x - min_x), dim(max_y - min_y));
    let similarity = Matrix3::new(scale, 0.0, -scale * min_x, 0.0, scale, -scale * min_y, 0.0, 0.0, 1.0);
    Ok(RectFraming {
        homography: Homography::new(similarity * base.matrix())?,
        width,
        height,
        scale,
    })
}

/// A resampled patch: intensities plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedRaster {
    pub image: GrayImage,
    pub valid: Mask,
}

/// Inverse warping with bilinear sampling. Output pixels whose source lies
/// outside the image or outside `source_mask` are invalid (and zero).
pub fn warp_patch(
    image: &GrayImage,
    h: &Homography,
    width: usize,
    height: usize,
    source_mask: Option<&Mask>,
) -> Result<WarpedRaster> {
    let inv = h.inverse()?;
    let rows: Vec<Vec<(f32, bool)>> = (0..height)
        .into_par_iter()
        .map(|y| {
            (0..width)
                .map(|x| {
                    let Some((u, v)) = inv.apply(x as f64, y as f64) else {
                        return (0.0, false);
                    };
                    let Some(value) = image.bilinear(u, v) else {
                        return (0.0, false);
                    };
                    let in_mask = source_mask.is_none_or(|m| {
                        *m.get(
                            (u.round() as usize).min(m.width() - 1),
                            (v.round() as usize).min(m.height() - 1),
                        )
                    });
                    if in_mask {
                        (value, true)
                    } else {
                        (0.0, false)
                    }
                })
                .collect()
        })
        .collect();
    let flat: Vec<(f32, bool)> = rows.into_iter().flatten().collect();
    Ok(WarpedRaster {
        image: Raster::from_vec(width, height, flat.iter().map(|p| p.0).collect())?,
        valid: Raster::from_vec(width, height, flat.iter().map(|p| p.1).collect())?,
    })
}

/// How keypoint geometry is carried back through a homography.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeypointTransport {
    /// Position, scale and orientation through the local Jacobian.
    #[default]
    Full,
    /// Position only; scale and orientation are left as detected.
    PositionOnly,
}

/// Map keypoints from a rectified raster back to original image coordinates.
/// Returns `(source index, keypoint)` for those landing inside
/// `[0, width-1] x [0, height-1]`.
pub fn backwarp_keypoints(
    keypoints: &[Keypoint],
    h: &Homography,
    width: usize,
    height: usize,
    transport: KeypointTransport,
) -> Result<Vec<(usize, Keypoint)>> {
    let inv = h.inverse()?;
    let max_x = width as f64 - 1.0;
    let max_y = height as f64 - 1.0;
    let mut out = Vec::with_capacity(keypoints.len());
    for (i, kp) in keypoints.iter().enumerate() {
        let Some((x, y)) = inv.apply(kp.x, kp.y) else {
            continue;
        };
        if !(x >= 0.0 && y >= 0.0 && x <= max_x && y <= max_y) {
            continue;
        }
        let mut mapped = Keypoint { x, y, ..*kp };
        if transport == KeypointTransport::Full {
            let Some(j) = inv.jacobian(kp.x, kp.y) else {
                continue;
            };
            mapped.scale = kp.scale * j.determinant().abs().sqrt();
            // Rotation angle of the polar factor of J.
            let det = j.determinant();
            let angle = if det >= 0.0 {
                (j[(1, 0)] - j[(0, 1)]).atan2(j[(0, 0)] + j[(1, 1)])
            } else {
                (j[(1, 0)] + j[(0, 1)]).atan2(j[(0, 0)] - j[(1, 1)])
            };
            mapped.orientation = wrap_angle(kp.orientation + angle);
        }
        out.push((i, mapped));
    }
    Ok(out)
}

fn wrap_angle(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let r = a.rem_euclid(t);
    if r > std::f64::consts::PI {
        r - t
    } else {
        r
    }
}

/// Restrict rectification to patches whose normal lies near a given axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisFilter {
    pub axis: Vector3<f64>,
    pub max_angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifyConfig {
    pub normal_window: usize,
    /// Noisy depth widens the window up to this size; equal to
    /// `normal_window` disables widening.
    pub normal_window_max: usize,
    pub normal_uncertainty_deg: f64,
    pub clustering: ClusteringMode,
    /// Keep at most this many best-supported directions.
    pub max_axes: usize,
    pub orthogonal: OrthogonalParams,
    pub histogram: HistogramParams,
    /// Minimum patch size as a fraction of the image area.
    pub min_patch_frac: f64,
    pub glancing_max_deg: f64,
    pub max_output_dim: usize,
    /// Refine each patch normal by a robust plane fit to its 3-D points.
    pub plane_refit: bool,
    pub axis_filter: Option<AxisFilter>,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self {
            normal_window: 5,
            normal_window_max: 25,
            normal_uncertainty_deg: 1.0,
            clustering: ClusteringMode::Orthogonal,
            max_axes: 3,
            orthogonal: OrthogonalParams::default(),
            histogram: HistogramParams::default(),
            min_patch_frac: 0.005,
            glancing_max_deg: 80.0,
            max_output_dim: 4096,
            plane_refit: true,
            axis_filter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifiedPatch {
    /// Glancing-trimmed patch (mask, refined normal, axis label).
    pub patch: PlanarPatch,
    pub homography: Homography,
    pub width: usize,
    pub height: usize,
    pub scale: f64,
    pub raster: WarpedRaster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifiedSet {
    pub patches: Vec<RectifiedPatch>,
    /// Complement of the union of patch masks.
    pub non_planar: Mask,
    pub normals: NormalMap,
    pub assignment: AssignmentMap,
}

/// JSON sidecar describing one rectified patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSidecar {
    #[serde(rename = "H")]
    pub homography: [f64; 9],
    pub dims: [usize; 2],
    pub scale: f64,
    pub normal: [f64; 3],
    pub axis_label: usize,
    pub pixel_count: usize,
}

impl RectifiedPatch {
    pub fn sidecar(&self) -> PatchSidecar {
        PatchSidecar {
            homography: self.homography.to_row_major(),
            dims: [self.width, self.height],
            scale: self.scale,
            normal: [self.patch.normal.x, self.patch.normal.y, self.patch.normal.z],
            axis_label: self.patch.label,
            pixel_count: self.patch.pixel_count,
        }
    }
}

/// Clear labels of all but the `keep` most populated axes.
fn keep_strongest_axes(assignment: AssignmentMap, n_axes: usize, keep: usize) -> AssignmentMap {
    if n_axes <= keep {
        return assignment;
    }
    let mut counts = vec![0usize; n_axes + 1];
    for &l in assignment.0.data() {
        counts[l as usize] += 1;
    }
    let mut order: Vec<usize> = (1..=n_axes).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let kept: Vec<usize> = order.into_iter().take(keep).collect();
    AssignmentMap(assignment.0.map(|&l| if kept.contains(&(l as usize)) { l } else { 0 }))
}

/// Full rectification pipeline. Zero patches is a valid outcome, in which
/// case the whole image is non-planar.
pub fn rectify_image(
    image: &GrayImage,
    depth: &DepthMap,
    k: &Intrinsics,
    config: &RectifyConfig,
) -> Result<RectifiedSet> {
    if image.dims() != k.dims() {
        return Err(Error::DimensionMismatch {
            expected: k.dims(),
            actual: image.dims(),
        });
    }
    let points = backproject_map(depth, k)?;
    let window = select_normal_window(
        &points,
        config.normal_window,
        config.normal_window_max,
        config.normal_uncertainty_deg,
    );
    let normals = estimate_normals(&points, k, window)?;
    let (axes, assignment) = match config.clustering {
        ClusteringMode::Orthogonal => {
            let (frame, assignment) = cluster_normals_orthogonal(&normals, &config.orthogonal);
            (frame.map(|f| f.axes().to_vec()).unwrap_or_default(), assignment)
        }
        ClusteringMode::Histogram => cluster_normals_histogram(&normals, &config.histogram),
    };
    let assignment = keep_strongest_axes(assignment, axes.len(), config.max_axes);
    let min_pixels = ((config.min_patch_frac * (k.width * k.height) as f64).ceil() as usize).max(1);
    let regions = if axes.is_empty() {
        Vec::new()
    } else {
        connected_components(&assignment, min_pixels)
    };
    let theta_assign = match config.clustering {
        ClusteringMode::Orthogonal => config.orthogonal.theta_assign_deg,
        ClusteringMode::Histogram => config.histogram.theta_assign_deg,
    };

    let patches: Vec<Option<RectifiedPatch>> = regions
        .into_par_iter()
        .map(|region| -> Result<Option<RectifiedPatch>> {
            let mut normal = refine_patch_normal(&region.mask, &normals, k)?;
            if config.plane_refit {
                normal = refit_patch_plane(&region.mask, &points, &normal, k, theta_assign)?;
            }
            if let Some(filter) = &config.axis_filter {
                let c = normal.dot(&filter.axis.normalize()).abs().min(1.0);
                if c.acos().to_degrees() > filter.max_angle_deg {
                    return Ok(None);
                }
            }
            let Some(mask) = glancing_mask(&region.mask, &normal, k, config.glancing_max_deg) else {
                return Ok(None);
            };
            let pixel_count = mask.count();
            if pixel_count < min_pixels {
                return Ok(None);
            }
            let rotation = rectifying_rotation(&normal)?;
            let framing = rectifying_homography(k, &rotation, &mask, config.max_output_dim)?;
            let raster = warp_patch(image, &framing.homography, framing.width, framing.height, Some(&mask))?;
            Ok(Some(RectifiedPatch {
                patch: PlanarPatch {
                    mask,
                    label: region.label,
                    pixel_count,
                    normal,
                },
                homography: framing.homography,
                width: framing.width,
                height: framing.height,
                scale: framing.scale,
                raster,
            }))
        })
        .collect::<Result<_>>()?;
    let patches: Vec<RectifiedPatch> = patches.into_iter().flatten().collect();

    let mut non_planar = Mask::new(k.width, k.height, true);
    for p in &patches {
        for (np, &m) in non_planar.data_mut().iter_mut().zip(p.patch.mask.data()) {
            if m {
                *np = false;
            }
        }
    }
    Ok(RectifiedSet {
        patches,
        non_planar,
        normals,
        assignment,
    })
}
