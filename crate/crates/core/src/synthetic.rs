//! Deterministic oracle scenes: textured planes rendered by exact ray
//! casting, with analytic depth, plane-induced homographies and relative
//! poses.
//!
//! World frame is z-up, in meters. Cameras follow the crate convention
//! (x-right, y-down, z-forward) and map world points as `R (X - C)`.

use std::f64::consts::{PI, TAU};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{derive_seed, splitmix64, RelativePose};
use crate::evaluation::{ManifestRecord, ViewRecord};
use crate::geometry::{DepthMap, Intrinsics};
use crate::io::{save_gray_png, write_pfm};
use crate::raster::{GrayImage, Raster};
use crate::rectification::Homography;

/// Lattice spacings (meters) and weights of the value-noise octaves.
const NOISE_OCTAVES: [(f64, f64); 4] = [(0.16, 1.0), (0.08, 0.8), (0.04, 0.6), (0.02, 0.45)];

/// Seeded procedural texture: a checkerboard plus multi-octave value noise,
/// both defined in plane coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    /// Checker square size in meters.
    pub checker_period: f64,
    pub checker_contrast: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        Self {
            checker_period: 0.5,
            checker_contrast: 0.15,
            noise_amplitude: 0.7,
            seed,
        }
    }

    /// Intensity in `[0, 1]` at plane coordinates `(a, b)`.
    pub fn sample(&self, a: f64, b: f64) -> f32 {
        let cell = (a / self.checker_period).floor() as i64 + (b / self.checker_period).floor() as i64;
        let checker = if cell.rem_euclid(2) == 0 { 0.5 } else { -0.5 };
        let mut noise = 0.0;
        let mut total = 0.0;
        for (octave, &(spacing, weight)) in NOISE_OCTAVES.iter().enumerate() {
            noise += weight * value_noise(self.seed, octave as u64, a / spacing, b / spacing);
            total += weight;
        }
        let v = 0.5 + self.checker_contrast * checker + self.noise_amplitude * noise / total;
        v.clamp(0.0, 1.0) as f32
    }
}

fn lattice(seed: u64, octave: u64, i: i64, j: i64) -> f64 {
    let h = splitmix64(splitmix64(splitmix64(seed ^ octave.wrapping_mul(0x2545_f491_4f6c_dd1d)) ^ i as u64) ^ j as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn value_noise(seed: u64, octave: u64, x: f64, y: f64) -> f64 {
    let (xf, yf) = (x.floor(), y.floor());
    let (i, j) = (xf as i64, yf as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(x - xf), smooth(y - yf));
    let top = lattice(seed, octave, i, j) * (1.0 - sx) + lattice(seed, octave, i + 1, j) * sx;
    let bottom = lattice(seed, octave, i, j + 1) * (1.0 - sx) + lattice(seed, octave, i + 1, j + 1) * sx;
    top * (1.0 - sy) + bottom * sy
}

/// Textured rectangle `origin + a u + b v`, `(a, b) in [0, w] x [0, h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlane {
    pub origin: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub extent: (f64, f64),
    pub texture: Texture,
}

impl ScenePlane {
    pub fn new(
        origin: Vector3<f64>,
        axis_u: Vector3<f64>,
        axis_v: Vector3<f64>,
        extent: (f64, f64),
        texture: Texture,
    ) -> Result<Self> {
        let unit = |v: &Vector3<f64>| (v.norm() - 1.0).abs() <= 1e-9;
        if !unit(&axis_u) || !unit(&axis_v) || axis_u.dot(&axis_v).abs() > 1e-9 {
            return Err(Error::InvalidConfig("plane axes must be orthonormal".into()));
        }
        if !(extent.0 > 0.0 && extent.1 > 0.0 && extent.0.is_finite() && extent.1.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "plane extent must be positive, got {extent:?}"
            )));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("plane origin must be finite".into()));
        }
        Ok(Self {
            origin,
            axis_u,
            axis_v,
            extent,
            texture,
        })
    }

    /// Unit normal `u x v`.
    pub fn normal(&self) -> Vector3<f64> {
        self.axis_u.cross(&self.axis_v)
    }

    pub fn point(&self, a: f64, b: f64) -> Vector3<f64> {
        self.origin + self.axis_u * a + self.axis_v * b
    }

    /// Signed distance of `p` from the infinite plane.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal().dot(&(p - self.origin))
    }

    /// Ray `c + t d` against the rectangle: `(t, a, b)` for `t > 0`.
    pub fn intersect(&self, c: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let n = self.normal();
        let denom = n.dot(d);
        if denom.abs() < 1e-15 {
            return None;
        }
        let t = n.dot(&(self.origin - c)) / denom;
        if !(t > 0.0) {
            return None;
        }
        let rel = c + d * t - self.origin;
        let (a, b) = (rel.dot(&self.axis_u), rel.dot(&self.axis_v));
        (a >= 0.0 && a <= self.extent.0 && b >= 0.0 && b <= self.extent.1).then_some((t, a, b))
    }
}

/// World-to-camera rotation and camera center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !(ortho <= 1e-9) || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::NotARotation);
        }
        if !center.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("camera center is not finite".into()));
        }
        Ok(Self { rotation, center })
    }

    /// Camera at `center` looking at `target`, with image "up" toward `up`.
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = target - center;
        if !(z.norm() > 1e-12) {
            return Err(Error::Degenerate("camera center coincides with its target".into()));
        }
        let z = z.normalize();
        let y = -(up - z * up.dot(&z));
        if !(y.norm() > 1e-9) {
            return Err(Error::Degenerate(
                "viewing direction is parallel to the up vector".into(),
            ));
        }
        let y = y.normalize();
        let x = y.cross(&z);
        Self::new(
            Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]),
            center,
        )
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.center)
    }

    /// Pose of `other` relative to `self`: `X_other = R X_self + t`.
    pub fn relative_to(&self, other: &CameraPose) -> (Matrix3<f64>, Vector3<f64>) {
        let r = other.rotation * self.rotation.transpose();
        let t = other.rotation * (self.center - other.center);
        (r, t)
    }
}

/// Rendered image, exact camera-frame depth (0 on background) and plane id
/// per pixel (0 = background, `i + 1` = plane `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub image: GrayImage,
    pub depth: DepthMap,
    pub plane_id: Raster<u8>,
}

/// Nearest plane hit along the ray of pixel `(u, v)`: `(plane, depth, a, b)`.
fn cast(planes: &[ScenePlane], pose: &CameraPose, k: &Intrinsics, u: f64, v: f64) -> Option<(usize, f64, f64, f64)> {
    let dir = pose.rotation.transpose() * k.unproject(u, v);
    let mut best: Option<(usize, f64, f64, f64)> = None;
    for (i, plane) in planes.iter().enumerate() {
        if let Some((t, a, b)) = plane.intersect(&pose.center, &dir) {
            if best.is_none_or(|(_, bt, _, _)| t < bt) {
                best = Some((i, t, a, b));
            }
        }
    }
    best
}

/// Ray-cast every pixel center. Because the viewing direction is scaled to
/// unit camera z, the ray parameter of the hit is the depth itself.
pub fn render_view(planes: &[ScenePlane], pose: &CameraPose, k: &Intrinsics) -> Result<RenderedView> {
    k.validate()?;
    if planes.len() > 254 {
        return Err(Error::InvalidConfig("at most 254 planes can be rendered".into()));
    }
    for (i, plane) in planes.iter().enumerate() {
        if plane.signed_distance(&pose.center).abs() < 1e-9 {
            return Err(Error::Degenerate(format!("camera lies on plane {i}")));
        }
    }
    let (w, h) = k.dims();
    let rows: Vec<Vec<(f32, f64, u8)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| match cast(planes, pose, k, x as f64, y as f64) {
                    Some((i, t, a, b)) => (planes[i].texture.sample(a, b), t, i as u8 + 1),
                    None => (0.0, 0.0, 0),
                })
                .collect()
        })
        .collect();
    let flat: Vec<(f32, f64, u8)> = rows.into_iter().flatten().collect();
    Ok(RenderedView {
        image: Raster::from_vec(w, h, flat.iter().map(|p| p.0).collect())?,
        depth: DepthMap::new(Raster::from_vec(w, h, flat.iter().map(|p| p.1).collect())?),
        plane_id: Raster::from_vec(w, h, flat.iter().map(|p| p.2).collect())?,
    })
}

/// Map from plane coordinates `(a, b)` in meters to pixels of the view.
pub fn plane_to_image(plane: &ScenePlane, pose: &CameraPose, k: &Intrinsics) -> Result<Homography> {
    let offset = plane.signed_distance(&pose.center);
    if offset.abs() < 1e-9 * (1.0 + (pose.center - plane.origin).norm()) {
        return Err(Error::Degenerate("plane is seen edge-on".into()));
    }
    let r = &pose.rotation;
    let g = Matrix3::from_columns(&[r * plane.axis_u, r * plane.axis_v, r * (plane.origin - pose.center)]);
    Homography::new(k.matrix() * g)
}

/// Plane-induced homography taking view-1 pixels on `plane` to view-2 pixels.
pub fn gt_plane_homography(
    plane: &ScenePlane,
    pose_1: &CameraPose,
    pose_2: &CameraPose,
    k_1: &Intrinsics,
    k_2: &Intrinsics,
) -> Result<Homography> {
    let g1 = plane_to_image(plane, pose_1, k_1)?;
    let g2 = plane_to_image(plane, pose_2, k_2)?;
    g2.compose(&g1.inverse()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One ground plane, both cameras on a cone about its normal.
    SinglePlane,
    /// Floor and wall meeting at a concave edge, cameras on a cone about the
    /// floor normal on the room side of the wall.
    TwoOrthogonal,
    /// Same planes, cameras on a cone about an axis between the two normals
    /// (closer to the floor's).
    GroundPlusWall,
    /// Two cameras over a ground plane facing each other across a common
    /// point.
    OppositeGround,
}

impl Layout {
    pub const ALL: [Layout; 4] = [
        Layout::SinglePlane,
        Layout::TwoOrthogonal,
        Layout::GroundPlusWall,
        Layout::OppositeGround,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Layout::SinglePlane => "single_plane",
            Layout::TwoOrthogonal => "two_orthogonal",
            Layout::GroundPlusWall => "ground_plus_wall",
            Layout::OppositeGround => "opposite_ground",
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Layout::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown layout `{s}`")))
    }
}

/// Camera model and depth corruption shared by all generated views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseOptions {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Standard deviation of Gaussian depth noise as a fraction of depth.
    pub depth_noise: f64,
}

impl Default for CaseOptions {
    fn default() -> Self {
        Self {
            width: 480,
            height: 360,
            focal: 390.0,
            depth_noise: 0.0,
        }
    }
}

impl CaseOptions {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }

    fn validate(&self) -> Result<()> {
        if !(self.depth_noise >= 0.0 && self.depth_noise < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "depth noise must be in [0, 1), got {}",
                self.depth_noise
            )));
        }
        self.intrinsics().map(|_| ())
    }
}

/// Two rendered views of a layout with their exact geometry.
#[derive(Debug, Clone)]
pub struct TwoViewCase {
    pub layout: Layout,
    pub seed: u64,
    pub sep_deg: f64,
    pub planes: Vec<ScenePlane>,
    pub k: Intrinsics,
    pub pose_a: CameraPose,
    pub pose_b: CameraPose,
    pub view_a: RenderedView,
    pub view_b: RenderedView,
    /// Noise-free depth; equal to the views' depth when no noise is added.
    pub clean_depth: (DepthMap, DepthMap),
    pub rotation_ab: Matrix3<f64>,
    /// Unit translation direction, `X_b = R X_a + t`.
    pub translation_ab: Vector3<f64>,
    /// A-to-B homography per plane; `None` when a plane is edge-on.
    pub homographies: Vec<Option<Homography>>,
}

impl TwoViewCase {
    pub fn relative_pose(&self) -> Result<RelativePose> {
        RelativePose::new(self.rotation_ab, self.translation_ab)
    }

    /// `[w, x, y, z]` with `w >= 0`.
    pub fn quaternion_ab(&self) -> [f64; 4] {
        rotation_quaternion(&self.rotation_ab)
    }
}

pub fn rotation_quaternion(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    [s * q.w, s * q.i, s * q.j, s * q.k]
}

fn floor_and_wall(rng: &mut ChaCha8Rng) -> Result<Vec<ScenePlane>> {
    Ok(vec![
        ScenePlane::new(
            Vector3::new(-8.0, 0.0, 0.0),
            Vector3::x(),
            Vector3::y(),
            (16.0, 10.0),
            Texture::new(rng.random()),
        )?,
        ScenePlane::new(
            Vector3::new(8.0, 0.0, 0.0),
            -Vector3::x(),
            Vector3::z(),
            (16.0, 8.0),
            Texture::new(rng.random()),
        )?,
    ])
}

/// Camera on a cone of half-angle `half_angle` about `axis` through
/// `target`, at azimuth `phi`, looking at the target with "up" along the
/// axis. Two such cameras differ by a rotation of exactly their azimuth
/// difference.
fn cone_camera(target: Vector3<f64>, axis: Vector3<f64>, half_angle: f64, dist: f64, phi: f64) -> Result<CameraPose> {
    let axis = axis.normalize();
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = (helper - axis * helper.dot(&axis)).normalize();
    let e2 = axis.cross(&e1);
    let dir = axis * half_angle.cos() + (e1 * phi.cos() + e2 * phi.sin()) * half_angle.sin();
    CameraPose::look_at(target + dir * dist, target, axis)
}

/// Camera at `center` with heading `yaw` (from +x toward +y) and `pitch`
/// below the horizon.
fn ground_camera(center: Vector3<f64>, yaw: f64, pitch: f64) -> Result<CameraPose> {
    let dir = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), -pitch.sin());
    CameraPose::look_at(center, center + dir, Vector3::z())
}

const GROUND_PITCH_DEG: f64 = 30.0;

fn corrupt_depth(depth: &DepthMap, frac: f64, seed: u64) -> DepthMap {
    if frac == 0.0 {
        return depth.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DepthMap::new(depth.0.map(|&d| {
        let z: f64 = StandardNormal.sample(&mut rng);
        if d > 0.0 {
            (d * (1.0 + frac * z)).max(1e-6 * d)
        } else {
            d
        }
    }))
}

/// Render two views of `layout` separated by `sep_deg` degrees.
///
/// For the cone layouts `distance` is the camera-to-target range. For
/// `opposite_ground` it is the horizontal distance from each camera to the
/// shared fixation point on the ground, and `sep_deg` is the heading
/// difference about the vertical.
pub fn two_view_case(
    sep_deg: f64,
    distance: f64,
    layout: Layout,
    seed: u64,
    opts: &CaseOptions,
) -> Result<TwoViewCase> {
    if !(0.0..=180.0).contains(&sep_deg) {
        return Err(Error::InvalidConfig(format!(
            "view separation must be in [0, 180], got {sep_deg}"
        )));
    }
    if !(distance > 0.0 && distance.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "distance must be positive, got {distance}"
        )));
    }
    opts.validate()?;
    let k = opts.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sep = sep_deg.to_radians();
    let phi0 = rng.random_range(0.0..TAU);

    let (planes, pose_a, pose_b) = match layout {
        Layout::SinglePlane => {
            let planes = vec![ScenePlane::new(
                Vector3::new(-20.0, -20.0, 0.0),
                Vector3::x(),
                Vector3::y(),
                (40.0, 40.0),
                Texture::new(rng.random()),
            )?];
            let tilt = rng.random_range(50.0f64..62.0).to_radians();
            let target = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0);
            let a = cone_camera(target, Vector3::z(), tilt, distance, phi0 - sep / 2.0)?;
            let b = cone_camera(target, Vector3::z(), tilt, distance, phi0 + sep / 2.0)?;
            (planes, a, b)
        }
        Layout::TwoOrthogonal => {
            // Cameras circle the floor normal on the room side of the wall,
            // both fixating a floor point in front of it. The azimuth split
            // is lopsided so the wall is seen at different incidences; a
            // mirror-symmetric split would give both views the same
            // foreshortening.
            let planes = floor_and_wall(&mut rng)?;
            let tilt = rng.random_range(50.0f64..62.0).to_radians();
            let target = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(0.8..1.2), 0.0);
            let margin = 5f64.to_radians();
            let jitter = rng.random_range(-1.0..=1.0) * 5f64.to_radians();
            let lo = margin.min((PI - sep) / 2.0);
            let hi = (PI - margin - sep).max(lo);
            let start = (PI / 2.0 - 0.2 * sep + jitter).clamp(lo, hi);
            let a = cone_camera(target, Vector3::z(), tilt, distance, start)?;
            let b = cone_camera(target, Vector3::z(), tilt, distance, start + sep)?;
            (planes, a, b)
        }
        Layout::GroundPlusWall => {
            let planes = floor_and_wall(&mut rng)?;
            let target = Vector3::new(rng.random_range(-0.5..0.5), 1.4, 0.5);
            let half = rng.random_range(22.0f64..28.0).to_radians();
            let axis = Vector3::new(0.0, 0.5, 1.0);
            let a = cone_camera(target, axis, half, distance, phi0 - sep / 2.0)?;
            let b = cone_camera(target, axis, half, distance, phi0 + sep / 2.0)?;
            (planes, a, b)
        }
        Layout::OppositeGround => {
            let reach = distance + 10.0;
            let planes = vec![ScenePlane::new(
                Vector3::new(-reach, -reach, 0.0),
                Vector3::x(),
                Vector3::y(),
                (2.0 * reach, 2.0 * reach),
                Texture::new(rng.random()),
            )?];
            let pitch = GROUND_PITCH_DEG.to_radians();
            let height = distance * pitch.tan();
            let yaw_a = phi0;
            let yaw_b = phi0 + sep;
            let ca = Vector3::new(0.0, 0.0, height);
            let fix = Vector3::new(distance * yaw_a.cos(), distance * yaw_a.sin(), 0.0);
            let cb = Vector3::new(fix.x - distance * yaw_b.cos(), fix.y - distance * yaw_b.sin(), height);
            (
                planes,
                ground_camera(ca, yaw_a, pitch)?,
                ground_camera(cb, yaw_b, pitch)?,
            )
        }
    };

    let clean_a = render_view(&planes, &pose_a, &k)?;
    let clean_b = render_view(&planes, &pose_b, &k)?;
    let clean_depth = (clean_a.depth.clone(), clean_b.depth.clone());
    let view_a = RenderedView {
        depth: corrupt_depth(&clean_a.depth, opts.depth_noise, derive_seed(seed, 1)),
        ..clean_a
    };
    let view_b = RenderedView {
        depth: corrupt_depth(&clean_b.depth, opts.depth_noise, derive_seed(seed, 2)),
        ..clean_b
    };
    let (rotation_ab, t) = pose_a.relative_to(&pose_b);
    let translation_ab = if t.norm() > 0.0 { t.normalize() } else { t };
    let homographies = planes
        .iter()
        .map(|p| gt_plane_homography(p, &pose_a, &pose_b, &k, &k).ok())
        .collect();
    Ok(TwoViewCase {
        layout,
        seed,
        sep_deg,
        planes,
        k,
        pose_a,
        pose_b,
        view_a,
        view_b,
        clean_depth,
        rotation_ab,
        translation_ab,
        homographies,
    })
}

/// Parameters of one generated pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseSpec {
    pub name: String,
    pub sep_deg: f64,
    pub distance: f64,
    pub layout: Layout,
    pub seed: u64,
}

/// `pairs_per_bin` pairs for each of the 18 ten-degree difficulty bins,
/// cycling through `layouts` within a bin.
pub fn binned_campaign(pairs_per_bin: usize, layouts: &[Layout], seed: u64) -> Vec<CaseSpec> {
    let mut specs = Vec::with_capacity(18 * pairs_per_bin);
    if layouts.is_empty() {
        return specs;
    }
    for bin in 0..18 {
        for j in 0..pairs_per_bin {
            let id = (bin * pairs_per_bin + j) as u64;
            let case_seed = derive_seed(seed, id);
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
            let layout = layouts[j % layouts.len()];
            specs.push(CaseSpec {
                name: format!("b{bin:02}_{j:02}_{layout}"),
                sep_deg: 10.0 * bin as f64 + rng.random_range(0.5..9.5),
                distance: rng.random_range(2.6..3.4),
                layout,
                seed: case_seed,
            });
        }
    }
    specs
}

fn write_view(dir: &Path, stem: &str, view: &RenderedView) -> Result<(String, String)> {
    let img = format!("{stem}.png");
    let depth = format!("{stem}.pfm");
    save_gray_png(&dir.join(&img), &view.image)?;
    write_pfm(&dir.join(&depth), &view.depth)?;
    Ok((img, depth))
}

/// Write both views of a case into `dir`; paths in the returned record are
/// relative to `dir`.
pub fn write_case(dir: &Path, name: &str, case: &TwoViewCase) -> Result<ManifestRecord> {
    std::fs::create_dir_all(dir)?;
    let (img_a, depth_a) = write_view(dir, &format!("{name}_a"), &case.view_a)?;
    let (img_b, depth_b) = write_view(dir, &format!("{name}_b"), &case.view_b)?;
    Ok(ManifestRecord {
        img_a,
        img_b,
        depth_a,
        depth_b,
        k_a: case.k,
        k_b: case.k,
        q_ab: case.quaternion_ab(),
        t_ab: [case.translation_ab.x, case.translation_ab.y, case.translation_ab.z],
        scene: format!("{name}:{}", case.layout),
        depth_scale_a: None,
        depth_scale_b: None,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Render and write every case, then `manifest.jsonl` in the order of `specs`.
/// Returns the manifest path.
pub fn write_dataset(dir: &Path, specs: &[CaseSpec], opts: &CaseOptions) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let records = specs
        .par_iter()
        .map(|s| {
            let case = two_view_case(s.sep_deg, s.distance, s.layout, s.seed, opts)?;
            write_case(dir, &s.name, &case)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = dir.join("manifest.jsonl");
    write_jsonl(&manifest, &records)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct LocatedView {
    pub pose: CameraPose,
    pub view: RenderedView,
}

/// Ground strip with a row of database cameras facing +x and query
/// cameras facing back toward them from 9 to 11 m further along.
#[derive(Debug, Clone)]
pub struct RelocScene {
    pub k: Intrinsics,
    pub planes: Vec<ScenePlane>,
    pub database: Vec<LocatedView>,
    pub queries: Vec<LocatedView>,
    /// Per query, the database view sharing the most visible ground.
    pub ground_truth: Vec<usize>,
    /// Nominal ground normal in query camera coordinates.
    pub ground_axis: Vector3<f64>,
}

const RELOC_SPACING: f64 = 8.0;
const RELOC_HEIGHT: f64 = 1.6;

pub fn relocalization_scene(count: usize, seed: u64, opts: &CaseOptions) -> Result<RelocScene> {
    if count == 0 {
        return Err(Error::InvalidConfig(
            "relocalization scene needs at least one view".into(),
        ));
    }
    opts.validate()?;
    let k = opts.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let length = RELOC_SPACING * count as f64 + 30.0;
    let planes = vec![ScenePlane::new(
        Vector3::new(-15.0, -12.0, 0.0),
        Vector3::x(),
        Vector3::y(),
        (length, 24.0),
        Texture::new(rng.random()),
    )?];
    let pitch = GROUND_PITCH_DEG.to_radians();
    let mut db_poses = Vec::with_capacity(count);
    let mut q_poses = Vec::with_capacity(count);
    for i in 0..count {
        let x = RELOC_SPACING * i as f64;
        let jitter = |rng: &mut ChaCha8Rng, deg: f64| rng.random_range(-deg..deg).to_radians();
        let c = Vector3::new(x, rng.random_range(-0.3..0.3), RELOC_HEIGHT);
        let (yaw, dp) = (jitter(&mut rng, 4.0), jitter(&mut rng, 2.0));
        db_poses.push(ground_camera(c, yaw, pitch + dp)?);
        let offset = rng.random_range(9.0..11.0);
        let c = Vector3::new(x + offset, rng.random_range(-0.3..0.3), RELOC_HEIGHT);
        let (yaw, dp) = (PI + jitter(&mut rng, 4.0), jitter(&mut rng, 2.0));
        q_poses.push(ground_camera(c, yaw, pitch + dp)?);
    }
    let render = |poses: &[CameraPose], salt: u64| -> Result<Vec<LocatedView>> {
        poses
            .par_iter()
            .enumerate()
            .map(|(i, pose)| {
                let mut view = render_view(&planes, pose, &k)?;
                view.depth = corrupt_depth(&view.depth, opts.depth_noise, derive_seed(seed, salt + i as u64));
                Ok(LocatedView { pose: *pose, view })
            })
            .collect()
    };
    let database = render(&db_poses, 1000)?;
    let queries = render(&q_poses, 2000)?;
    let ground_truth = q_poses.iter().map(|q| best_overlap(q, &db_poses, &k)).collect();
    Ok(RelocScene {
        k,
        planes,
        database,
        queries,
        ground_truth,
        ground_axis: Vector3::new(0.0, -pitch.cos(), -pitch.sin()),
    })
}

/// Ground point seen in `pose` within the image and below 80 degrees
/// incidence.
fn sees_ground(pose: &CameraPose, k: &Intrinsics, p: &Vector3<f64>) -> bool {
    let to_cam = pose.center - p;
    if to_cam.z <= to_cam.norm() * 80f64.to_radians().cos() {
        return false;
    }
    match k.project(&pose.to_camera(p)) {
        Some((u, v)) => u >= 0.0 && v >= 0.0 && u <= (k.width - 1) as f64 && v <= (k.height - 1) as f64,
        None => false,
    }
}

fn best_overlap(query: &CameraPose, database: &[CameraPose], k: &Intrinsics) -> usize {
    let mut counts = vec![0usize; database.len()];
    let (cx, cy) = (query.center.x, query.center.y);
    let step = 0.1;
    for i in -150..=150 {
        for j in -120..=120 {
            let p = Vector3::new(cx + i as f64 * step, cy + j as f64 * step, 0.0);
            if !sees_ground(query, k, &p) {
                continue;
            }
            for (d, pose) in database.iter().enumerate() {
                if sees_ground(pose, k, &p) {
                    counts[d] += 1;
                }
            }
        }
    }
    let mut best = 0;
    for (d, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = d;
        }
    }
    best
}

/// Summary written next to a relocalization scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelocTruth {
    pub ground_axis: [f64; 3],
    pub ground_truth: Vec<usize>,
}

/// Writes `db_XX` and `q_XX` views, `database.jsonl`, `queries.jsonl` and
/// `reloc.json`.
pub fn write_reloc_scene(dir: &Path, scene: &RelocScene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let write_all = |views: &[LocatedView], prefix: &str| -> Result<Vec<ViewRecord>> {
        views
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (image, depth) = write_view(dir, &format!("{prefix}_{i:02}"), &v.view)?;
                Ok(ViewRecord {
                    image,
                    depth,
                    k: scene.k,
                    depth_scale: None,
                })
            })
            .collect()
    };
    write_jsonl(&dir.join("database.jsonl"), &write_all(&scene.database, "db")?)?;
    write_jsonl(&dir.join("queries.jsonl"), &write_all(&scene.queries, "q")?)?;
    let truth = RelocTruth {
        ground_axis: [scene.ground_axis.x, scene.ground_axis.y, scene.ground_axis.z],
        ground_truth: scene.ground_truth.clone(),
    };
    std::fs::write(dir.join("reloc.json"), serde_json::to_string_pretty(&truth)?)?;
    Ok(())
}
