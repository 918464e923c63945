#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use unwarp::synthetic::{render_view, CameraPose, RenderedView, ScenePlane, Texture};
use unwarp::Intrinsics;

pub fn k_320() -> Intrinsics {
    Intrinsics::new(300.0, 300.0, 159.5, 119.5, 320, 240).unwrap()
}

pub fn origin_pose() -> CameraPose {
    CameraPose::new(Matrix3::identity(), Vector3::zeros()).unwrap()
}

/// Plane through `center` spanned by `u` and `v`, 12 m on a side.
pub fn plane(center: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, seed: u64) -> ScenePlane {
    let (u, v) = (u.normalize(), v.normalize());
    ScenePlane::new(center - 6.0 * u - 6.0 * v, u, v, (12.0, 12.0), Texture::new(seed)).unwrap()
}

/// Plane at depth `z` tilted by `deg` about the camera x axis.
pub fn tilted(z: f64, deg: f64, seed: u64) -> ScenePlane {
    let t = deg.to_radians();
    plane(
        Vector3::new(0.0, 0.0, z),
        Vector3::x(),
        Vector3::new(0.0, t.cos(), t.sin()),
        seed,
    )
}

pub fn render(planes: &[ScenePlane], pose: &CameraPose, k: &Intrinsics) -> RenderedView {
    render_view(planes, pose, k).unwrap()
}

/// Axial angle between directions, degrees.
pub fn axial_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let (a, b) = (a.normalize(), b.normalize());
    a.cross(&b).norm().atan2(a.dot(&b).abs()).to_degrees()
}

/// Normalized cross-correlation of paired samples.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
