//! Normal clustering and planar patch extraction.
//!
//! Normals are axial data: `n` and `-n` describe the same plane orientation,
//! so every comparison below uses `|n . c|` and scatter matrices `n n^T`.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{principal_eigenvector, smallest_eigenvector, Intrinsics, NormalMap, PointGrid};
use crate::raster::{Mask, Raster};

/// Fewest valid normals for which clustering is attempted.
pub const MIN_CLUSTER_NORMALS: usize = 100;

/// Three mutually orthogonal axial directions stored as the columns of a
/// rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthogonalFrame {
    axes: Matrix3<f64>,
}

impl OrthogonalFrame {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.axes
    }

    pub fn axis(&self, i: usize) -> Vector3<f64> {
        self.axes.column(i).into_owned()
    }

    pub fn axes(&self) -> [Vector3<f64>; 3] {
        [self.axis(0), self.axis(1), self.axis(2)]
    }
}

/// Per-pixel cluster label: 0 = none, `i >= 1` = axis `i - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMap(pub Raster<u8>);

impl AssignmentMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self(Raster::new(width, height, 0))
    }

    pub fn label(&self, x: usize, y: usize) -> Option<usize> {
        match *self.0.get(x, y) {
            0 => None,
            l => Some(l as usize - 1),
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.0.data().iter().filter(|&&l| l != 0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthogonalParams {
    pub theta_assign_deg: f64,
    pub max_iters: usize,
    pub stride: usize,
}

impl Default for OrthogonalParams {
    fn default() -> Self {
        Self {
            theta_assign_deg: 30.0,
            max_iters: 50,
            stride: 2,
        }
    }
}

fn valid_normals(normals: &NormalMap, stride: usize) -> Vec<Vector3<f64>> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for y in (0..normals.height()).step_by(stride) {
        for x in (0..normals.width()).step_by(stride) {
            if let Some(n) = normals.get(x, y) {
                out.push(*n);
            }
        }
    }
    out
}

fn count_valid(normals: &NormalMap) -> usize {
    normals.data().iter().filter(|n| n.is_some()).count()
}

fn scatter<'a>(normals: impl IntoIterator<Item = &'a Vector3<f64>>) -> Matrix3<f64> {
    let mut s = Matrix3::zeros();
    for n in normals {
        s += n * n.transpose();
    }
    s
}

/// Index of the axis with largest `|n . c|`; ties go to the lower index.
#[inline]
fn nearest_axis(n: &Vector3<f64>, axes: &[Vector3<f64>]) -> (usize, f64) {
    let mut best = (0, -1.0);
    for (j, c) in axes.iter().enumerate() {
        let d = n.dot(c).abs();
        if d > best.1 {
            best = (j, d);
        }
    }
    best
}

/// Full-resolution assignment with the angular gate.
fn assign(normals: &NormalMap, axes: &[Vector3<f64>], theta_assign_deg: f64) -> AssignmentMap {
    let cos_gate = theta_assign_deg.to_radians().cos();
    AssignmentMap(normals.map(|n| match n {
        Some(n) if !axes.is_empty() => {
            let (j, d) = nearest_axis(n, axes);
            if d >= cos_gate {
                (j + 1) as u8
            } else {
                0
            }
        }
        _ => 0,
    }))
}

/// Nearest rotation to the weighted target columns (orthogonal Procrustes,
/// determinant corrected).
fn nearest_rotation(target: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = target.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// Axial k-means with k = 3 under an orthogonality constraint.
///
/// Returns `None` for the frame (and an all-none map) when fewer than
/// [`MIN_CLUSTER_NORMALS`] normals are valid.
pub fn cluster_normals_orthogonal(
    normals: &NormalMap,
    params: &OrthogonalParams,
) -> (Option<OrthogonalFrame>, AssignmentMap) {
    let (w, h) = normals.dims();
    if count_valid(normals) < MIN_CLUSTER_NORMALS {
        return (None, AssignmentMap::empty(w, h));
    }
    let mut sample = valid_normals(normals, params.stride);
    if sample.len() < MIN_CLUSTER_NORMALS {
        sample = valid_normals(normals, 1);
    }

    let Some((vecs, _)) = crate::geometry::sorted_eigen(&scatter(&sample)) else {
        return (None, AssignmentMap::empty(w, h));
    };
    let mut frame = Matrix3::from_columns(&[vecs[2], vecs[1], vecs[0]]);
    if frame.determinant() < 0.0 {
        frame.set_column(2, &(-vecs[0]));
    }

    let weight_floor = 1e-6 * sample.len() as f64;
    let mut labels: Vec<usize> = vec![usize::MAX; sample.len()];
    for _ in 0..params.max_iters {
        let axes = [
            frame.column(0).into_owned(),
            frame.column(1).into_owned(),
            frame.column(2).into_owned(),
        ];
        let mut changed = false;
        let mut scatters = [Matrix3::zeros(); 3];
        for (n, label) in sample.iter().zip(labels.iter_mut()) {
            let (j, _) = nearest_axis(n, &axes);
            if *label != j {
                *label = j;
                changed = true;
            }
            scatters[j] += n * n.transpose();
        }

        let mut target = Matrix3::zeros();
        for j in 0..3 {
            let (mut m, weight) = match principal_eigenvector(&scatters[j]) {
                Some((m, vals)) if vals[2] > 0.0 => (m, vals[2]),
                _ => (axes[j], 0.0),
            };
            if m.dot(&axes[j]) < 0.0 {
                m = -m;
            }
            target.set_column(j, &(m * (weight + weight_floor)));
        }
        let next = nearest_rotation(&target);
        let moved = (next - frame).amax();
        frame = next;
        if !changed && moved < 1e-14 {
            break;
        }
    }

    let of = OrthogonalFrame { axes: frame };
    let assignment = assign(normals, &of.axes(), params.theta_assign_deg);
    (Some(of), assignment)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramParams {
    pub bins: usize,
    pub threshold_frac: f64,
    pub nms_radius_deg: f64,
    pub theta_assign_deg: f64,
    pub stride: usize,
}

impl Default for HistogramParams {
    fn default() -> Self {
        Self {
            bins: 200,
            threshold_frac: 0.02,
            nms_radius_deg: 20.0,
            theta_assign_deg: 30.0,
            stride: 2,
        }
    }
}

/// Near-equal-area cell centers on the upper (z >= 0) hemisphere.
pub fn fibonacci_hemisphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = i as f64 * golden;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Plane hypotheses from a folded orientation histogram with thresholding
/// and angular non-maximum suppression.
pub fn cluster_normals_histogram(normals: &NormalMap, params: &HistogramParams) -> (Vec<Vector3<f64>>, AssignmentMap) {
    let (w, h) = normals.dims();
    if count_valid(normals) < MIN_CLUSTER_NORMALS || params.bins == 0 {
        return (Vec::new(), AssignmentMap::empty(w, h));
    }
    let mut sample = valid_normals(normals, params.stride);
    if sample.len() < MIN_CLUSTER_NORMALS {
        sample = valid_normals(normals, 1);
    }
    let cells = fibonacci_hemisphere(params.bins);
    let mut counts = vec![0usize; cells.len()];
    for n in &sample {
        counts[nearest_axis(n, &cells).0] += 1;
    }

    let min_count = params.threshold_frac * sample.len() as f64;
    let mut order: Vec<usize> = (0..cells.len())
        .filter(|&i| counts[i] > 0 && counts[i] as f64 >= min_count)
        .collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));

    let cos_nms = params.nms_radius_deg.to_radians().cos();
    let mut kept: Vec<Vector3<f64>> = Vec::new();
    for i in order {
        if kept.iter().all(|k| k.dot(&cells[i]).abs() < cos_nms) {
            kept.push(cells[i]);
        }
    }

    // Re-center each hypothesis on the normals within the suppression radius.
    let axes: Vec<Vector3<f64>> = kept
        .into_iter()
        .map(|mut axis| {
            for _ in 0..3 {
                let s = scatter(sample.iter().filter(|n| n.dot(&axis).abs() >= cos_nms));
                if let Some((m, vals)) = principal_eigenvector(&s) {
                    if vals[2] > 0.0 {
                        axis = if m.dot(&axis) < 0.0 { -m } else { m };
                    }
                }
            }
            axis
        })
        .collect();
    let assignment = assign(normals, &axes, params.theta_assign_deg);
    (axes, assignment)
}

/// A 4-connected region of pixels sharing one cluster label.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRegion {
    pub mask: Mask,
    /// Zero-based axis index.
    pub label: usize,
    pub pixel_count: usize,
    /// First pixel in raster order.
    pub seed: (usize, usize),
}

/// A patch region with its refined camera-facing unit normal.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarPatch {
    pub mask: Mask,
    pub label: usize,
    pub pixel_count: usize,
    pub normal: Vector3<f64>,
}

/// 4-connected components per label, dropping those smaller than
/// `min_patch_pixels`. Ordered by label, then by first pixel.
pub fn connected_components(assign: &AssignmentMap, min_patch_pixels: usize) -> Vec<PatchRegion> {
    let labels = &assign.0;
    let (w, h) = labels.dims();
    let mut visited = vec![false; w * h];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    let mut members = Vec::new();
    for start in 0..w * h {
        let label = labels.data()[start];
        if label == 0 || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        members.clear();
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if !visited[j] && labels.data()[j] == label {
                    visited[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if members.len() < min_patch_pixels.max(1) {
            continue;
        }
        let mut mask = Mask::new(w, h, false);
        for &i in &members {
            mask.data_mut()[i] = true;
        }
        regions.push(PatchRegion {
            mask,
            label: label as usize - 1,
            pixel_count: members.len(),
            seed: (start % w, start / w),
        });
    }
    regions.sort_by_key(|r| (r.label, r.seed.1, r.seed.0));
    regions
}

/// Largest 4-connected component of a mask (ties: first in raster order).
pub fn largest_component(mask: &Mask) -> Option<Mask> {
    let labels = AssignmentMap(mask.map(|&b| u8::from(b)));
    connected_components(&labels, 1)
        .into_iter()
        .max_by(|a, b| {
            a.pixel_count
                .cmp(&b.pixel_count)
                .then(b.seed.1.cmp(&a.seed.1))
                .then(b.seed.0.cmp(&a.seed.0))
        })
        .map(|r| r.mask)
}

pub fn mask_centroid(mask: &Mask) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if *mask.get(x, y) {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

fn camera_facing(n: Vector3<f64>, mask: &Mask, k: &Intrinsics) -> Vector3<f64> {
    let (cx, cy) = mask_centroid(mask).unwrap_or((k.cx, k.cy));
    if n.dot(&k.unproject(cx, cy)) > 0.0 {
        -n
    } else {
        n
    }
}

/// Principal direction of the member normals' scatter, oriented toward the
/// camera at the mask centroid.
pub fn refine_patch_normal(mask: &Mask, normals: &NormalMap, k: &Intrinsics) -> Result<Vector3<f64>> {
    mask.same_dims(normals)?;
    let s = scatter(
        mask.data()
            .iter()
            .zip(normals.data())
            .filter_map(|(&m, n)| if m { n.as_ref() } else { None }),
    );
    match principal_eigenvector(&s) {
        Some((n, vals)) if vals[2] > 0.0 => Ok(camera_facing(n.normalize(), mask, k)),
        _ => Err(Error::EmptyMask),
    }
}

/// Robust total-least-squares plane fit to the patch's 3-D points, seeded by
/// `initial`. Points further than three robust standard deviations from the
/// current plane are excluded before each refit.
///
/// Falls back to `initial` when fewer than three points survive or the fit
/// drifts more than `max_drift_deg` away from it.
pub fn refit_patch_plane(
    mask: &Mask,
    points: &PointGrid,
    initial: &Vector3<f64>,
    k: &Intrinsics,
    max_drift_deg: f64,
) -> Result<Vector3<f64>> {
    mask.same_dims(points)?;
    let pts: Vec<Vector3<f64>> = mask
        .data()
        .iter()
        .zip(points.data())
        .filter_map(|(&m, p)| if m { *p } else { None })
        .collect();
    if pts.len() < 3 {
        return Err(Error::EmptyMask);
    }
    let scale = pts.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let mut normal = *initial;
    let mut inliers: Vec<bool> = Vec::new();
    for _ in 0..8 {
        let mut residuals: Vec<f64> = pts.iter().map(|p| normal.dot(p)).collect();
        let offset = median(&mut residuals.clone());
        for r in residuals.iter_mut() {
            *r = (*r - offset).abs();
        }
        let mad = median(&mut residuals.clone());
        let tol = (3.0 * 1.4826 * mad).max(1e-9 * scale);
        let next: Vec<bool> = residuals.iter().map(|&r| r <= tol).collect();
        if next == inliers {
            break;
        }
        inliers = next;
        let chosen: Vec<&Vector3<f64>> = pts.iter().zip(&inliers).filter(|(_, &i)| i).map(|(p, _)| p).collect();
        if chosen.len() < 3 {
            return Ok(*initial);
        }
        let centroid = chosen.iter().fold(Vector3::zeros(), |a, p| a + **p) / chosen.len() as f64;
        let mut cov = Matrix3::zeros();
        for p in &chosen {
            let q = **p - centroid;
            cov += q * q.transpose();
        }
        let Some((n, _)) = smallest_eigenvector(&cov) else {
            return Ok(*initial);
        };
        normal = if n.dot(&normal) < 0.0 { -n } else { n }.normalize();
    }
    if normal.dot(initial).abs() < max_drift_deg.to_radians().cos() {
        return Ok(*initial);
    }
    Ok(camera_facing(normal, mask, k))
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axial_map(w: usize, h: usize, axes: &[Vector3<f64>]) -> NormalMap {
        // Uneven shares keep the scatter eigenvalues distinct.
        Raster::from_fn(w, h, |x, y| {
            let t = (x + y * w) % 12;
            let (i, s) = match t {
                0..=5 => (0, 1.0),
                6..=9 => (1, -1.0),
                _ => (2, 1.0),
            };
            let s = if (x + y) % 3 == 0 { -s } else { s };
            Some(axes[i] * s)
        })
    }

    fn assert_frame_matches(frame: &OrthogonalFrame, axes: &[Vector3<f64>], tol: f64) {
        for a in axes {
            let best = frame.axes().iter().map(|c| c.dot(a).abs()).fold(0.0, f64::max);
            assert!((1.0 - best) < tol, "axis {a:?} not recovered: {best}");
        }
    }

    #[test]
    fn exact_axial_normals_give_identity_frame() {
        let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
        let normals = axial_map(40, 30, &axes);
        let (frame, assign) = cluster_normals_orthogonal(&normals, &OrthogonalParams::default());
        let frame = frame.unwrap();
        assert_frame_matches(&frame, &axes, 1e-12);
        assert_eq!(assign.labeled_count(), 40 * 30);
        let c = frame.matrix();
        assert!((c.transpose() * c - Matrix3::identity()).amax() <= 1e-9);
        assert!((c.determinant() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn too_few_normals_gives_empty_result() {
        let normals: NormalMap = Raster::new(20, 20, None);
        let (frame, assign) = cluster_normals_orthogonal(&normals, &OrthogonalParams::default());
        assert!(frame.is_none());
        assert_eq!(assign.labeled_count(), 0);
        let (axes, assign) = cluster_normals_histogram(&normals, &HistogramParams::default());
        assert!(axes.is_empty());
        assert_eq!(assign.labeled_count(), 0);
        let mut few: NormalMap = Raster::new(20, 20, None);
        for i in 0..99 {
            few.set(i % 20, i / 20, Some(Vector3::z()));
        }
        assert!(cluster_normals_orthogonal(&few, &OrthogonalParams::default())
            .0
            .is_none());
    }

    #[test]
    fn gate_excludes_far_normals() {
        let mut normals = axial_map(30, 30, &[Vector3::x(), Vector3::y(), Vector3::z()]);
        // 40 degrees off the nearest axis.
        let off = Vector3::new(40f64.to_radians().sin(), 0.0, 40f64.to_radians().cos());
        normals.set(3, 3, Some(off));
        let (_, assign) = cluster_normals_orthogonal(&normals, &OrthogonalParams::default());
        assert_eq!(assign.label(3, 3), None);
        assert!(assign.label(4, 3).is_some());
    }

    #[test]
    fn histogram_uniform_noise_has_no_hypotheses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normals: NormalMap = Raster::from_fn(200, 200, |_, _| {
            let v: Vector3<f64> = loop {
                let v = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if v.norm() > 0.1 && v.norm() <= 1.0 {
                    break v;
                }
            };
            Some(v.normalize())
        });
        let params = HistogramParams {
            threshold_frac: 0.1,
            ..HistogramParams::default()
        };
        let (axes, assign) = cluster_normals_histogram(&normals, &params);
        assert!(axes.is_empty());
        assert_eq!(assign.labeled_count(), 0);
    }

    #[test]
    fn histogram_single_direction() {
        let n = Vector3::new(0.3, -0.2, -0.9).normalize();
        let normals: NormalMap = Raster::new(50, 50, Some(n));
        let (axes, assign) = cluster_normals_histogram(&normals, &HistogramParams::default());
        assert_eq!(axes.len(), 1);
        assert!(axes[0].dot(&n).abs() > 1.0 - 1e-12);
        assert_eq!(assign.labeled_count(), 2500);
    }

    #[test]
    fn fibonacci_cells_are_unit_and_upper() {
        let cells = fibonacci_hemisphere(200);
        assert_eq!(cells.len(), 200);
        assert!(cells.iter().all(|c| (c.norm() - 1.0).abs() < 1e-12 && c.z > 0.0));
    }

    #[test]
    fn components_split_disjoint_blobs_and_apply_threshold() {
        let mut labels = Raster::new(200, 100, 0u8);
        for y in 0..50 {
            for x in 0..100 {
                labels.set(x, y, 1);
                labels.set(x + 100, y + 50, 1);
            }
        }
        // Touching diagonally only: still two components under 4-connectivity.
        let regions = connected_components(&AssignmentMap(labels.clone()), 1000);
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].pixel_count, 5000);
        assert_eq!(regions[0].seed, (0, 0));
        assert_eq!(regions[1].seed, (100, 50));

        let mut small = Raster::new(20, 20, 0u8);
        for i in 0..9 {
            small.set(i, 0, 2);
        }
        assert_eq!(connected_components(&AssignmentMap(small.clone()), 10).len(), 0);
        assert_eq!(connected_components(&AssignmentMap(small), 9).len(), 1);
    }

    #[test]
    fn refine_identical_normals() {
        let k = Intrinsics::new(100.0, 100.0, 10.0, 10.0, 20, 20).unwrap();
        let n = Vector3::new(0.1, 0.2, -1.0).normalize();
        let normals: NormalMap = Raster::new(20, 20, Some(n));
        let mask = Mask::new(20, 20, true);
        let r = refine_patch_normal(&mask, &normals, &k).unwrap();
        assert!((r - n).norm() < 1e-12);
        let empty = Mask::new(20, 20, false);
        assert!(matches!(
            refine_patch_normal(&empty, &normals, &k),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn refine_averages_symmetric_noise() {
        let k = Intrinsics::new(100.0, 100.0, 20.0, 20.0, 40, 40).unwrap();
        let n = Vector3::new(-0.2, 0.1, -1.0).normalize();
        let u = n.cross(&Vector3::x()).normalize();
        let v = n.cross(&u);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut data = Vec::new();
        for _ in 0..800 {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let t = 1f64.to_radians();
            let p = (n * t.cos() + (u * a.cos() + v * a.sin()) * t.sin()).normalize();
            data.push(Some(p));
            // Symmetric partner.
            let q = (n * t.cos() - (u * a.cos() + v * a.sin()) * t.sin()).normalize();
            data.push(Some(q));
        }
        let normals = Raster::from_vec(40, 40, data).unwrap();
        let r = refine_patch_normal(&Mask::new(40, 40, true), &normals, &k).unwrap();
        assert!(r.dot(&n).acos().to_degrees() < 0.2);
    }
}
