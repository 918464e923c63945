mod common;

use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unwarp::features::{gaussian_blur, Keypoint};
use unwarp::rectification::{
    backwarp_keypoints, glancing_mask, rectify_image, rectifying_homography, rectifying_rotation, warp_patch,
    Homography, KeypointTransport, RectifiedPatch, RectifyConfig,
};
use unwarp::synthetic::{plane_to_image, two_view_case, CameraPose, CaseOptions, Layout, ScenePlane, Texture};
use unwarp::{DepthMap, GrayImage, Intrinsics, Mask, Raster};

use common::*;

/// Oracle plane index under a patch, by majority of rendered plane ids.
fn plane_under(patch: &RectifiedPatch, plane_id: &Raster<u8>) -> usize {
    let mut votes = [0usize; 256];
    for (m, id) in patch.patch.mask.data().iter().zip(plane_id.data()) {
        if *m && *id > 0 {
            votes[*id as usize] += 1;
        }
    }
    let best = (1..256).max_by_key(|&i| votes[i]).unwrap();
    best - 1
}

/// NCC between the rectified raster and the texture sampled exactly at the
/// plane point each valid rectified pixel depicts.
fn texture_ncc(
    patch: &RectifiedPatch,
    plane: &ScenePlane,
    pose: &CameraPose,
    k: &Intrinsics,
    ids: &Raster<u8>,
    id: u8,
) -> f64 {
    let to_plane = plane_to_image(plane, pose, k).unwrap().inverse().unwrap();
    let h_inv = patch.homography.inverse().unwrap();
    let (mut got, mut want) = (Vec::new(), Vec::new());
    for y in 0..patch.height {
        for x in 0..patch.width {
            if !*patch.raster.valid.get(x, y) {
                continue;
            }
            let (u, v) = h_inv.apply(x as f64, y as f64).unwrap();
            // Skip samples whose bilinear footprint touches another surface.
            let (u0, v0) = (u.floor() as i64, v.floor() as i64);
            let clean = (0..2).all(|dy| (0..2).all(|dx| ids.try_get(u0 + dx, v0 + dy) == Some(&id)));
            if !clean {
                continue;
            }
            let (a, b) = to_plane.apply(u, v).unwrap();
            got.push(*patch.raster.image.get(x, y) as f64);
            want.push(plane.texture.sample(a, b) as f64);
        }
    }
    assert!(got.len() > 1000, "only {} samples", got.len());
    ncc(&got, &want)
}

fn corner_scene() -> (Vec<ScenePlane>, Intrinsics) {
    // Concave corner 4 m ahead; each wall meets the optical axis at 45 deg.
    let crease = Vector3::new(0.0, -3.0, 4.0);
    let left = Vector3::new(-1.0, 0.0, -1.0).normalize();
    let right = Vector3::new(1.0, 0.0, -1.0).normalize();
    let planes = vec![
        ScenePlane::new(crease, left, Vector3::y(), (5.5, 6.0), Texture::new(21)).unwrap(),
        ScenePlane::new(crease, right, Vector3::y(), (5.5, 6.0), Texture::new(22)).unwrap(),
    ];
    (planes, Intrinsics::new(700.0, 700.0, 159.5, 119.5, 320, 240).unwrap())
}

#[test]
fn two_perpendicular_planes_rectify_to_their_textures() {
    let (planes, k) = corner_scene();
    let pose = origin_pose();
    let view = render(&planes, &pose, &k);
    let rset = rectify_image(&view.image, &view.depth, &k, &RectifyConfig::default()).unwrap();
    assert_eq!(rset.patches.len(), 2);
    let mut seen = [false; 2];
    for p in &rset.patches {
        let i = plane_under(p, &view.plane_id);
        seen[i] = true;
        let score = texture_ncc(p, &planes[i], &pose, &k, &view.plane_id, i as u8 + 1);
        assert!(score >= 0.98, "plane {i}: NCC {score:.4}");
    }
    assert_eq!(seen, [true, true]);
}

#[test]
fn rectified_views_of_one_plane_agree_up_to_a_similarity() {
    let case = two_view_case(35.0, 3.0, Layout::SinglePlane, 3, &CaseOptions::default()).unwrap();
    let cfg = RectifyConfig::default();
    let ra = rectify_image(&case.view_a.image, &case.view_a.depth, &case.k, &cfg).unwrap();
    let rb = rectify_image(&case.view_b.image, &case.view_b.depth, &case.k, &cfg).unwrap();
    let (pa, pb) = (&ra.patches[0], &rb.patches[0]);
    let ga = plane_to_image(&case.planes[0], &case.pose_a, &case.k).unwrap();
    let gb = plane_to_image(&case.planes[0], &case.pose_b, &case.k).unwrap();
    // rectified B -> plane -> rectified A
    let s = pa
        .homography
        .compose(&ga)
        .unwrap()
        .compose(&gb.inverse().unwrap())
        .unwrap()
        .compose(&pb.homography.inverse().unwrap())
        .unwrap();
    let m = s.matrix();
    assert!(m[(2, 0)].abs() < 1e-9 && m[(2, 1)].abs() < 1e-9, "not affine: {m}");
    let a = m.fixed_view::<2, 2>(0, 0);
    let sim = (a.transpose() * a) / (a.determinant().abs());
    assert!(
        (sim - nalgebra::Matrix2::identity()).amax() < 1e-6,
        "not a similarity: {m}"
    );

    let (mut x_b, mut x_a) = (Vec::new(), Vec::new());
    for y in 0..pb.height {
        for x in 0..pb.width {
            if !*pb.raster.valid.get(x, y) {
                continue;
            }
            let (u, v) = s.apply(x as f64, y as f64).unwrap();
            let (ui, vi) = (u.floor() as i64, v.floor() as i64);
            let inside = (0..2).all(|dy| (0..2).all(|dx| pa.raster.valid.try_get(ui + dx, vi + dy) == Some(&true)));
            if inside {
                x_b.push(*pb.raster.image.get(x, y) as f64);
                x_a.push(pa.raster.image.bilinear(u, v).unwrap() as f64);
            }
        }
    }
    assert!(x_a.len() > 5000, "overlap of {} px", x_a.len());
    let score = ncc(&x_a, &x_b);
    assert!(score >= 0.95, "NCC {score:.4}");
}

#[test]
fn framing_preserves_area_and_contains_the_mask() {
    let case = two_view_case(60.0, 3.0, Layout::GroundPlusWall, 12, &CaseOptions::default()).unwrap();
    let rset = rectify_image(
        &case.view_a.image,
        &case.view_a.depth,
        &case.k,
        &RectifyConfig::default(),
    )
    .unwrap();
    assert!(!rset.patches.is_empty());
    for p in &rset.patches {
        assert!(p.width.max(p.height) <= 4096);
        let ratio = p.raster.valid.count() as f64 / p.patch.mask.count() as f64;
        assert!((0.9..=1.1).contains(&ratio), "area ratio {ratio:.3}");

        let (w, h) = p.patch.mask.dims();
        let pixels: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| *p.patch.mask.get(x, y))
            .collect();
        let extremes = [
            pixels.iter().min_by_key(|q| q.0),
            pixels.iter().max_by_key(|q| q.0),
            pixels.iter().min_by_key(|q| q.1),
            pixels.iter().max_by_key(|q| q.1),
        ];
        for &&(x, y) in extremes.iter().flatten() {
            let (u, v) = p.homography.apply(x as f64, y as f64).unwrap();
            assert!(
                u >= -0.5 && v >= -0.5 && u <= p.width as f64 + 0.5 && v <= p.height as f64 + 0.5,
                "({u}, {v})"
            );
        }
    }
    // Non-planar mask is the complement of the patch union.
    for i in 0..rset.non_planar.len() {
        let in_patch = rset.patches.iter().any(|p| p.patch.mask.data()[i]);
        assert_eq!(rset.non_planar.data()[i], !in_patch);
    }
}

#[test]
fn steep_rotation_with_negative_corner_entry_is_framed() {
    // Rotating 80 deg about y makes the normalized map's bottom-right entry
    // negative; the patch on the right still lies in front of the virtual
    // camera and must be accepted.
    let k = k_320();
    let alpha = 80f64.to_radians();
    let n = Vector3::new(-alpha.sin(), 0.0, -alpha.cos());
    let r = rectifying_rotation(&n).unwrap();
    let raw = k.matrix() * r.matrix() * k.inverse_matrix();
    assert!(raw[(2, 2)] < 0.0);
    let mask = Mask::from_fn(320, 240, |x, y| (200..300).contains(&x) && (50..150).contains(&y));
    let framing = rectifying_homography(&k, &r, &mask, 4096).unwrap();
    assert!(framing.width > 0 && framing.height > 0);
    for (x, y) in [(200.0, 50.0), (299.0, 149.0), (200.0, 149.0), (299.0, 50.0)] {
        let (u, v) = framing.homography.apply(x, y).unwrap();
        assert!(u > -1.0 && v > -1.0 && u < framing.width as f64 + 1.0 && v < framing.height as f64 + 1.0);
    }
}

#[test]
fn glancing_trim_stops_at_the_threshold() {
    let k = k_320();
    let tilt = 63.5f64.to_radians();
    let n = Vector3::new(0.0, tilt.sin(), -tilt.cos());
    let full = Mask::new(320, 240, true);
    let trimmed = glancing_mask(&full, &n, &k, 80.0).unwrap();
    let incidence = |x: usize, y: usize| {
        let r = k.unproject(x as f64, y as f64).normalize();
        (-n.dot(&r)).clamp(-1.0, 1.0).acos().to_degrees()
    };
    let max = (0..240).map(|y| incidence(160, y)).fold(0.0, f64::max);
    assert!(max >= 85.0, "scene too mild: {max}");
    let (mut kept, mut removed) = (0, 0);
    let mut boundary = Vec::new();
    for y in 0..240 {
        for x in 0..320 {
            let t = incidence(x, y);
            if *trimmed.get(x, y) {
                kept += 1;
                assert!(t <= 80.0 + 1e-9);
                if y + 1 < 240 && !*trimmed.get(x, y + 1) {
                    boundary.push(t);
                }
            } else {
                removed += 1;
                assert!(t > 80.0 - 0.5);
            }
        }
    }
    assert!(kept > 0 && removed > 0);
    assert!(!boundary.is_empty());
    for t in boundary {
        assert!((t - 80.0).abs() <= 0.5, "boundary incidence {t}");
    }
    assert!(glancing_mask(&full, &n, &k, 0.0).is_none());
}

#[test]
fn double_warp_loses_only_interpolation() {
    let case = two_view_case(20.0, 3.0, Layout::SinglePlane, 1, &CaseOptions::default()).unwrap();
    // Point-sampled checker edges are aliased; a camera would band-limit them.
    let image = &gaussian_blur(&case.view_a.image, 1.0);
    let (w, h) = image.dims();
    let hm = Homography::new(Matrix3::new(1.05, 0.08, 12.0, -0.06, 0.97, 9.0, 1e-5, -2e-5, 1.0)).unwrap();
    let forward = warp_patch(image, &hm, w + 60, h + 60, None).unwrap();
    let back = warp_patch(&forward.image, &hm.inverse().unwrap(), w, h, Some(&forward.valid)).unwrap();
    let (mut sum, mut n) = (0.0, 0);
    for y in 4..h - 4 {
        for x in 4..w - 4 {
            let interior = (y - 3..=y + 3).all(|yy| (x - 3..=x + 3).all(|xx| *back.valid.get(xx, yy)));
            if interior {
                sum += (back.image.get(x, y) - image.get(x, y)).abs() as f64;
                n += 1;
            }
        }
    }
    assert!(n > w * h / 2);
    let mae = sum / n as f64;
    assert!(mae <= 2.0 / 255.0, "mean abs error {mae}");
}

#[test]
fn noise_depth_yields_no_patches() {
    let k = k_320();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let depth = DepthMap::new(Raster::from_fn(320, 240, |_, _| rng.random_range(1.0..10.0)));
    let image = GrayImage::from_fn(320, 240, |x, y| ((x * 7 + y * 13) % 17) as f32 / 17.0);
    let rset = rectify_image(&image, &depth, &k, &RectifyConfig::default()).unwrap();
    assert!(rset.patches.is_empty());
    assert!(rset.non_planar.data().iter().all(|&m| m));
}

#[test]
fn full_hd_runtime_budget() {
    let k = Intrinsics::new(1400.0, 1400.0, 959.5, 539.5, 1920, 1080).unwrap();
    let pose = CameraPose::look_at(Vector3::new(0.0, 4.0, 2.0), Vector3::new(0.0, 0.0, 0.5), Vector3::z()).unwrap();
    let planes = [
        ScenePlane::new(
            Vector3::new(-10.0, -10.0, 0.0),
            Vector3::x(),
            Vector3::y(),
            (20.0, 20.0),
            Texture::new(1),
        )
        .unwrap(),
        ScenePlane::new(
            Vector3::new(-10.0, -1.0, 0.0),
            Vector3::x(),
            Vector3::z(),
            (20.0, 6.0),
            Texture::new(2),
        )
        .unwrap(),
    ];
    let view = render(&planes, &pose, &k);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let rset = pool.install(|| rectify_image(&view.image, &view.depth, &k, &RectifyConfig::default()).unwrap());
    let elapsed = start.elapsed();
    assert_eq!(rset.patches.len(), 2);
    assert!(elapsed <= Duration::from_secs(2), "{elapsed:?}");
}

fn rotation_homography(seed: u64) -> Homography {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = k_320();
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
    let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.random_range(0.0..0.6));
    let s = rng.random_range(0.5..2.0);
    let m = Matrix3::new(s, 0.0, 40.0, 0.0, s, -25.0, 0.0, 0.0, 1.0) * k.matrix() * r.matrix() * k.inverse_matrix();
    Homography::new(m).unwrap()
}

proptest! {
    #[test]
    fn backwarp_inverts_the_forward_map(seed in 0u64..1000, x in 20.0f64..300.0, y in 20.0f64..220.0) {
        let h = rotation_homography(seed);
        let (u, v) = h.apply(x, y).unwrap();
        let kp = Keypoint { x: u, y: v, scale: 2.0, orientation: 0.3, score: 1.0 };
        let out = backwarp_keypoints(&[kp], &h, 320, 240, KeypointTransport::Full).unwrap();
        prop_assert_eq!(out.len(), 1);
        let back = out[0].1;
        prop_assert!((back.x - x).abs() <= 1e-9 && (back.y - y).abs() <= 1e-9, "{} {}", back.x - x, back.y - y);
        prop_assert!(back.scale > 0.0);
    }
}
