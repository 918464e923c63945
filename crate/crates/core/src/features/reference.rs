//! Built-in multi-scale Harris feature with an oriented intensity-patch
//! descriptor.

use std::f64::consts::PI;

use rayon::prelude::*;

use super::{support_inside, DescriptorKind, Descriptors, FeatureExtractor, FeatureSet, Keypoint, Provenance};
use crate::raster::{GrayImage, Mask, Raster};

const DESC_GRID: usize = 16;
const ORI_BINS: usize = 36;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceParams {
    pub octaves: usize,
    pub levels_per_octave: usize,
    pub harris_k: f64,
    pub max_features: usize,
    /// Scale-normalized response floor.
    pub min_response: f32,
    /// Half-side of the descriptor support in units of keypoint scale.
    pub support_radius: f64,
    /// Descriptor sample spacing in units of keypoint scale.
    pub descriptor_spacing: f64,
}

impl Default for ReferenceParams {
    fn default() -> Self {
        Self {
            octaves: 4,
            levels_per_octave: 3,
            harris_k: 0.04,
            max_features: 800,
            min_response: 1e-7,
            support_radius: 16.0,
            descriptor_spacing: 1.25,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReferenceExtractor {
    pub params: ReferenceParams,
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    let (w, h) = img.dims();
    if sigma <= 0.0 || w == 0 || h == 0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let src = img.data();
    let mut tmp = vec![0f32; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let line = &src[y * w..(y + 1) * w];
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0f32;
            for (j, kv) in k.iter().enumerate() {
                let sx = (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * line[sx];
            }
            *out = acc;
        }
    });
    let mut out = vec![0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (j, kv) in k.iter().enumerate() {
            let sy = (y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize;
            let line = &tmp[sy * w..(sy + 1) * w];
            for (o, v) in row.iter_mut().zip(line) {
                *o += kv * v;
            }
        }
    });
    Raster::from_vec(w, h, out).expect("dims")
}

/// Keep even pixels: octave pixel `x` sits at `2x` in the parent.
fn decimate(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width().div_ceil(2), img.height().div_ceil(2));
    Raster::from_fn(w, h, |x, y| *img.get(2 * x, 2 * y))
}

fn gradient(img: &GrayImage, x: usize, y: usize) -> (f32, f32) {
    let (w, h) = img.dims();
    let xl = x.saturating_sub(1);
    let xr = (x + 1).min(w - 1);
    let yu = y.saturating_sub(1);
    let yd = (y + 1).min(h - 1);
    let gx = (img.get(xr, y) - img.get(xl, y)) * 0.5;
    let gy = (img.get(x, yd) - img.get(x, yu)) * 0.5;
    (gx, gy)
}

struct Level {
    smoothed: GrayImage,
    response: Raster<f32>,
    sigma: f64,
}

fn harris_level(img: &GrayImage, sigma: f64, k: f64) -> Level {
    let smoothed = gaussian_blur(img, sigma);
    let (w, h) = img.dims();
    let mut a = Raster::new(w, h, 0f32);
    let mut b = Raster::new(w, h, 0f32);
    let mut c = Raster::new(w, h, 0f32);
    for y in 0..h {
        for x in 0..w {
            let (gx, gy) = gradient(&smoothed, x, y);
            a.set(x, y, gx * gx);
            b.set(x, y, gy * gy);
            c.set(x, y, gx * gy);
        }
    }
    let si = 2.0 * sigma;
    let (a, b, c) = (gaussian_blur(&a, si), gaussian_blur(&b, si), gaussian_blur(&c, si));
    let norm = sigma.powi(4) as f32;
    let k = k as f32;
    let response = Raster::from_fn(w, h, |x, y| {
        let (a, b, c) = (*a.get(x, y), *b.get(x, y), *c.get(x, y));
        (a * b - c * c - k * (a + b) * (a + b)) * norm
    });
    Level {
        smoothed,
        response,
        sigma,
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    octave: usize,
    level: usize,
    /// Sub-pixel position in octave pixels.
    ox: f64,
    oy: f64,
    response: f32,
}

/// Offset of the vertex of the parabola through three samples, clamped to
/// half a sample.
fn parabola_peak(l: f32, c: f32, r: f32) -> f64 {
    let den = (l - 2.0 * c + r) as f64;
    if den.abs() < 1e-20 {
        return 0.0;
    }
    (0.5 * (l - r) as f64 / den).clamp(-0.5, 0.5)
}

/// 3x3x3 maximum with a raster-order tie break so plateaus keep one point.
fn is_local_max(levels: &[Level], li: usize, x: usize, y: usize) -> bool {
    let v = *levels[li].response.get(x, y);
    for (dl, lvl) in levels[li - 1..=li + 1].iter().enumerate() {
        for dy in 0..3 {
            for dx in 0..3 {
                if dl == 1 && dy == 1 && dx == 1 {
                    continue;
                }
                let n = *lvl.response.get(x + dx - 1, y + dy - 1);
                let earlier = (dl, dy, dx) < (1, 1, 1);
                if (earlier && n >= v) || (!earlier && n > v) {
                    return false;
                }
            }
        }
    }
    true
}

impl ReferenceExtractor {
    pub fn new(params: ReferenceParams) -> Self {
        Self { params }
    }

    fn octave_sigmas(&self) -> Vec<f64> {
        let l = self.params.levels_per_octave as f64;
        (-1..=self.params.levels_per_octave as i32)
            .map(|i| 2f64.powf(i as f64 / l))
            .collect()
    }

    fn build_pyramid(&self, image: &GrayImage) -> Vec<GrayImage> {
        let mut pyr = vec![image.clone()];
        for _ in 1..self.params.octaves {
            let prev = pyr.last().expect("non-empty");
            if prev.width().min(prev.height()) < 32 {
                break;
            }
            pyr.push(decimate(&gaussian_blur(prev, 1.0)));
        }
        pyr
    }

    /// Corner position as the least-squares point orthogonal to the
    /// surrounding gradients. Falls back to `None` when the structure is not
    /// corner-like or the estimate wanders beyond the detection scale.
    fn refine_corner(&self, lvl: &Level, ox: f64, oy: f64) -> Option<(f64, f64)> {
        let sw = lvl.sigma;
        let radius = (3.0 * sw).ceil() as i64;
        let (w, h) = lvl.smoothed.dims();
        let (mut qx, mut qy) = (ox, oy);
        for _ in 0..5 {
            let (cx, cy) = (qx.round() as i64, qy.round() as i64);
            let (mut a, mut b, mut c, mut bx, mut by) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in (cy - radius).max(0)..=(cy + radius).min(h as i64 - 1) {
                for x in (cx - radius).max(0)..=(cx + radius).min(w as i64 - 1) {
                    let (fx, fy) = (x as f64 - qx, y as f64 - qy);
                    let wt = (-(fx * fx + fy * fy) / (2.0 * sw * sw)).exp();
                    let (gx, gy) = gradient(&lvl.smoothed, x as usize, y as usize);
                    let (gx, gy) = (gx as f64, gy as f64);
                    let (gxx, gxy, gyy) = (gx * gx * wt, gx * gy * wt, gy * gy * wt);
                    a += gxx;
                    b += gxy;
                    c += gyy;
                    bx += gxx * x as f64 + gxy * y as f64;
                    by += gxy * x as f64 + gyy * y as f64;
                }
            }
            let det = a * c - b * b;
            if !(det > 1e-6 * (a + c) * (a + c)) {
                return None;
            }
            let nx = (c * bx - b * by) / det;
            let ny = (a * by - b * bx) / det;
            let step = (nx - qx).hypot(ny - qy);
            (qx, qy) = (nx, ny);
            if step < 1e-4 {
                break;
            }
        }
        ((qx - ox).hypot(qy - oy) <= 1.5 * sw && qx >= 0.0 && qy >= 0.0 && qx <= (w - 1) as f64 && qy <= (h - 1) as f64)
            .then_some((qx, qy))
    }

    fn orientation(&self, lvl: &Level, ox: f64, oy: f64) -> f64 {
        let sw = 1.5 * lvl.sigma;
        let radius = (3.0 * sw).ceil() as i64;
        let (cx, cy) = (ox.round() as i64, oy.round() as i64);
        let (w, h) = lvl.smoothed.dims();
        let mut hist = [0f64; ORI_BINS];
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                let (fx, fy) = (x as f64 - ox, y as f64 - oy);
                let d2 = fx * fx + fy * fy;
                if d2 > (radius * radius) as f64 {
                    continue;
                }
                let (gx, gy) = gradient(&lvl.smoothed, x as usize, y as usize);
                let mag = ((gx * gx + gy * gy) as f64).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let ang = (gy as f64).atan2(gx as f64);
                let bin = (((ang + PI) / (2.0 * PI) * ORI_BINS as f64).floor() as usize) % ORI_BINS;
                hist[bin] += mag * (-d2 / (2.0 * sw * sw)).exp();
            }
        }
        for _ in 0..2 {
            let prev = hist;
            for i in 0..ORI_BINS {
                hist[i] = 0.25 * prev[(i + ORI_BINS - 1) % ORI_BINS] + 0.5 * prev[i] + 0.25 * prev[(i + 1) % ORI_BINS];
            }
        }
        let best = (0..ORI_BINS)
            .max_by(|&a, &b| hist[a].total_cmp(&hist[b]).then(b.cmp(&a)))
            .expect("bins");
        let l = hist[(best + ORI_BINS - 1) % ORI_BINS];
        let r = hist[(best + 1) % ORI_BINS];
        let off = parabola_peak(l as f32, hist[best] as f32, r as f32);
        let ang = (best as f64 + 0.5 + off) * 2.0 * PI / ORI_BINS as f64 - PI;
        ang.rem_euclid(2.0 * PI)
    }

    fn describe(&self, lvl: &Level, ox: f64, oy: f64, theta: f64) -> Option<Vec<f32>> {
        let sp = self.params.descriptor_spacing * lvl.sigma;
        let (s, c) = theta.sin_cos();
        let half = (DESC_GRID as f64 - 1.0) / 2.0;
        let mut d = Vec::with_capacity(DESC_GRID * DESC_GRID);
        for r in 0..DESC_GRID {
            for q in 0..DESC_GRID {
                let (u, v) = ((q as f64 - half) * sp, (r as f64 - half) * sp);
                let x = ox + c * u - s * v;
                let y = oy + s * u + c * v;
                d.push(lvl.smoothed.bilinear_clamped(x, y) as f64);
            }
        }
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        d.iter_mut().for_each(|v| *v -= mean);
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return None;
        }
        Some(d.into_iter().map(|v| (v / norm) as f32).collect())
    }
}

impl FeatureExtractor for ReferenceExtractor {
    fn id(&self) -> &'static str {
        "reference"
    }

    fn support_radius(&self) -> f64 {
        self.params.support_radius
    }

    fn descriptor_kind(&self) -> DescriptorKind {
        DescriptorKind::Float {
            dim: DESC_GRID * DESC_GRID,
        }
    }

    fn extract(&self, image: &GrayImage, support: Option<&Mask>) -> FeatureSet {
        let mut out = FeatureSet::empty(self.descriptor_kind());
        if image.width() < 3 || image.height() < 3 {
            return out;
        }
        let sigmas = self.octave_sigmas();
        let pyramid = self.build_pyramid(image);
        let octaves: Vec<Vec<Level>> = pyramid
            .par_iter()
            .map(|img| {
                sigmas
                    .iter()
                    .map(|&s| harris_level(img, s, self.params.harris_k))
                    .collect()
            })
            .collect();
        let holes = support.map(|m| m.hole_integral());

        let mut cands = Vec::new();
        for (o, levels) in octaves.iter().enumerate() {
            let (w, h) = levels[0].response.dims();
            if w < 3 || h < 3 {
                continue;
            }
            let step = (1u64 << o) as f64;
            for li in 1..levels.len() - 1 {
                let resp = &levels[li].response;
                for y in 1..h - 1 {
                    for x in 1..w - 1 {
                        let v = *resp.get(x, y);
                        if !(v > self.params.min_response) || !is_local_max(levels, li, x, y) {
                            continue;
                        }
                        let ox = x as f64 + parabola_peak(*resp.get(x - 1, y), v, *resp.get(x + 1, y));
                        let oy = y as f64 + parabola_peak(*resp.get(x, y - 1), v, *resp.get(x, y + 1));
                        if let Some(holes) = &holes {
                            let probe = Keypoint {
                                x: ox * step,
                                y: oy * step,
                                scale: levels[li].sigma * step,
                                orientation: 0.0,
                                score: 0.0,
                            };
                            if !support_inside(&probe, self.params.support_radius, holes) {
                                continue;
                            }
                        }
                        cands.push(Candidate {
                            octave: o,
                            level: li,
                            ox,
                            oy,
                            response: v,
                        });
                    }
                }
            }
        }
        cands.sort_by(|a, b| {
            b.response
                .total_cmp(&a.response)
                .then(a.octave.cmp(&b.octave))
                .then(a.level.cmp(&b.level))
                .then(a.oy.total_cmp(&b.oy))
                .then(a.ox.total_cmp(&b.ox))
        });

        let described: Vec<Option<(Keypoint, Vec<f32>)>> = cands
            .par_iter()
            .take(self.params.max_features)
            .map(|c| {
                let lvl = &octaves[c.octave][c.level];
                let (ox, oy) = self.refine_corner(lvl, c.ox, c.oy).unwrap_or((c.ox, c.oy));
                let c = Candidate { ox, oy, ..*c };
                let theta = self.orientation(lvl, c.ox, c.oy);
                let desc = self.describe(lvl, c.ox, c.oy, theta)?;
                let step = (1u64 << c.octave) as f64;
                Some((
                    Keypoint {
                        x: c.ox * step,
                        y: c.oy * step,
                        scale: lvl.sigma * step,
                        orientation: theta,
                        score: c.response as f64,
                    },
                    desc,
                ))
            })
            .collect();
        let mut data = Vec::new();
        for (kp, desc) in described.into_iter().flatten() {
            out.keypoints.push(kp);
            out.provenance.push(Provenance::NonPlanar);
            data.extend_from_slice(&desc);
        }
        out.descriptors = Descriptors::Float {
            dim: DESC_GRID * DESC_GRID,
            data,
        };
        out
    }
}
