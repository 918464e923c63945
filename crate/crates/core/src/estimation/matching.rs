use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{Descriptors, FeatureSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    /// Index into the query set.
    pub a: usize,
    /// Index into the train set.
    pub b: usize,
    pub distance: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// Nearest and second-nearest train indices with distances.
type Neighbors = (usize, f32, f32);

fn squared_norms(data: &[f32], dim: usize) -> Vec<f32> {
    data.chunks_exact(dim).map(|d| d.iter().map(|v| v * v).sum()).collect()
}

fn float_neighbors(qa: &[f32], qb: &[f32], dim: usize) -> Vec<Option<Neighbors>> {
    let nb = squared_norms(qb, dim);
    qa.par_chunks_exact(dim)
        .map(|a| {
            let na: f32 = a.iter().map(|v| v * v).sum();
            let mut best = (usize::MAX, f32::INFINITY, f32::INFINITY);
            for (j, b) in qb.chunks_exact(dim).enumerate() {
                let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let d = (na + nb[j] - 2.0 * dot).max(0.0);
                if d < best.1 {
                    best = (j, d, best.1);
                } else if d < best.2 {
                    best.2 = d;
                }
            }
            (best.0 != usize::MAX).then(|| (best.0, best.1.sqrt(), best.2.sqrt()))
        })
        .collect()
}

fn bit_neighbors(qa: &[u8], qb: &[u8], bytes: usize) -> Vec<Option<Neighbors>> {
    qa.par_chunks_exact(bytes)
        .map(|a| {
            let mut best = (usize::MAX, f32::INFINITY, f32::INFINITY);
            for (j, b) in qb.chunks_exact(bytes).enumerate() {
                let d = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum::<u32>() as f32;
                if d < best.1 {
                    best = (j, d, best.1);
                } else if d < best.2 {
                    best.2 = d;
                }
            }
            (best.0 != usize::MAX).then_some(best)
        })
        .collect()
}

fn neighbors(a: &Descriptors, b: &Descriptors) -> Result<Vec<Option<Neighbors>>> {
    match (a, b) {
        (Descriptors::Float { dim: da, data: qa }, Descriptors::Float { dim: db, data: qb }) if da == db => {
            Ok(float_neighbors(qa, qb, *da))
        }
        (Descriptors::Bits { bytes: da, data: qa }, Descriptors::Bits { bytes: db, data: qb }) if da == db => {
            Ok(bit_neighbors(qa, qb, *da))
        }
        _ => Err(Error::DescriptorMismatch(format!("{:?} vs {:?}", a.kind(), b.kind()))),
    }
}

/// Nearest-neighbor matching with the ratio test `d1 / d2 < ratio`. A query
/// with a single candidate has no second neighbor and passes. With `mutual`
/// the train feature's own nearest query must be the same feature.
pub fn match_descriptors(a: &FeatureSet, b: &FeatureSet, ratio: f64, mutual: bool) -> Result<MatchSet> {
    let fwd = neighbors(&a.descriptors, &b.descriptors)?;
    let back = if mutual {
        Some(neighbors(&b.descriptors, &a.descriptors)?)
    } else {
        None
    };
    let ratio = ratio as f32;
    let matches = fwd
        .into_iter()
        .enumerate()
        .filter_map(|(i, n)| {
            let (j, d1, d2) = n?;
            let pass = if d2.is_infinite() {
                true
            } else {
                d2 > 0.0 && d1 < ratio * d2
            };
            if !pass {
                return None;
            }
            if let Some(back) = &back {
                if back[j].map(|(k, _, _)| k) != Some(i) {
                    return None;
                }
            }
            Some(Match {
                a: i,
                b: j,
                distance: d1,
            })
        })
        .collect();
    Ok(MatchSet { matches })
}

/// CSV dump: `idx_a,idx_b,distance,inlier`.
pub fn write_matches_csv(path: &Path, matches: &MatchSet, inliers: &[usize]) -> Result<()> {
    let mut flags = vec![false; matches.len()];
    for &i in inliers {
        if let Some(f) = flags.get_mut(i) {
            *f = true;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["idx_a", "idx_b", "distance", "inlier"])?;
    for (m, inl) in matches.matches.iter().zip(flags) {
        w.write_record([
            m.a.to_string(),
            m.b.to_string(),
            format!("{:.6}", m.distance),
            u8::from(inl).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
