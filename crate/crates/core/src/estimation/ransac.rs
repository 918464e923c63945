use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    /// Inlier threshold in pixels.
    pub threshold: f64,
    pub confidence: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl RansacParams {
    pub fn new(threshold: f64, seed: u64) -> Self {
        Self {
            threshold,
            confidence: 0.999,
            max_iters: 10_000,
            seed,
        }
    }
}

/// SplitMix64 finalizer; a cheap, well-mixed 64-bit hash.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for item `id` of a run seeded with `global`, independent of the
/// order in which items are processed.
pub fn derive_seed(global: u64, id: u64) -> u64 {
    splitmix64(global ^ splitmix64(id))
}

/// Iterations needed to draw one all-inlier sample with `confidence`.
pub(crate) fn required_iterations(inlier_ratio: f64, sample_size: usize, confidence: f64, cap: usize) -> usize {
    let p = inlier_ratio.powi(sample_size as i32);
    if p >= 1.0 {
        return 1;
    }
    if p <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

pub(crate) struct Consensus<M> {
    pub model: M,
    pub inliers: Vec<usize>,
}

/// Inliers of `model` and the truncated residual sum used to break ties.
pub(crate) fn score<M>(model: &M, n: usize, threshold: f64, residual: &impl Fn(&M, usize) -> f64) -> (Vec<usize>, f64) {
    let mut inliers = Vec::new();
    let mut cost = 0.0;
    for i in 0..n {
        let r = residual(model, i);
        if r <= threshold {
            inliers.push(i);
            cost += r;
        } else {
            cost += threshold;
        }
    }
    (inliers, cost)
}

/// Plain RANSAC over minimal samples. Returns `None` when no sample produced
/// a model; `degenerate_only` reports whether every sample was rejected by
/// the solver.
pub(crate) fn run<M>(
    n: usize,
    sample_size: usize,
    params: &RansacParams,
    fit: impl Fn(&[usize]) -> Option<M>,
    residual: impl Fn(&M, usize) -> f64,
) -> (Option<Consensus<M>>, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Consensus<M>, f64)> = None;
    let mut needed = params.max_iters;
    let mut any_model = false;
    let mut iter = 0;
    while iter < needed.min(params.max_iters) {
        iter += 1;
        let idx = sample(&mut rng, n, sample_size).into_vec();
        let Some(model) = fit(&idx) else {
            continue;
        };
        any_model = true;
        let (inliers, cost) = score(&model, n, params.threshold, &residual);
        let better = match &best {
            None => true,
            Some((b, bc)) => inliers.len() > b.inliers.len() || (inliers.len() == b.inliers.len() && cost < *bc),
        };
        if better {
            needed = required_iterations(
                inliers.len() as f64 / n as f64,
                sample_size,
                params.confidence,
                params.max_iters,
            );
            best = Some((Consensus { model, inliers }, cost));
        }
    }
    (best.map(|(c, _)| c), !any_model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_count_formula() {
        assert_eq!(required_iterations(1.0, 4, 0.999, 100), 1);
        assert_eq!(required_iterations(0.0, 4, 0.999, 100), 100);
        // log(0.001) / log(1 - 0.5^4) = 107.03
        assert_eq!(required_iterations(0.5, 4, 0.999, 10_000), 108);
    }
}
