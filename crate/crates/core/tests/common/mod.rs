//! Independent oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use startdet::model::{backward_grads, forward_scores, NormMode, ScorerParams};
use startdet::{Grid, Start, StartSet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `count` distinct sorted frames below `frames`.
pub fn distinct_frames(rng: &mut ChaCha8Rng, count: usize, frames: usize) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, frames, count.min(frames)).into_vec();
    picked.sort_unstable();
    picked
}

pub fn random_starts(
    rng: &mut ChaCha8Rng,
    behaviors: usize,
    max_per_behavior: usize,
    frames: usize,
) -> StartSet {
    let lists = (0..behaviors)
        .map(|_| {
            let n = rng.random_range(0..=max_per_behavior);
            distinct_frames(rng, n, frames)
        })
        .collect();
    StartSet::from_frames(lists).unwrap()
}

pub fn random_scored(
    rng: &mut ChaCha8Rng,
    behaviors: usize,
    max_per_behavior: usize,
    frames: usize,
) -> StartSet {
    let lists = (0..behaviors)
        .map(|_| {
            let n = rng.random_range(0..=max_per_behavior);
            distinct_frames(rng, n, frames)
                .into_iter()
                .map(|f| Start::scored(f, rng.random_range(0.0..1.0)))
                .collect()
        })
        .collect();
    StartSet::new(lists).unwrap()
}

pub fn random_grid(
    rng: &mut ChaCha8Rng,
    frames: usize,
    behaviors: usize,
    lo: f64,
    hi: f64,
) -> Grid {
    let values = (0..frames * behaviors)
        .map(|_| rng.random_range(lo..hi))
        .collect();
    Grid::from_vec(frames, behaviors, values).unwrap()
}

/// Minimum of `sum_i m[i][perm[i]]` over every permutation.
pub fn permutation_minimum(m: &[Vec<f64>]) -> f64 {
    fn go(m: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == m.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..m.len() {
            if !used[c] {
                used[c] = true;
                go(m, row + 1, used, acc + m[row][c], best);
                used[c] = false;
            }
        }
    }
    if m.is_empty() {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    go(m, 0, &mut vec![false; m.len()], 0.0, &mut best);
    best
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest componentwise `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Full-model gradient check: `loss` maps the score grids of `features` to a
/// value and per-grid gradients. Returns the worst relative error over every
/// parameter.
pub fn model_gradient_error(
    params: &ScorerParams,
    features: &[Array2<f64>],
    mode: NormMode,
    step: f64,
    loss: &dyn Fn(&[startdet::ScoreGrid]) -> (f64, Vec<Grid>),
) -> f64 {
    let views: Vec<_> = features.iter().map(|f| f.view()).collect();
    let cache = forward_scores(params, &views, mode).unwrap();
    let (_, grads) = loss(cache.scores());
    let analytic = backward_grads(params, &cache, &grads).unwrap();

    let mut worst: f64 = 0.0;
    let tensors = params.weights.tensors().len();
    for k in 0..tensors {
        let base = params.weights.tensors()[k].to_vec();
        let a = analytic.tensors()[k].to_vec();
        let n = numeric_gradient(&base, step, |x| {
            let mut p = params.clone();
            p.weights.tensors_mut()[k].copy_from_slice(x);
            let c = forward_scores(&p, &views, mode).unwrap();
            loss(c.scores()).0
        });
        worst = worst.max(max_relative_error(&a, &n, 1e-6));
    }
    worst
}
