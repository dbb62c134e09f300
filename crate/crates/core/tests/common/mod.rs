//! Independent reference implementations used as test oracles. None of these
//! call into the library's numerical routines.

#![allow(dead_code)]

use std::path::PathBuf;

use dpace_core::specdec::{BlockDrafter, TargetModel};
use dpace_core::{LogitBlock, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Weight at each position as an explicit double sum of smoothed prefix products.
pub fn naive_weights(q: &[f64], alpha: f64) -> Vec<f64> {
    let b = q.len();
    let smoothed: Vec<f64> = q.iter().map(|qi| (1.0 - alpha) * qi + alpha).collect();
    (0..b)
        .map(|j| {
            (j..b)
                .map(|m| smoothed[..=m].iter().product::<f64>())
                .sum()
        })
        .collect()
}

/// `E[X]` by explicit enumeration: probability of each accept/reject pattern
/// times its count of leading accepts.
pub fn brute_force_expected_accepted(q: &[f64]) -> f64 {
    let b = q.len();
    let mut total = 0.0;
    for mask in 0..(1usize << b) {
        let accepts: Vec<bool> = (0..b).map(|i| mask & (1 << i) != 0).collect();
        let p: f64 = accepts
            .iter()
            .zip(q)
            .map(|(&a, &qi)| if a { qi } else { 1.0 - qi })
            .product();
        let leading = accepts.iter().take_while(|a| **a).count();
        total += p * leading as f64;
    }
    total
}

/// Ranks with ties averaged, computed by counting rather than sorting.
pub fn count_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|x| {
            let less = xs.iter().filter(|y| *y < x).count() as f64;
            let equal = xs.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn rank_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&count_ranks(xs), &count_ranks(ys))
}

/// Softmax probabilities by direct exponentiation with a max shift.
pub fn probs(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// First index of the maximum.
pub fn first_max(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt` straight from the target table.
pub fn greedy_reference(target: &TargetModel, prompt: &[usize], new_tokens: usize) -> Vec<usize> {
    let mut tokens = prompt.to_vec();
    for _ in 0..new_tokens {
        let t = first_max(target.row(&tokens));
        tokens.push(t);
    }
    tokens
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Drafter that reads the target's greedy continuation and corrupts each
/// position independently with probability `noise`.
pub struct PeekingDrafter<'a> {
    pub target: &'a TargetModel,
    pub block: usize,
    pub context: usize,
    pub noise: f64,
    pub seed: u64,
}

impl BlockDrafter for PeekingDrafter<'_> {
    fn block_size(&self) -> usize {
        self.block
    }

    fn context_len(&self) -> usize {
        self.context
    }

    fn draft_logits(&self, context: &[usize]) -> dpace_core::Result<LogitBlock> {
        let v = self.target.vocab();
        let salt = context.iter().fold(self.seed, |h, t| h.wrapping_mul(31).wrapping_add(*t as u64));
        let mut r = rng(salt);
        let mut path = context.to_vec();
        let mut rows = Vec::with_capacity(self.block);
        for _ in 0..self.block {
            let truth = first_max(self.target.row(&path));
            let proposal = if r.random::<f64>() < self.noise { r.random_range(0..v) } else { truth };
            let mut row: Vec<f64> = (0..v).map(|_| r.random::<f64>()).collect();
            row[proposal] = 3.0;
            rows.push(row);
            path.push(truth);
        }
        Matrix::from_rows(&rows)
    }
}
