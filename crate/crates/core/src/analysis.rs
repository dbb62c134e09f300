//! Rank correlation, binned summaries and per-position weight traces.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::drafter::StepMetrics;
use crate::error::{Error, Result};
use crate::specdec::BlockOutcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub statistic: String,
    pub rho: f64,
    pub n: usize,
    /// Two-sided, from the t statistic under a large-sample normal approximation.
    pub p_value: f64,
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn p_value(rho: f64, n: usize) -> f64 {
    if n <= 2 {
        return 1.0;
    }
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let t = rho * ((n as f64 - 2.0) / (1.0 - rho * rho)).sqrt();
    erfc(t.abs() / std::f64::consts::SQRT_2)
}

/// Spearman's rho: Pearson correlation of average-tie ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<CorrelationReport> {
    spearman_named("spearman", xs, ys)
}

pub fn spearman_named(statistic: &str, xs: &[f64], ys: &[f64]) -> Result<CorrelationReport> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!(
            "samples differ in length: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("spearman needs at least 2 samples"));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN sample"));
    }
    let rho = pearson(&average_ranks(xs), &average_ranks(ys)).ok_or_else(|| {
        Error::UndefinedCorrelation(format!("`{statistic}`: one sample is constant"))
    })?;
    Ok(CorrelationReport {
        statistic: statistic.to_string(),
        rho,
        n: xs.len(),
        p_value: p_value(rho, xs.len()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticComparison {
    /// rho of `sum_i q_i` against emitted length.
    pub sum_q: CorrelationReport,
    /// rho of `S = sum_k prod_{i<=k} q_i` against emitted length.
    pub surrogate: CorrelationReport,
}

/// Spearman of both block statistics against emitted length, over the
/// blocks that were not truncated.
pub fn compare_statistics(blocks: &[BlockOutcome]) -> Result<StatisticComparison> {
    let kept: Vec<&BlockOutcome> = blocks.iter().filter(|b| !b.truncated).collect();
    if kept.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 complete blocks, got {}",
            kept.len()
        )));
    }
    let tau: Vec<f64> = kept.iter().map(|b| b.emitted as f64).collect();
    let sum_q: Vec<f64> = kept.iter().map(|b| b.q.values().iter().sum()).collect();
    let surrogate: Vec<f64> = kept.iter().map(|b| b.surrogate).collect();
    Ok(StatisticComparison {
        sum_q: spearman_named("sum_q", &sum_q, &tau)?,
        surrogate: spearman_named("surrogate", &surrogate, &tau)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    /// `num_bins + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    /// `None` marks an empty bin.
    pub means: Vec<Option<f64>>,
    /// Population standard deviation per bin.
    pub stds: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

/// Equal-width bins over `[min xs, max xs]` with the mean and spread of `ys`
/// in each. The last bin is closed on the right. When every `x` is equal a
/// single unit-width bin centred on it is used.
pub fn bin_means(xs: &[f64], ys: &[f64], num_bins: usize) -> Result<BinSummary> {
    if num_bins == 0 {
        return Err(Error::invalid("num_bins must be >= 1"));
    }
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::invalid("bin_means needs equal-length, non-empty samples"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite sample"));
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi, bins) = if hi > lo { (lo, hi, num_bins) } else { (lo - 0.5, lo + 0.5, 1) };
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
    edges.push(hi);

    let mut sums = vec![0.0; bins];
    let mut sq = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for (x, y) in xs.iter().zip(ys) {
        let i = (((x - lo) / width) as usize).min(bins - 1);
        sums[i] += y;
        sq[i] += y * y;
        counts[i] += 1;
    }
    let means: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let stds = means
        .iter()
        .zip(sq.iter().zip(&counts))
        .map(|(m, (s2, &c))| m.map(|m| (s2 / c as f64 - m * m).max(0.0).sqrt()))
        .collect();
    Ok(BinSummary {
        edges,
        means,
        stds,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTrace {
    /// Steps `[start, end)`.
    pub start: usize,
    pub end: usize,
    pub mean: Vec<f64>,
    /// `(step, weights)` for every step in the window.
    pub rows: Vec<(usize, Vec<f64>)>,
}

/// Per-position mean weight over the metrics whose step falls in `window`.
pub fn weight_trace(metrics: &[StepMetrics], window: Range<usize>) -> Result<WeightTrace> {
    let rows: Vec<(usize, Vec<f64>)> = metrics
        .iter()
        .filter(|m| window.contains(&m.step))
        .map(|m| (m.step, m.mean_weight.clone()))
        .collect();
    let width = rows
        .first()
        .map(|(_, w)| w.len())
        .ok_or_else(|| Error::invalid(format!("no steps in window {window:?}")))?;
    if rows.iter().any(|(_, w)| w.len() != width) {
        return Err(Error::invalid("weight rows differ in block size"));
    }
    let mut mean = vec![0.0; width];
    for (_, w) in &rows {
        for (m, v) in mean.iter_mut().zip(w) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    Ok(WeightTrace {
        start: window.start,
        end: window.end,
        mean,
        rows,
    })
}
