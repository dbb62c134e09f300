//! Block-drafter training objectives and their closed-form logit gradients.
//!
//! Every objective is computed on a `B x V` block of raw drafter scores. All
//! but `accept_rate` are weighted cross-entropies whose per-position
//! coefficients are treated as constants: the gradient of row `j` is
//! `coeff_j * (softmax(row_j) - target_j)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_unchecked, softmax_unchecked, Distribution, Matrix};
use crate::weights::{self, check_alpha, ConfidenceBlock, WeightVector};

/// `B x V` raw drafter scores, one row per block position.
pub type LogitBlock = Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TargetTokens(Vec<usize>);

impl TargetTokens {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Soft target rows, one distribution per block position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TargetDistBlock(Vec<Distribution>);

impl TargetDistBlock {
    pub fn new(rows: Vec<Distribution>) -> Self {
        Self(rows)
    }

    pub fn rows(&self) -> &[Distribution] {
        &self.0
    }

    /// Point masses on `targets`.
    pub fn dirac(targets: &TargetTokens, vocab: usize) -> Result<Self> {
        targets
            .tokens()
            .iter()
            .map(|&t| Distribution::dirac(vocab, t))
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dpace,
    Dflash,
    TopkMask,
    AcceptRate,
    CumulativeOnly,
    ContinuationOnly,
    TargetProb,
    Dpakl,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Dpace,
        LossKind::Dflash,
        LossKind::TopkMask,
        LossKind::AcceptRate,
        LossKind::CumulativeOnly,
        LossKind::ContinuationOnly,
        LossKind::TargetProb,
        LossKind::Dpakl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Dpace => "dpace",
            LossKind::Dflash => "dflash",
            LossKind::TopkMask => "topk_mask",
            LossKind::AcceptRate => "accept_rate",
            LossKind::CumulativeOnly => "cumulative_only",
            LossKind::ContinuationOnly => "continuation_only",
            LossKind::TargetProb => "target_prob",
            LossKind::Dpakl => "dpakl",
        }
    }

    /// Whether the objective needs soft target rows.
    pub fn needs_target_dists(self) -> bool {
        matches!(self, LossKind::TargetProb | LossKind::Dpakl)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = LossKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::invalid(format!("unknown loss kind `{s}` (expected one of {names:?})"))
            })
    }
}

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_gamma() -> f64 {
    4.0
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            alpha: DEFAULT_ALPHA,
            gamma: default_gamma(),
            top_k: DEFAULT_TOP_K,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma = {} must be positive", self.gamma)));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    /// d loss / d logits, `B x V`.
    pub grad: Matrix,
    /// Per-position coefficients applied to the cross-entropy terms (the 0/1
    /// mask for `topk_mask`, the undetached surrogate weights for `accept_rate`).
    pub weights: WeightVector,
}

fn check_shapes(logits: &LogitBlock, targets: &TargetTokens) -> Result<()> {
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(Error::invalid("empty logit block"));
    }
    if !logits.is_finite() {
        return Err(Error::invalid("non-finite logits"));
    }
    if targets.len() != logits.rows() {
        return Err(Error::invalid(format!(
            "{} targets for a block of {} positions",
            targets.len(),
            logits.rows()
        )));
    }
    if let Some((j, t)) = targets
        .tokens()
        .iter()
        .enumerate()
        .find(|(_, t)| **t >= logits.cols())
    {
        return Err(Error::invalid(format!(
            "target token {t} at position {} out of range for vocabulary {}",
            j + 1,
            logits.cols()
        )));
    }
    Ok(())
}

fn check_dists(logits: &LogitBlock, dists: &TargetDistBlock) -> Result<()> {
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(Error::invalid("empty logit block"));
    }
    if !logits.is_finite() {
        return Err(Error::invalid("non-finite logits"));
    }
    if dists.rows().len() != logits.rows() {
        return Err(Error::invalid(format!(
            "{} target rows for a block of {} positions",
            dists.rows().len(),
            logits.rows()
        )));
    }
    if let Some(d) = dists.rows().iter().find(|d| d.len() != logits.cols()) {
        return Err(Error::invalid(format!(
            "target row over {} tokens, expected {}",
            d.len(),
            logits.cols()
        )));
    }
    Ok(())
}

/// `q_j = softmax(row_j)[z*_j]`.
pub fn confidences_from_logits(logits: &LogitBlock, targets: &TargetTokens) -> Result<ConfidenceBlock> {
    check_shapes(logits, targets)?;
    ConfidenceBlock::new(raw_confidences(logits, targets))
}

fn raw_confidences(logits: &LogitBlock, targets: &TargetTokens) -> Vec<f64> {
    logits
        .iter_rows()
        .zip(targets.tokens())
        .map(|(row, &t)| log_softmax_unchecked(row)[t].exp())
        .collect()
}

/// `sum_j coeff_j * (-log q_j)` and its gradient with `coeff` held fixed.
fn weighted_ce(logits: &LogitBlock, targets: &TargetTokens, coeff: &[f64]) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (j, (row, &t)) in logits.iter_rows().zip(targets.tokens()).enumerate() {
        let w = coeff[j];
        if w == 0.0 {
            continue;
        }
        let log_p = log_softmax_unchecked(row);
        loss += w * -log_p[t];
        let g = grad.row_mut(j);
        for (gv, lp) in g.iter_mut().zip(&log_p) {
            *gv = w * lp.exp();
        }
        g[t] -= w;
    }
    (loss, grad)
}

/// `sum_j coeff_j * C_j` with `C_j = -sum_x p_j(x) log softmax(row_j)(x)`.
fn weighted_soft_ce(logits: &LogitBlock, dists: &TargetDistBlock, coeff: &[f64]) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (j, (row, p)) in logits.iter_rows().zip(dists.rows()).enumerate() {
        let w = coeff[j];
        if w == 0.0 {
            continue;
        }
        let log_q = log_softmax_unchecked(row);
        loss += w * soft_cross_entropy_from_log(p.probs(), &log_q);
        for ((gv, lq), px) in grad.row_mut(j).iter_mut().zip(&log_q).zip(p.probs()) {
            *gv = w * (lq.exp() - px);
        }
    }
    (loss, grad)
}

fn soft_cross_entropy_from_log(p: &[f64], log_q: &[f64]) -> f64 {
    -p.iter()
        .zip(log_q)
        .filter(|(px, _)| **px > 0.0)
        .map(|(px, lq)| px * lq)
        .sum::<f64>()
}

/// Soft-label cross-entropy `C = -sum_x p(x) log softmax(row)(x)`.
pub fn soft_cross_entropy(p: &Distribution, row: &[f64]) -> f64 {
    soft_cross_entropy_from_log(p.probs(), &log_softmax_unchecked(row))
}

fn detached(logits: &LogitBlock, targets: &TargetTokens, weights: WeightVector) -> LossResult {
    let (loss, grad) = weighted_ce(logits, targets, weights.values());
    LossResult { loss, grad, weights }
}

/// Weighted CE with suffix-sum-of-prefix-product weights over smoothed draft confidences.
pub fn loss_dpace(logits: &LogitBlock, targets: &TargetTokens, alpha: f64) -> Result<LossResult> {
    let q = confidences_from_logits(logits, targets)?;
    let w = weights::dpace_weights(&q, alpha)?;
    Ok(detached(logits, targets, w))
}

/// Weighted CE with the fixed decay `exp(-(j-1)/gamma)`.
pub fn loss_dflash(logits: &LogitBlock, targets: &TargetTokens, gamma: f64) -> Result<LossResult> {
    check_shapes(logits, targets)?;
    let w = weights::decay_weights(logits.rows(), gamma)?;
    Ok(detached(logits, targets, w))
}

/// Decay constant per block size. Sizes 8, 10, 12 and 16 use the reference
/// values; other sizes fall back to `round(B/2 - 1)`, floored at 1.
pub fn gamma_for_block(block: usize) -> f64 {
    match block {
        8 => 4.0,
        10 => 5.0,
        12 => 6.0,
        16 => 7.0,
        b => (b as f64 / 2.0 - 1.0).round().max(1.0),
    }
}

/// Whether `token` is among the `k` highest scores; ties with the k-th score count as inside.
pub fn in_top_k(row: &[f64], token: usize, k: usize) -> bool {
    let score = row[token];
    row.iter().filter(|s| **s > score).count() < k
}

/// Prefix mask `m_j = prod_{i<j} 1[z*_i in TopK(row_i)]`.
pub fn topk_prefix_mask(logits: &LogitBlock, targets: &TargetTokens, k: usize) -> Result<WeightVector> {
    check_shapes(logits, targets)?;
    if k == 0 || k > logits.cols() {
        return Err(Error::invalid(format!(
            "top_k = {k} outside [1, {}]",
            logits.cols()
        )));
    }
    let mut mask = Vec::with_capacity(logits.rows());
    let mut open = true;
    for (row, &t) in logits.iter_rows().zip(targets.tokens()) {
        mask.push(if open { 1.0 } else { 0.0 });
        open = open && in_top_k(row, t, k);
    }
    Ok(WeightVector::new(mask))
}

pub fn loss_topk_mask(logits: &LogitBlock, targets: &TargetTokens, k: usize) -> Result<LossResult> {
    let mask = topk_prefix_mask(logits, targets, k)?;
    Ok(detached(logits, targets, mask))
}

/// `-S(q)`, differentiated through every confidence.
///
/// Only `q_j` depends on row `j`, so `d(-S)/d row_j = -(dS/dq_j) q_j (onehot - p_j)`
/// where `(dS/dq_j) q_j = sum_{m>=j} prod_{i<=m} q_i` needs no division.
pub fn loss_accept_rate(logits: &LogitBlock, targets: &TargetTokens) -> Result<LossResult> {
    check_shapes(logits, targets)?;
    let q = ConfidenceBlock::new(raw_confidences(logits, targets))?;
    let loss = -weights::surrogate_s(&q);
    let w = weights::dpace_weights(&q, 0.0)?;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (j, (row, &t)) in logits.iter_rows().zip(targets.tokens()).enumerate() {
        let wj = w.values()[j];
        let g = grad.row_mut(j);
        for (gv, p) in g.iter_mut().zip(softmax_unchecked(row)) {
            *gv = wj * p;
        }
        g[t] -= wj;
    }
    Ok(LossResult {
        loss,
        grad,
        weights: w,
    })
}

/// Weighted CE with only the cumulative factor `prod_{i<=j} q~_i`.
pub fn loss_cumulative_only(logits: &LogitBlock, targets: &TargetTokens, alpha: f64) -> Result<LossResult> {
    let q = confidences_from_logits(logits, targets)?;
    let smoothed = weights::smooth_confidences(&q, alpha)?;
    let w = WeightVector::new(weights::prefix_products(&smoothed).values().to_vec());
    Ok(detached(logits, targets, w))
}

/// Weighted CE with only the continuation factor `f~_j`.
pub fn loss_continuation_only(logits: &LogitBlock, targets: &TargetTokens, alpha: f64) -> Result<LossResult> {
    let q = confidences_from_logits(logits, targets)?;
    let smoothed = weights::smooth_confidences(&q, alpha)?;
    let w = WeightVector::new(weights::continuation_values(&smoothed).values().to_vec());
    Ok(detached(logits, targets, w))
}

/// Weights from target probabilities `p(z*_i)`; cross-entropy still on the draft.
pub fn loss_target_prob(
    logits: &LogitBlock,
    targets: &TargetTokens,
    target_dists: Option<&TargetDistBlock>,
    alpha: f64,
) -> Result<LossResult> {
    check_shapes(logits, targets)?;
    let dists = target_dists.ok_or_else(|| Error::invalid("target_prob requires target distributions"))?;
    check_dists(logits, dists)?;
    let p = dists
        .rows()
        .iter()
        .zip(targets.tokens())
        .map(|(d, &t)| d.probs()[t])
        .collect();
    let w = weights::dpace_weights(&ConfidenceBlock::new(p)?, alpha)?;
    Ok(detached(logits, targets, w))
}

/// Weighted soft cross-entropy with weights from the proxy `exp(-C_j)`.
pub fn loss_dpakl(logits: &LogitBlock, target_dists: &TargetDistBlock, alpha: f64) -> Result<LossResult> {
    check_dists(logits, target_dists)?;
    let proxy = acceptance_proxy(logits, target_dists);
    let w = weights::dpace_weights(&ConfidenceBlock::new(proxy)?, alpha)?;
    let (loss, grad) = weighted_soft_ce(logits, target_dists, w.values());
    Ok(LossResult {
        loss,
        grad,
        weights: w,
    })
}

/// `exp(-C_j)` per position, clamped into `[0, 1]` against rounding.
fn acceptance_proxy(logits: &LogitBlock, dists: &TargetDistBlock) -> Vec<f64> {
    logits
        .iter_rows()
        .zip(dists.rows())
        .map(|(row, p)| (-soft_cross_entropy(p, row)).exp().clamp(0.0, 1.0))
        .collect()
}

/// Dispatches on `config.kind`. `target_dists` is required for `target_prob` and `dpakl`.
pub fn compute_loss(
    config: &LossConfig,
    logits: &LogitBlock,
    targets: &TargetTokens,
    target_dists: Option<&TargetDistBlock>,
) -> Result<LossResult> {
    config.validate()?;
    match config.kind {
        LossKind::Dpace => loss_dpace(logits, targets, config.alpha),
        LossKind::Dflash => loss_dflash(logits, targets, config.gamma),
        LossKind::TopkMask => loss_topk_mask(logits, targets, config.top_k),
        LossKind::AcceptRate => loss_accept_rate(logits, targets),
        LossKind::CumulativeOnly => loss_cumulative_only(logits, targets, config.alpha),
        LossKind::ContinuationOnly => loss_continuation_only(logits, targets, config.alpha),
        LossKind::TargetProb => loss_target_prob(logits, targets, target_dists, config.alpha),
        LossKind::Dpakl => {
            let dists = target_dists.ok_or_else(|| Error::invalid("dpakl requires target distributions"))?;
            loss_dpakl(logits, dists, config.alpha)
        }
    }
}

/// The objective whose exact gradient each loss reports: the weighted
/// cross-entropy with `coefficients` frozen, or the full surrogate for
/// `accept_rate` (which ignores `coefficients`). Finite differences of this
/// function check the analytic gradients.
pub fn detached_objective(
    kind: LossKind,
    logits: &LogitBlock,
    targets: &TargetTokens,
    target_dists: Option<&TargetDistBlock>,
    coefficients: &[f64],
) -> Result<f64> {
    check_shapes(logits, targets)?;
    if coefficients.len() != logits.rows() {
        return Err(Error::invalid("coefficient count does not match block size"));
    }
    Ok(match kind {
        LossKind::AcceptRate => {
            -weights::surrogate_s(&ConfidenceBlock::new(raw_confidences(logits, targets))?)
        }
        LossKind::Dpakl => {
            let dists = target_dists.ok_or_else(|| Error::invalid("dpakl requires target distributions"))?;
            check_dists(logits, dists)?;
            weighted_soft_ce(logits, dists, coefficients).0
        }
        _ => weighted_ce(logits, targets, coefficients).0,
    })
}

/// Plain per-position cross-entropy gradient `softmax(row) - onehot(target)`.
pub fn ce_grad_row(row: &[f64], target: usize) -> Vec<f64> {
    let mut g = softmax_unchecked(row);
    g[target] -= 1.0;
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn logits(rows: &[&[f64]]) -> LogitBlock {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn toks(t: &[usize]) -> TargetTokens {
        TargetTokens::new(t.to_vec())
    }

    #[test]
    fn confidence_examples() {
        let q = confidences_from_logits(&logits(&[&[0.0, 0.0]]), &toks(&[0])).unwrap();
        assert_eq!(q.values(), &[0.5]);
        let q = confidences_from_logits(&logits(&[&[0.0, 3f64.ln()]]), &toks(&[1])).unwrap();
        assert!((q.values()[0] - 0.75).abs() < 1e-15);
        let q = confidences_from_logits(&logits(&[&[0.3, -1.0], &[0.3, -1.0]]), &toks(&[1, 1])).unwrap();
        assert_eq!(q.values()[0], q.values()[1]);
        assert!(confidences_from_logits(&logits(&[&[0.0, 0.0]]), &toks(&[2])).is_err());
        assert!(confidences_from_logits(&logits(&[&[0.0, 0.0]]), &toks(&[0, 0])).is_err());
    }

    #[test]
    fn dpace_saturated_is_zero() {
        let l = logits(&[&[800.0, 0.0], &[0.0, 800.0]]);
        let r = loss_dpace(&l, &toks(&[0, 1]), 0.5).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grad.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn dpace_uniform_block_example() {
        // weights (1.734375, 0.984375, 0.421875), each CE term ln 2
        let l = logits(&[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let r = loss_dpace(&l, &toks(&[0, 0, 0]), 0.5).unwrap();
        assert_eq!(r.weights.values(), &[1.734375, 0.984375, 0.421875]);
        assert!((r.loss - 2.176_915_363_946_078).abs() < 1e-12, "{}", r.loss);
        assert!((r.grad.get(0, 0) + 0.5 * 1.734375).abs() < 1e-15);
        assert!((r.grad.get(2, 1) - 0.5 * 0.421875).abs() < 1e-15);
    }

    #[test]
    fn dflash_coefficients() {
        for gamma in [0.5, 4.0, 7.0, 100.0] {
            let l = Matrix::zeros(16, 3);
            let r = loss_dflash(&l, &TargetTokens::new(vec![0; 16]), gamma).unwrap();
            assert_eq!(r.weights.values()[0], 1.0);
        }
        let r = loss_dflash(&Matrix::zeros(16, 2), &TargetTokens::new(vec![1; 16]), 7.0).unwrap();
        assert!((r.weights.values()[7] - 0.367_879_441_171_442_33).abs() < 1e-15);
        let sat = logits(&[&[900.0, 0.0], &[900.0, 0.0]]);
        assert_eq!(loss_dflash(&sat, &toks(&[0, 0]), 3.0).unwrap().loss, 0.0);
        assert!(loss_dflash(&sat, &toks(&[0, 0]), 0.0).is_err());
    }

    #[test]
    fn gamma_table() {
        assert_eq!(gamma_for_block(16), 7.0);
        assert_eq!(gamma_for_block(10), 5.0);
        assert_eq!(gamma_for_block(8), 4.0);
        assert_eq!(gamma_for_block(12), 6.0);
        assert_eq!(gamma_for_block(20), 9.0);
        assert_eq!(gamma_for_block(1), 1.0);
        assert!(gamma_for_block(2) > 0.0);
    }

    #[test]
    fn topk_mask_kills_after_miss() {
        // target of row 1 is the lowest of 4 scores; K = 3 excludes it
        let l = logits(&[&[3.0, 2.0, 1.0, 0.0], &[0.0, 1.0, 0.0, 0.0], &[0.0; 4]]);
        let t = toks(&[3, 1, 2]);
        let r = loss_topk_mask(&l, &t, 3).unwrap();
        assert_eq!(r.weights.values(), &[1.0, 0.0, 0.0]);
        let q0 = confidences_from_logits(&l, &t).unwrap().values()[0];
        assert!((r.loss + q0.ln()).abs() < 1e-12);
        for j in 1..3 {
            assert!(r.grad.row(j).iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn topk_all_rank_one_is_plain_ce_sum() {
        let l = logits(&[&[2.0, 0.0, -1.0], &[0.0, 1.5, 0.2]]);
        let t = toks(&[0, 1]);
        let r = loss_topk_mask(&l, &t, 1).unwrap();
        let q = confidences_from_logits(&l, &t).unwrap();
        let ce: f64 = q.values().iter().map(|v| -v.ln()).sum();
        assert!((r.loss - ce).abs() < 1e-12);
    }

    #[test]
    fn topk_ties_count_inside() {
        // scores 5, 3, 3, 1: with K = 2 both tokens scoring 3 are inside
        let row = [5.0, 3.0, 3.0, 1.0];
        assert!(in_top_k(&row, 1, 2));
        assert!(in_top_k(&row, 2, 2));
        assert!(!in_top_k(&row, 3, 2));
        assert!(!in_top_k(&row, 3, 3));
        assert!(in_top_k(&row, 3, 4));
        let l = logits(&[&row, &row]);
        assert!(topk_prefix_mask(&l, &toks(&[0, 0]), 5).is_err());
        assert!(topk_prefix_mask(&l, &toks(&[0, 0]), 0).is_err());
    }

    #[test]
    fn accept_rate_examples() {
        let sat = logits(&[&[700.0, 0.0], &[700.0, 0.0], &[700.0, 0.0]]);
        assert_eq!(loss_accept_rate(&sat, &toks(&[0, 0, 0])).unwrap().loss, -3.0);

        let l = logits(&[&[0.2, -0.4, 1.0]]);
        let r = loss_accept_rate(&l, &toks(&[1])).unwrap();
        let q = confidences_from_logits(&l, &toks(&[1])).unwrap().values()[0];
        assert!((r.loss + q).abs() < 1e-15);
        // raising the target logit raises q and lowers the loss
        assert!(r.grad.get(0, 1) < 0.0);
        assert!(r.grad.get(0, 0) > 0.0 && r.grad.get(0, 2) > 0.0);
        let p = softmax_unchecked(l.row(0));
        for (v, pv) in p.iter().enumerate() {
            let onehot = if v == 1 { 1.0 } else { 0.0 };
            assert!((r.grad.get(0, v) + q * (onehot - pv)).abs() < 1e-15);
        }
    }

    #[test]
    fn ablation_weights_factor_dpace() {
        // q = (0.8, 0.5, 0.2) on the target tokens
        let rows: Vec<Vec<f64>> = [0.8f64, 0.5, 0.2]
            .iter()
            .map(|q| vec![q.ln(), (1.0 - q).ln()])
            .collect();
        let l = Matrix::from_rows(&rows).unwrap();
        let t = toks(&[0, 0, 0]);
        let cum = loss_cumulative_only(&l, &t, 0.5).unwrap();
        let cont = loss_continuation_only(&l, &t, 0.5).unwrap();
        let full = loss_dpace(&l, &t, 0.5).unwrap();
        for (a, e) in cum.weights.values().iter().zip([0.9, 0.675, 0.405]) {
            assert!((a - e).abs() < 1e-14);
        }
        for (a, e) in cont.weights.values().iter().zip([2.2, 1.6, 1.0]) {
            assert!((a - e).abs() < 1e-14);
        }
        for j in 0..3 {
            let prod = cum.weights.values()[j] * cont.weights.values()[j];
            assert!((prod - full.weights.values()[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn ablation_weights_saturated() {
        let sat = Matrix::from_rows(&vec![vec![600.0, 0.0]; 4]).unwrap();
        let t = TargetTokens::new(vec![0; 4]);
        assert_eq!(loss_cumulative_only(&sat, &t, 0.3).unwrap().weights.values(), &[1.0; 4]);
        assert_eq!(
            loss_continuation_only(&sat, &t, 0.3).unwrap().weights.values(),
            &[4.0, 3.0, 2.0, 1.0]
        );
    }

    #[test]
    fn target_prob_needs_dists() {
        let l = logits(&[&[0.0, 1.0]]);
        assert!(loss_target_prob(&l, &toks(&[0]), None, 0.5).is_err());
    }

    #[test]
    fn target_prob_with_onehot_target_ignores_draft() {
        let l = logits(&[&[0.0, 1.0, 2.0], &[3.0, -1.0, 0.0], &[0.5, 0.5, 0.0]]);
        let t = toks(&[2, 0, 1]);
        let d = TargetDistBlock::dirac(&t, 3).unwrap();
        let r = loss_target_prob(&l, &t, Some(&d), 0.5).unwrap();
        assert_eq!(r.weights.values(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn target_prob_matches_dpace_when_target_is_draft() {
        let l = logits(&[&[0.0, 1.0, 2.0], &[3.0, -1.0, 0.0]]);
        let t = toks(&[1, 2]);
        let d = TargetDistBlock::new(l.iter_rows().map(|r| crate::numerics::softmax(r).unwrap()).collect());
        let a = loss_target_prob(&l, &t, Some(&d), 0.5).unwrap();
        let b = loss_dpace(&l, &t, 0.5).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for (x, y) in a.weights.values().iter().zip(b.weights.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dpakl_uniform() {
        let v = 5;
        let l = Matrix::zeros(2, v);
        let d = TargetDistBlock::new(vec![Distribution::uniform(v).unwrap(); 2]);
        let c = soft_cross_entropy(&d.rows()[0], l.row(0));
        assert!((c - (v as f64).ln()).abs() < 1e-14);
        let r = loss_dpakl(&l, &d, 0.0).unwrap();
        // alpha = 0: weights are 1/V + 1/V^2 and 1/V^2
        let a = 1.0 / v as f64;
        assert!((r.weights.values()[0] - (a + a * a)).abs() < 1e-14);
        assert!((r.weights.values()[1] - a * a).abs() < 1e-14);
    }

    #[test]
    fn detached_gradient_rows_are_scaled_ce_rows() {
        let l = logits(&[&[0.1, -0.3, 0.7], &[1.1, 0.0, -0.2], &[0.0, 0.4, 0.4]]);
        let t = toks(&[2, 0, 1]);
        for kind in [LossKind::Dpace, LossKind::CumulativeOnly, LossKind::ContinuationOnly] {
            let r = compute_loss(&LossConfig::new(kind), &l, &t, None).unwrap();
            for j in 0..3 {
                let ce = ce_grad_row(l.row(j), t.tokens()[j]);
                for (v, cv) in ce.iter().enumerate() {
                    assert!((r.grad.get(j, v) - r.weights.values()[j] * cv).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn dpace_gradient_matches_frozen_weight_finite_differences() {
        let l = logits(&[&[0.1, -0.3, 0.7], &[1.1, 0.0, -0.2]]);
        let t = toks(&[2, 1]);
        let r = loss_dpace(&l, &t, 0.5).unwrap();
        let w = r.weights.values().to_vec();
        let fd = finite_diff_grad(
            |x| {
                let m = Matrix::from_vec(2, 3, x.to_vec()).unwrap();
                detached_objective(LossKind::Dpace, &m, &t, None, &w).unwrap()
            },
            l.as_slice(),
            1e-6,
        );
        assert!(crate::numerics::relative_error(r.grad.as_slice(), &fd) < 1e-8);
    }

    #[test]
    fn loss_kind_names_round_trip() {
        for kind in LossKind::ALL {
            assert_eq!(kind.as_str().parse::<LossKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.as_str()));
        }
        assert!("decayed".parse::<LossKind>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = LossConfig::new(LossKind::Dpace);
        assert!(c.validate().is_ok());
        c.alpha = 1.1;
        assert!(c.validate().is_err());
        let mut c = LossConfig::new(LossKind::Dflash);
        c.gamma = 0.0;
        assert!(c.validate().is_err());
        let c: std::result::Result<LossConfig, _> = serde_json::from_str(r#"{"kind":"dpace","beta":1}"#);
        assert!(c.is_err());
    }
}
