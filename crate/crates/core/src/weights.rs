//! Per-position weights derived from the accepted-length surrogate.
//!
//! For draft confidences `q_1..q_B` on the target-selected tokens, the
//! surrogate `S = sum_k prod_{i<=k} q_i` approximates the expected number of
//! accepted draft tokens. Its log-derivative with respect to position `j` is
//! the cumulative confidence through `j` times the continuation value from
//! `j` onward. The weights here use smoothed confidences
//! `q~_i = (1 - alpha) q_i + alpha`, which keep every prefix product above
//! `alpha^j`, and are computed as suffix sums of prefix products in O(B).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Draft confidences on the target-selected token at each block position.
///
/// Entries lie in `[0, 1]`. Exact zeros are admitted because a softmax can
/// underflow and because a zero-confidence block is a legitimate simulation
/// input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ConfidenceBlock(Vec<f64>);

impl ConfidenceBlock {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::invalid("confidence block must have B >= 1"));
        }
        if let Some((i, v)) = q
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::invalid(format!(
                "confidence q_{} = {v} outside [0, 1]",
                i + 1
            )));
        }
        Ok(Self(q))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn block_size(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<f64>> for ConfidenceBlock {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ConfidenceBlock> for Vec<f64> {
    fn from(value: ConfidenceBlock) -> Self {
        value.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedBlock {
    values: Vec<f64>,
    alpha: f64,
}

impl SmoothedBlock {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// `P_j = prod_{i<=j} q~_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixProducts(Vec<f64>);

impl PrefixProducts {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `f~_j = 1 + sum_{m>j} prod_{j<i<=m} q~_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationValues(Vec<f64>);

impl ContinuationValues {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Per-position loss coefficients. Plain data: nothing differentiates through them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha = {alpha} outside [0, 1]")));
    }
    Ok(())
}

pub fn smooth_confidences(q: &ConfidenceBlock, alpha: f64) -> Result<SmoothedBlock> {
    check_alpha(alpha)?;
    let values = q.values().iter().map(|qi| (1.0 - alpha) * qi + alpha).collect();
    Ok(SmoothedBlock { values, alpha })
}

pub fn prefix_products(smoothed: &SmoothedBlock) -> PrefixProducts {
    let mut running = 1.0;
    PrefixProducts(
        smoothed
            .values
            .iter()
            .map(|q| {
                running *= q;
                running
            })
            .collect(),
    )
}

/// Backward recurrence `f~_B = 1`, `f~_j = 1 + q~_{j+1} f~_{j+1}`.
pub fn continuation_values(smoothed: &SmoothedBlock) -> ContinuationValues {
    let q = &smoothed.values;
    let mut f = vec![1.0; q.len()];
    for j in (0..q.len().saturating_sub(1)).rev() {
        f[j] = 1.0 + q[j + 1] * f[j + 1];
    }
    ContinuationValues(f)
}

/// Suffix sums of prefix products: `w_j = sum_{m>=j} P_m`.
pub fn suffix_sums(prefix: &PrefixProducts) -> WeightVector {
    let mut acc = 0.0;
    let mut w: Vec<f64> = prefix
        .0
        .iter()
        .rev()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    w.reverse();
    WeightVector(w)
}

/// Position weights `w_j = sum_{m>=j} prod_{i<=m} q~_i`.
pub fn dpace_weights(q: &ConfidenceBlock, alpha: f64) -> Result<WeightVector> {
    let smoothed = smooth_confidences(q, alpha)?;
    Ok(suffix_sums(&prefix_products(&smoothed)))
}

/// The same weights through the factored form `P_j * f~_j`.
pub fn dpace_weights_product_form(q: &ConfidenceBlock, alpha: f64) -> Result<WeightVector> {
    let smoothed = smooth_confidences(q, alpha)?;
    let prefix = prefix_products(&smoothed);
    let cont = continuation_values(&smoothed);
    Ok(WeightVector(
        prefix.0.iter().zip(&cont.0).map(|(p, f)| p * f).collect(),
    ))
}

/// Accepted-length surrogate `S = sum_k prod_{i<=k} q_i`.
pub fn surrogate_s(q: &ConfidenceBlock) -> f64 {
    let mut running = 1.0;
    q.values()
        .iter()
        .map(|qi| {
            running *= qi;
            running
        })
        .sum()
}

/// Exponential position decay `exp(-(j-1)/gamma)` for `j = 1..=block`.
pub fn decay_weights(block: usize, gamma: f64) -> Result<WeightVector> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma = {gamma} must be positive")));
    }
    Ok(WeightVector(
        (0..block).map(|j| (-(j as f64) / gamma).exp()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(q: &[f64]) -> ConfidenceBlock {
        ConfidenceBlock::new(q.to_vec()).unwrap()
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (a, e) in actual.iter().zip(expected) {
            assert!((a - e).abs() <= tol, "{actual:?} vs {expected:?}");
        }
    }

    #[test]
    fn smoothing_examples() {
        let q = block(&[0.8, 0.5, 0.2]);
        assert_close(smooth_confidences(&q, 0.5).unwrap().values(), &[0.9, 0.75, 0.6], 1e-15);
        assert_eq!(smooth_confidences(&q, 0.0).unwrap().values(), q.values());
        assert_eq!(smooth_confidences(&q, 1.0).unwrap().values(), &[1.0; 3]);
        assert!(smooth_confidences(&q, 1.5).is_err());
        assert!(smooth_confidences(&q, -0.1).is_err());
    }

    #[test]
    fn prefix_product_examples() {
        let s = smooth_confidences(&block(&[0.8, 0.5, 0.2]), 0.5).unwrap();
        assert_close(prefix_products(&s).values(), &[0.9, 0.675, 0.405], 1e-15);
        let ones = smooth_confidences(&block(&[1.0; 4]), 0.3).unwrap();
        assert_eq!(prefix_products(&ones).values(), &[1.0; 4]);
        let single = smooth_confidences(&block(&[0.3]), 0.0).unwrap();
        assert_eq!(prefix_products(&single).values(), &[0.3]);
    }

    #[test]
    fn continuation_examples() {
        let s = smooth_confidences(&block(&[0.8, 0.5, 0.2]), 0.5).unwrap();
        assert_close(continuation_values(&s).values(), &[2.2, 1.6, 1.0], 1e-15);
        let ones = smooth_confidences(&block(&[1.0; 5]), 0.0).unwrap();
        assert_eq!(continuation_values(&ones).values(), &[5.0, 4.0, 3.0, 2.0, 1.0]);
        let single = smooth_confidences(&block(&[0.4]), 0.2).unwrap();
        assert_eq!(continuation_values(&single).values(), &[1.0]);
    }

    #[test]
    fn weight_examples() {
        let q = block(&[0.8, 0.5, 0.2]);
        let w = dpace_weights(&q, 0.5).unwrap();
        assert_close(w.values(), &[1.98, 1.08, 0.405], 1e-14);
        assert_close(dpace_weights_product_form(&q, 0.5).unwrap().values(), w.values(), 1e-14);

        for alpha in [0.0, 0.4, 1.0] {
            let w = dpace_weights(&block(&[1.0; 6]), alpha).unwrap();
            assert_eq!(w.values(), &[6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        }
        let w = dpace_weights(&block(&[0.3]), 0.5).unwrap();
        assert_eq!(w.values(), &[0.65]);
    }

    #[test]
    fn surrogate_examples() {
        assert!((surrogate_s(&block(&[0.8, 0.5, 0.2])) - 1.28).abs() < 1e-15);
        assert_eq!(surrogate_s(&block(&[1.0; 7])), 7.0);
        assert_eq!(surrogate_s(&block(&[0.5, 0.5])), 0.75);
    }

    #[test]
    fn decay_examples() {
        let w = decay_weights(16, 7.0).unwrap();
        assert_eq!(w.values()[0], 1.0);
        assert!((w.values()[7] - (-1f64).exp()).abs() < 1e-15);
        assert!(decay_weights(4, 0.0).is_err());
        assert!(decay_weights(4, -1.0).is_err());
    }

    #[test]
    fn confidence_validation() {
        assert!(ConfidenceBlock::new(vec![]).is_err());
        assert!(ConfidenceBlock::new(vec![1.2]).is_err());
        assert!(ConfidenceBlock::new(vec![f64::NAN]).is_err());
        assert!(ConfidenceBlock::new(vec![0.0, 1.0]).is_ok());
    }
}
