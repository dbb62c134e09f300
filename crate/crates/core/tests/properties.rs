mod common;

use common::{brute_force_expected_accepted, count_ranks, naive_weights, probs};
use dpace_core::analysis::{average_ranks, bin_means, spearman};
use dpace_core::losses::{loss_dpace, soft_cross_entropy, topk_prefix_mask};
use dpace_core::numerics::{clip_grad_norm, l2_norm, log_softmax, softmax};
use dpace_core::weights::{decay_weights, dpace_weights, dpace_weights_product_form, surrogate_s};
use dpace_core::{ConfidenceBlock, Matrix, TargetTokens};
use proptest::prelude::*;

fn confidences(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, 1..=max_len)
}

fn logits_row(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0..20.0f64, 2..=max_len)
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(row in logits_row(16), shift in -50.0..50.0f64) {
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let a = softmax(&row).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_matches_oracle(row in logits_row(16)) {
        let ours = softmax(&row).unwrap();
        let sum: f64 = ours.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        for (x, y) in ours.probs().iter().zip(probs(&row)) {
            prop_assert!((x - y).abs() <= 1e-14);
        }
        for (l, p) in log_softmax(&row).unwrap().iter().zip(ours.probs()) {
            prop_assert!(*l <= 0.0);
            prop_assert!((l.exp() - p).abs() <= 1e-14);
        }
    }

    #[test]
    fn weight_forms_agree_with_double_sum(q in confidences(32), alpha in 0.0..=1.0f64) {
        let block = ConfidenceBlock::new(q.clone()).unwrap();
        let suffix = dpace_weights(&block, alpha).unwrap();
        let product = dpace_weights_product_form(&block, alpha).unwrap();
        for ((s, p), n) in suffix.values().iter().zip(product.values()).zip(naive_weights(&q, alpha)) {
            prop_assert!((s - p).abs() <= 1e-10);
            prop_assert!((s - n).abs() <= 1e-10);
        }
    }

    #[test]
    fn weights_are_bounded_and_non_increasing(q in confidences(32), alpha in 0.0..=1.0f64) {
        let b = q.len();
        let w = dpace_weights(&ConfidenceBlock::new(q).unwrap(), alpha).unwrap();
        for (j, wj) in w.values().iter().enumerate() {
            prop_assert!(*wj >= 0.0);
            prop_assert!(*wj <= (b - j) as f64 + 1e-12);
        }
        for pair in w.values().windows(2) {
            prop_assert!(pair[0] >= pair[1]);
        }
    }

    #[test]
    fn weights_are_monotone_in_alpha(q in confidences(16), a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let block = ConfidenceBlock::new(q).unwrap();
        let w_lo = dpace_weights(&block, lo).unwrap();
        let w_hi = dpace_weights(&block, hi).unwrap();
        for (x, y) in w_lo.values().iter().zip(w_hi.values()) {
            prop_assert!(*x <= y + 1e-12);
        }
    }

    #[test]
    fn surrogate_is_expected_accepted_length(q in confidences(10)) {
        let b = q.len() as f64;
        let s = surrogate_s(&ConfidenceBlock::new(q.clone()).unwrap());
        prop_assert!((0.0..=b).contains(&s));
        prop_assert!((s - brute_force_expected_accepted(&q)).abs() <= 1e-12);
    }

    #[test]
    fn surrogate_is_weight_at_first_position_without_smoothing(q in confidences(16)) {
        let block = ConfidenceBlock::new(q).unwrap();
        let w = dpace_weights(&block, 0.0).unwrap();
        prop_assert!((w.values()[0] - surrogate_s(&block)).abs() <= 1e-12);
    }

    #[test]
    fn decay_weights_are_in_unit_interval(b in 1usize..64, gamma in 0.01..100.0f64) {
        let w = decay_weights(b, gamma).unwrap();
        prop_assert_eq!(w.values()[0], 1.0);
        for pair in w.values().windows(2) {
            prop_assert!(pair[1] < pair[0] && pair[1] > 0.0);
        }
    }

    #[test]
    fn jensen_bound_holds(p_row in logits_row(12), scale in 0.1..10.0f64) {
        let v = p_row.len();
        let p = softmax(&p_row).unwrap();
        let row: Vec<f64> = p_row.iter().rev().map(|x| x * scale).collect();
        let q = probs(&row);
        let inner: f64 = p.probs().iter().zip(&q).map(|(a, b)| a * b).sum();
        prop_assert_eq!(q.len(), v);
        prop_assert!((-soft_cross_entropy(&p, &row)).exp() <= inner + 1e-12);
    }

    #[test]
    fn spearman_invariant_under_monotone_maps(
        pairs in prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 3..60)
    ) {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let base = spearman(&xs, &ys).unwrap().rho;
        let mapped_x: Vec<f64> = xs.iter().map(|x| (x / 40.0).exp() + x.powi(3)).collect();
        let mapped_y: Vec<f64> = ys.iter().map(|y| y.atan()).collect();
        // atan can merge distinct large values; only compare when it did not.
        let distinct = |v: &[f64]| count_ranks(v).iter().all(|r| r.fract() == 0.0);
        if distinct(&ys) == distinct(&mapped_y) {
            let mapped = spearman(&mapped_x, &mapped_y).unwrap().rho;
            prop_assert!((base - mapped).abs() <= 1e-12);
        }
        let swapped = spearman(&ys, &xs).unwrap().rho;
        prop_assert!((base - swapped).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn ranks_match_counting_oracle(xs in prop::collection::vec(0u8..10, 1..80)) {
        let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let ranks = average_ranks(&xs);
        prop_assert_eq!(&ranks, &count_ranks(&xs));
        let n = xs.len() as f64;
        prop_assert!((ranks.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() <= 1e-9);
    }

    #[test]
    fn bins_conserve_counts(
        pairs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..200),
        bins in 1usize..30
    ) {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let summary = bin_means(&xs, &ys, bins).unwrap();
        prop_assert_eq!(summary.counts.iter().sum::<usize>(), xs.len());
        for e in summary.edges.windows(2) {
            prop_assert!(e[0] < e[1]);
        }
        for (m, c) in summary.means.iter().zip(&summary.counts) {
            prop_assert_eq!(m.is_some(), *c > 0);
        }
    }

    #[test]
    fn clipping_caps_the_norm(g in prop::collection::vec(-10.0..10.0f64, 1..50), cap in 0.01..20.0f64) {
        let mut clipped = g.clone();
        let before = clip_grad_norm(&mut clipped, cap);
        prop_assert!((before - l2_norm(&g)).abs() <= 1e-12);
        prop_assert!(l2_norm(&clipped) <= cap * (1.0 + 1e-12));
        if before <= cap {
            prop_assert_eq!(clipped, g);
        }
    }

    #[test]
    fn topk_mask_is_a_prefix(
        rows in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 5), 1..8),
        k in 1usize..=5,
        seed in 0usize..5
    ) {
        let b = rows.len();
        let logits = Matrix::from_rows(&rows).unwrap();
        let targets = TargetTokens::new((0..b).map(|j| (j + seed) % 5).collect());
        let mask = topk_prefix_mask(&logits, &targets, k).unwrap();
        let v = mask.values();
        prop_assert!(v.iter().all(|m| *m == 0.0 || *m == 1.0));
        prop_assert!(v.windows(2).all(|p| p[0] >= p[1]));
        let full = topk_prefix_mask(&logits, &targets, 5).unwrap();
        prop_assert!(full.values().iter().all(|m| *m == 1.0));
    }

    #[test]
    fn dpace_gradient_rows_sum_to_zero(
        rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 4), 1..8),
        alpha in 0.0..=1.0f64
    ) {
        let logits = Matrix::from_rows(&rows).unwrap();
        let targets = TargetTokens::new((0..rows.len()).map(|j| j % 4).collect());
        let result = loss_dpace(&logits, &targets, alpha).unwrap();
        prop_assert!(result.loss >= 0.0);
        for j in 0..rows.len() {
            let s: f64 = result.grad.row(j).iter().sum();
            prop_assert!(s.abs() <= 1e-12);
        }
    }
}
