//! Central finite-difference verification of every loss gradient.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{compute_loss, detached_objective, LossConfig, LossKind, TargetDistBlock, TargetTokens};
use crate::numerics::{finite_diff_grad, relative_error, softmax, Matrix};
use crate::rng::{self, streams, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSettings {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub max_block: usize,
    pub max_vocab: usize,
    /// Multiplies every analytic gradient before comparison. Anything other
    /// than 1 should make the check fail; it exists to prove that it can.
    pub grad_scale: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            step: 1e-6,
            tolerance: 1e-5,
            max_block: 6,
            max_vocab: 8,
            grad_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub kind: LossKind,
    pub trials: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

impl KindReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub settings: GradcheckSettings,
    pub kinds: Vec<KindReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.kinds.iter().all(KindReport::passed)
    }
}

/// A random logit block with matching hard targets and soft target rows.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub logits: Matrix,
    pub targets: TargetTokens,
    pub dists: TargetDistBlock,
    pub top_k: usize,
    pub alpha: f64,
    pub gamma: f64,
}

pub fn random_instance(rng: &mut Rng, max_block: usize, max_vocab: usize) -> Result<LossInstance> {
    let block = rng.random_range(1..=max_block.max(1));
    let vocab = rng.random_range(2..=max_vocab.max(2));
    let normal = |rng: &mut Rng| rng.sample::<f64, _>(StandardNormal);
    let data = (0..block * vocab).map(|_| 1.5 * normal(rng)).collect();
    let logits = Matrix::from_vec(block, vocab, data)?;
    let targets = TargetTokens::new((0..block).map(|_| rng.random_range(0..vocab)).collect());
    let dists = (0..block)
        .map(|_| {
            let scores: Vec<f64> = (0..vocab).map(|_| 2.0 * normal(rng)).collect();
            softmax(&scores)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossInstance {
        logits,
        targets,
        dists: TargetDistBlock::new(dists),
        top_k: rng.random_range(1..=vocab),
        alpha: rng.random_range(0.0..=1.0),
        gamma: rng.random_range(0.5..8.0),
    })
}

/// Relative error between the analytic gradient (times `grad_scale`) and
/// central differences of the objective that gradient belongs to.
pub fn check_instance(kind: LossKind, inst: &LossInstance, step: f64, grad_scale: f64) -> Result<f64> {
    let config = LossConfig {
        kind,
        alpha: inst.alpha,
        gamma: inst.gamma,
        top_k: inst.top_k,
    };
    let result = compute_loss(&config, &inst.logits, &inst.targets, Some(&inst.dists))?;
    let coefficients = result.weights.values().to_vec();
    let (rows, cols) = (inst.logits.rows(), inst.logits.cols());
    let objective = |x: &[f64]| {
        let logits = Matrix::from_vec(rows, cols, x.to_vec()).expect("shape preserved");
        detached_objective(kind, &logits, &inst.targets, Some(&inst.dists), &coefficients)
            .expect("objective defined on perturbed logits")
    };
    let numeric = finite_diff_grad(objective, inst.logits.as_slice(), step);
    let analytic: Vec<f64> = result.grad.as_slice().iter().map(|g| g * grad_scale).collect();
    Ok(relative_error(&analytic, &numeric))
}

pub fn gradcheck(kinds: &[LossKind], settings: &GradcheckSettings) -> Result<GradcheckReport> {
    let mut reports = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        // Same instances for every kind, so reports are comparable.
        let mut rng = rng::stream(settings.seed, streams::GRADCHECK);
        let mut report = KindReport {
            kind,
            trials: settings.trials,
            failures: 0,
            max_rel_error: 0.0,
        };
        for _ in 0..settings.trials {
            let inst = random_instance(&mut rng, settings.max_block, settings.max_vocab)?;
            let err = check_instance(kind, &inst, settings.step, settings.grad_scale)?;
            report.max_rel_error = report.max_rel_error.max(err);
            if err.is_nan() || err >= settings.tolerance {
                report.failures += 1;
            }
        }
        reports.push(report);
    }
    Ok(GradcheckReport {
        settings: *settings,
        kinds: reports,
    })
}
