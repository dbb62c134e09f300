use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::io;
use crate::analysis::{compare_statistics, weight_trace};
use crate::drafter::{train_step, DrafterParams, StepMetrics, StepSettings};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::numerics::OptimizerState;
use crate::rng::{self, streams};
use crate::specdec::{
    decode_speculative, generate_training_data, sample_target_model_from_spec, BlockOutcome, DataSpec,
    DecodeConfig, TargetModel,
};

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub temperature: f64,
    /// Mean emitted length over complete rounds.
    pub tau: Option<f64>,
    pub mean_accepted: Option<f64>,
    pub blocks: usize,
    pub truncated_blocks: usize,
    pub rho_surrogate: Option<f64>,
    pub rho_sum_q: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointRecord {
    pub step: usize,
    /// Mean training loss over the steps since the previous checkpoint.
    pub train_loss: Option<f64>,
    pub evals: Vec<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowRecord {
    pub start: usize,
    pub end: usize,
    pub mean_weight: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub steps: usize,
    pub final_evals: Vec<EvalRecord>,
    /// Mean per-position weights over windows at 10%, 50%, 90% and 100% of training.
    pub weight_windows: Vec<WindowRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub version: u32,
    pub config_hash: String,
    pub loss: LossKind,
    pub alpha: f64,
    pub gamma: f64,
    pub block: usize,
    pub seed: u64,
    pub checkpoints: Vec<CheckpointRecord>,
    pub summary: RunSummary,
}

impl RunRecord {
    pub fn final_tau(&self, temperature: f64) -> Option<f64> {
        self.summary
            .final_evals
            .iter()
            .find(|e| e.temperature == temperature)
            .and_then(|e| e.tau)
    }

    pub fn final_accepted(&self, temperature: f64) -> Option<f64> {
        self.summary
            .final_evals
            .iter()
            .find(|e| e.temperature == temperature)
            .and_then(|e| e.mean_accepted)
    }
}

/// Everything a run produces; [`RunArtifacts::write`] persists it.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub record: RunRecord,
    /// Final-checkpoint rounds, one entry per evaluation temperature.
    pub blocks: Vec<(f64, Vec<BlockOutcome>)>,
    pub steps: Vec<StepMetrics>,
    pub params: DrafterParams,
}

impl RunArtifacts {
    pub fn run_id(&self) -> String {
        run_id(self.record.loss, self.record.seed)
    }

    /// Writes `record.json`, `blocks_T<t>.csv`, `steps.csv` and `drafter.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_json(&dir.join("record.json"), &self.record)?;
        for (t, blocks) in &self.blocks {
            let run_id = format!("{}-T{t}", self.run_id());
            io::write_blocks_csv(&dir.join(blocks_file_name(*t)), &run_id, blocks)?;
        }
        io::write_steps_csv(&dir.join("steps.csv"), &self.steps)?;
        self.params.save(&dir.join("drafter.json"))
    }
}

pub fn run_id(loss: LossKind, seed: u64) -> String {
    format!("{loss}-s{seed}")
}

pub fn blocks_file_name(temperature: f64) -> String {
    format!("blocks_T{temperature}.csv")
}

/// `<output_dir>/<loss>/seed-<seed>`.
pub fn run_dir(config: &ExperimentConfig, seed: u64) -> PathBuf {
    config
        .output_dir
        .join(config.loss.kind.as_str())
        .join(format!("seed-{seed}"))
}

/// Evaluation steps: `checkpoints` evenly spaced points ending at `steps`, or
/// just step 0 for an untrained run.
pub fn checkpoint_steps(steps: usize, checkpoints: usize) -> Vec<usize> {
    if steps == 0 {
        return vec![0];
    }
    let mut out: Vec<usize> = (1..=checkpoints).map(|k| k * steps / checkpoints).collect();
    out.dedup();
    out.retain(|s| *s > 0);
    out
}

/// Evaluation prompts shared by every run with the same seed.
pub fn eval_prompts(config: &ExperimentConfig, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = rng::stream(seed, streams::EVAL_PROMPTS);
    (0..config.eval.num_prompts)
        .map(|_| {
            (0..config.eval.prompt_length)
                .map(|_| rng.random_range(0..config.target.vocab))
                .collect()
        })
        .collect()
}

/// Speculative decoding over every prompt at `temperature`.
pub fn evaluate(
    target: &TargetModel,
    params: &DrafterParams,
    prompts: &[Vec<usize>],
    temperature: f64,
    max_new_tokens: usize,
    seed: u64,
) -> Result<(EvalRecord, Vec<BlockOutcome>)> {
    let mut blocks = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let cfg = DecodeConfig {
            temperature,
            block: params.config().block,
            max_new_tokens,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
        };
        blocks.extend(decode_speculative(target, params, prompt, &cfg)?.blocks);
    }
    Ok((summarize(temperature, &blocks), blocks))
}

fn summarize(temperature: f64, blocks: &[BlockOutcome]) -> EvalRecord {
    let complete: Vec<&BlockOutcome> = blocks.iter().filter(|b| !b.truncated).collect();
    let n = complete.len();
    let mean = |f: fn(&BlockOutcome) -> usize| {
        (n > 0).then(|| complete.iter().map(|b| f(b) as f64).sum::<f64>() / n as f64)
    };
    let stats = compare_statistics(blocks).ok();
    EvalRecord {
        temperature,
        tau: mean(|b| b.emitted),
        mean_accepted: mean(|b| b.accepted),
        blocks: blocks.len(),
        truncated_blocks: blocks.len() - n,
        rho_surrogate: stats.as_ref().map(|s| s.surrogate.rho),
        rho_sum_q: stats.as_ref().map(|s| s.sum_q.rho),
    }
}

/// Generates data, trains under the configured loss and evaluates at every checkpoint.
pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<RunArtifacts> {
    config.validate()?;
    let target = sample_target_model_from_spec(&config.target)?;
    run_with_target(config, &target, seed)
}

/// [`run_experiment`] against an already-built target model.
pub fn run_with_target(config: &ExperimentConfig, target: &TargetModel, seed: u64) -> Result<RunArtifacts> {
    config.validate()?;
    let drafter_config = config.drafter_config();
    let loss = config.loss_config();
    let train = &config.train;
    let mut params = DrafterParams::init(&drafter_config, seed)?;
    let mut state = OptimizerState::new(params.len(), train.optimizer);

    let data = if train.steps > 0 {
        generate_training_data(
            target,
            &DataSpec {
                num_sequences: train.data.num_sequences,
                length: train.data.sequence_length,
                block: drafter_config.block,
                context: drafter_config.context,
                temperature: train.data.temperature,
                seed,
                with_target_dists: loss.kind.needs_target_dists(),
            },
        )?
    } else {
        Vec::new()
    };
    if train.steps > 0 && data.is_empty() {
        return Err(Error::config("train.data", "produced no training examples"));
    }

    let prompts = eval_prompts(config, seed);
    let checkpoints = checkpoint_steps(train.steps, config.eval.checkpoints);
    let mut batch_rng = rng::stream(seed, streams::BATCHES);
    let mut steps = Vec::with_capacity(train.steps);
    let mut records = Vec::with_capacity(checkpoints.len());
    let mut final_blocks = Vec::new();
    let mut last_checkpoint = 0;
    let mut batch = Vec::with_capacity(train.batch_size());

    for &checkpoint in &checkpoints {
        for step in last_checkpoint..checkpoint {
            batch.clear();
            batch.extend((0..train.batch_size()).map(|_| &data[batch_rng.random_range(0..data.len())]));
            let lr = train.schedule.lr_at(train.optimizer.lr, step, train.steps);
            let metrics = train_step(
                &mut params,
                &mut state,
                &batch,
                &loss,
                StepSettings {
                    step,
                    lr,
                    clip: train.clip,
                },
            )?;
            steps.push(metrics);
        }
        let window = &steps[last_checkpoint.min(steps.len())..];
        let train_loss = (!window.is_empty())
            .then(|| window.iter().map(|m| m.loss).sum::<f64>() / window.len() as f64);
        last_checkpoint = checkpoint;

        let mut evals = Vec::with_capacity(config.eval.temperatures.len());
        final_blocks.clear();
        for &t in &config.eval.temperatures {
            let (record, blocks) = evaluate(target, &params, &prompts, t, config.eval.max_new_tokens, seed)?;
            evals.push(record);
            final_blocks.push((t, blocks));
        }
        records.push(CheckpointRecord {
            step: checkpoint,
            train_loss,
            evals,
        });
    }

    let weight_windows = weight_windows(&steps, train.steps, config.eval.trace_window)?;
    let record = RunRecord {
        version: RECORD_VERSION,
        config_hash: config.hash(),
        loss: loss.kind,
        alpha: loss.alpha,
        gamma: loss.gamma,
        block: drafter_config.block,
        seed,
        summary: RunSummary {
            steps: train.steps,
            final_evals: records.last().map(|c| c.evals.clone()).unwrap_or_default(),
            weight_windows,
        },
        checkpoints: records,
    };
    Ok(RunArtifacts {
        record,
        blocks: final_blocks,
        steps,
        params,
    })
}

fn weight_windows(steps: &[StepMetrics], total: usize, width: usize) -> Result<Vec<WindowRecord>> {
    if steps.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for pct in [10, 50, 90, 100] {
        let end = (total * pct / 100).max(1);
        let start = end.saturating_sub(width);
        let trace = weight_trace(steps, start..end)?;
        out.push(WindowRecord {
            start,
            end,
            mean_weight: trace.mean,
        });
    }
    Ok(out)
}

/// Runs and writes to [`run_dir`].
pub fn run_and_write(config: &ExperimentConfig, target: &TargetModel, seed: u64) -> Result<RunArtifacts> {
    let artifacts = run_with_target(config, target, seed)?;
    artifacts.write(&run_dir(config, seed))?;
    Ok(artifacts)
}
