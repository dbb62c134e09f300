//! Multi-run tables (loss comparison, alpha and block-size sweeps) and the
//! per-block correlation report.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::io;
use super::run::{run_dir, run_with_target, RunArtifacts, RunRecord};
use crate::analysis::{bin_means, compare_statistics, BinSummary, CorrelationReport};
use crate::error::{Error, Result};
use crate::losses::{gamma_for_block, LossKind};
use crate::rng::{self, streams};
use crate::specdec::{sample_target_model_from_spec, simulate_accepted, BlockOutcome, TargetModel};
use crate::weights::{surrogate_s, ConfidenceBlock};

/// Mean final tau below this marks an alpha-sweep row as stalled.
pub const STALL_TAU: f64 = 1.2;

/// Reference per-block correlations, carried as annotations only.
pub const REFERENCE_RHO_SURROGATE: f64 = 0.84;
pub const REFERENCE_RHO_SUM_Q: f64 = 0.79;

pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureStats {
    pub temperature: f64,
    pub tau: Option<MeanStd>,
    pub accepted: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub loss: LossKind,
    pub alpha: f64,
    pub gamma: f64,
    pub block: usize,
    pub seeds: Vec<u64>,
    pub stats: Vec<TemperatureStats>,
    /// Set on alpha-sweep rows whose mean tau at the first temperature is below [`STALL_TAU`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stalled: Option<bool>,
}

impl TableRow {
    fn from_records(config: &ExperimentConfig, records: &[RunRecord]) -> Self {
        let loss = config.loss_config();
        let stats = config
            .eval
            .temperatures
            .iter()
            .map(|&t| {
                let tau: Vec<f64> = records.iter().filter_map(|r| r.final_tau(t)).collect();
                let accepted: Vec<f64> = records.iter().filter_map(|r| r.final_accepted(t)).collect();
                TemperatureStats {
                    temperature: t,
                    tau: MeanStd::of(&tau),
                    accepted: MeanStd::of(&accepted),
                }
            })
            .collect();
        Self {
            loss: loss.kind,
            alpha: loss.alpha,
            gamma: loss.gamma,
            block: config.drafter.block,
            seeds: records.iter().map(|r| r.seed).collect(),
            stats,
            stalled: None,
        }
    }

    pub fn tau(&self, temperature: f64) -> Option<f64> {
        self.stats
            .iter()
            .find(|s| s.temperature == temperature)
            .and_then(|s| s.tau)
            .map(|m| m.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub rows: Vec<TableRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl Table {
    /// Flat CSV: one line per row, four columns per evaluation temperature.
    pub fn csv_cells(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let temps: Vec<f64> = self
            .rows
            .first()
            .map(|r| r.stats.iter().map(|s| s.temperature).collect())
            .unwrap_or_default();
        let mut header: Vec<String> = ["loss", "alpha", "gamma", "block", "seeds"].map(String::from).to_vec();
        for t in &temps {
            for col in ["tau_mean", "tau_std", "accepted_mean", "accepted_std"] {
                header.push(format!("{col}_T{t}"));
            }
        }
        header.push("stalled".into());
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![
                    r.loss.to_string(),
                    r.alpha.to_string(),
                    r.gamma.to_string(),
                    r.block.to_string(),
                    r.seeds.len().to_string(),
                ];
                for s in &r.stats {
                    cells.push(cell(s.tau.map(|m| m.mean)));
                    cells.push(cell(s.tau.map(|m| m.std)));
                    cells.push(cell(s.accepted.map(|m| m.mean)));
                    cells.push(cell(s.accepted.map(|m| m.std)));
                }
                cells.push(r.stalled.map(|s| s.to_string()).unwrap_or_default());
                cells
            })
            .collect();
        (header, rows)
    }

    /// Writes `<name>.json` and `<name>.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join(format!("{}.json", self.name)), self)?;
        let (header, rows) = self.csv_cells();
        io::write_table_csv(&dir.join(format!("{}.csv", self.name)), &header, &rows)
    }
}

/// Where run artifacts go, if anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Persist {
    #[default]
    None,
    Runs,
}

/// Runs every `(variant, seed)` pair in parallel against one shared target
/// model. Results come back grouped by variant in input order.
fn run_grid(
    variants: &[ExperimentConfig],
    seeds: &[u64],
    target: &TargetModel,
    persist: Persist,
    dir_for: impl Fn(&ExperimentConfig, u64) -> PathBuf + Sync,
) -> Result<Vec<Vec<RunRecord>>> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    for v in variants {
        v.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let records: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let artifacts: RunArtifacts = run_with_target(&variants[i], target, seed)?;
            if persist == Persist::Runs {
                artifacts.write(&dir_for(&variants[i], seed))?;
            }
            Ok(artifacts.record)
        })
        .collect::<Result<_>>()?;
    Ok(records.chunks(seeds.len()).map(<[RunRecord]>::to_vec).collect())
}

fn shared_target(config: &ExperimentConfig) -> Result<TargetModel> {
    config.validate()?;
    sample_target_model_from_spec(&config.target)
}

/// One row per loss kind: mean and spread of final tau and accepted length over seeds.
pub fn compare_losses(
    config: &ExperimentConfig,
    kinds: &[LossKind],
    seeds: &[u64],
    persist: Persist,
) -> Result<Table> {
    let target = shared_target(config)?;
    let variants: Vec<ExperimentConfig> = kinds
        .iter()
        .map(|&kind| {
            let mut c = config.clone();
            c.loss.kind = kind;
            c
        })
        .collect();
    let grouped = run_grid(&variants, seeds, &target, persist, run_dir)?;
    Ok(Table {
        name: "compare".into(),
        rows: variants
            .iter()
            .zip(&grouped)
            .map(|(c, records)| TableRow::from_records(c, records))
            .collect(),
    })
}

/// One dpace row per smoothing strength.
pub fn sweep_alpha(config: &ExperimentConfig, alphas: &[f64], seeds: &[u64], persist: Persist) -> Result<Table> {
    let target = shared_target(config)?;
    let variants: Vec<ExperimentConfig> = alphas
        .iter()
        .map(|&alpha| {
            let mut c = config.clone();
            c.loss.kind = LossKind::Dpace;
            c.loss.alpha = alpha;
            c
        })
        .collect();
    let dir_for = |c: &ExperimentConfig, seed: u64| {
        c.output_dir
            .join(format!("alpha-{}", c.loss.alpha))
            .join(format!("seed-{seed}"))
    };
    let grouped = run_grid(&variants, seeds, &target, persist, dir_for)?;
    let first_t = config.eval.temperatures[0];
    Ok(Table {
        name: "sweep_alpha".into(),
        rows: variants
            .iter()
            .zip(&grouped)
            .map(|(c, records)| {
                let mut row = TableRow::from_records(c, records);
                row.stalled = row.tau(first_t).map(|tau| tau < STALL_TAU);
                row
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDelta {
    pub temperature: f64,
    pub dpace_tau: Option<f64>,
    pub dflash_tau: Option<f64>,
    /// `100 * (dpace - dflash) / dflash`.
    pub delta_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSweepRow {
    pub block: usize,
    pub gamma: f64,
    pub dpace: TableRow,
    pub dflash: TableRow,
    pub deltas: Vec<BlockDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSweep {
    pub rows: Vec<BlockSweepRow>,
}

pub fn relative_delta_pct(dpace: f64, dflash: f64) -> Option<f64> {
    (dflash != 0.0).then(|| 100.0 * (dpace - dflash) / dflash)
}

impl BlockSweep {
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join("sweep_block.json"), self)?;
        let temps: Vec<f64> = self
            .rows
            .first()
            .map(|r| r.deltas.iter().map(|d| d.temperature).collect())
            .unwrap_or_default();
        let mut header: Vec<String> = vec!["block".into(), "gamma".into()];
        for t in &temps {
            for col in ["dpace_tau", "dflash_tau", "delta_pct"] {
                header.push(format!("{col}_T{t}"));
            }
        }
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.block.to_string(), r.gamma.to_string()];
                for d in &r.deltas {
                    cells.extend([cell(d.dpace_tau), cell(d.dflash_tau), cell(d.delta_pct)]);
                }
                cells
            })
            .collect();
        io::write_table_csv(&dir.join("sweep_block.csv"), &header, &rows)
    }
}

/// dpace against dflash at each block size, with the decay constant taken
/// from the per-block default.
pub fn sweep_block(config: &ExperimentConfig, blocks: &[usize], seeds: &[u64], persist: Persist) -> Result<BlockSweep> {
    let target = shared_target(config)?;
    let mut variants = Vec::with_capacity(2 * blocks.len());
    for &block in blocks {
        for kind in [LossKind::Dpace, LossKind::Dflash] {
            let mut c = config.clone();
            c.drafter.block = block;
            c.loss.kind = kind;
            c.loss.gamma = None;
            variants.push(c);
        }
    }
    let dir_for = |c: &ExperimentConfig, seed: u64| {
        c.output_dir
            .join(format!("block-{}", c.drafter.block))
            .join(c.loss.kind.as_str())
            .join(format!("seed-{seed}"))
    };
    let grouped = run_grid(&variants, seeds, &target, persist, dir_for)?;
    let rows = variants
        .chunks(2)
        .zip(grouped.chunks(2))
        .map(|(pair, records)| {
            let dpace = TableRow::from_records(&pair[0], &records[0]);
            let dflash = TableRow::from_records(&pair[1], &records[1]);
            let deltas = config
                .eval
                .temperatures
                .iter()
                .map(|&t| {
                    let (a, b) = (dpace.tau(t), dflash.tau(t));
                    BlockDelta {
                        temperature: t,
                        dpace_tau: a,
                        dflash_tau: b,
                        delta_pct: a.zip(b).and_then(|(a, b)| relative_delta_pct(a, b)),
                    }
                })
                .collect();
            BlockSweepRow {
                block: pair[0].drafter.block,
                gamma: gamma_for_block(pair[0].drafter.block),
                dpace,
                dflash,
                deltas,
            }
        })
        .collect();
    Ok(BlockSweep { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRho {
    pub surrogate: f64,
    pub sum_q: f64,
}

/// Per-block correlation of both confidence statistics with emitted length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub source: String,
    pub n: usize,
    pub sum_q: CorrelationReport,
    pub surrogate: CorrelationReport,
    /// Reference values for comparison; not expected to match at this scale.
    pub reference: ReferenceRho,
    /// Emitted length binned by surrogate value.
    pub bins: BinSummary,
}

pub fn correlate_blocks(source: &str, blocks: &[BlockOutcome], num_bins: usize) -> Result<CorrelationTable> {
    let stats = compare_statistics(blocks)?;
    let kept: Vec<&BlockOutcome> = blocks.iter().filter(|b| !b.truncated).collect();
    let xs: Vec<f64> = kept.iter().map(|b| b.surrogate).collect();
    let ys: Vec<f64> = kept.iter().map(|b| b.emitted as f64).collect();
    Ok(CorrelationTable {
        source: source.to_string(),
        n: stats.surrogate.n,
        sum_q: stats.sum_q,
        surrogate: stats.surrogate,
        reference: ReferenceRho {
            surrogate: REFERENCE_RHO_SURROGATE,
            sum_q: REFERENCE_RHO_SUM_Q,
        },
        bins: bin_means(&xs, &ys, num_bins)?,
    })
}

/// Reads every `blocks_*.csv` in `dir` (sorted by name), writes
/// `correlation.json` plus one `bins_*.csv` per input, and returns the reports.
pub fn correlate(dir: &Path, num_bins: usize) -> Result<Vec<CorrelationTable>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("blocks_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no blocks_*.csv files in {}", dir.display())));
    }
    let mut tables = Vec::with_capacity(files.len());
    for path in &files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let blocks: Vec<BlockOutcome> = io::read_blocks_csv(path)?.into_iter().map(|r| r.outcome).collect();
        let table = correlate_blocks(name, &blocks, num_bins)?;
        let stem = name.trim_start_matches("blocks_").trim_end_matches(".csv");
        io::write_bins_csv(&dir.join(format!("bins_{stem}.csv")), &table.bins)?;
        tables.push(table);
    }
    io::write_json(&dir.join("correlation.json"), &tables)?;
    Ok(tables)
}

/// Rounds whose accepted length is drawn by independent Bernoulli trials on
/// `q`. Each block gets its own level and decay, so profiles are spread out.
pub fn simulate_bernoulli_blocks(num_blocks: usize, block: usize, seed: u64) -> Result<Vec<BlockOutcome>> {
    if block == 0 {
        return Err(Error::invalid("block size must be positive"));
    }
    let mut rng = rng::stream(seed, streams::BERNOULLI);
    (0..num_blocks)
        .map(|_| {
            let level: f64 = rng.random_range(0.05..1.0);
            let decay: f64 = rng.random_range(0.0..0.3);
            let q: Vec<f64> = (0..block)
                .map(|i| {
                    let jitter: f64 = rng.random_range(0.85..1.15);
                    (level * (-decay * i as f64).exp() * jitter).clamp(0.0, 1.0)
                })
                .collect();
            let q = ConfidenceBlock::new(q)?;
            let accepted = simulate_accepted(&q, &mut rng);
            Ok(BlockOutcome {
                surrogate: surrogate_s(&q),
                q,
                accepted,
                emitted: accepted + 1,
                truncated: false,
            })
        })
        .collect()
}
