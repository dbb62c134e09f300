use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dpace_core::harness::gradcheck::{gradcheck, GradcheckSettings};
use dpace_core::harness::tables::{self, Persist, DEFAULT_BINS};
use dpace_core::harness::{io, run, ExperimentConfig};
use dpace_core::specdec::{bernoulli_accept_sim, exact_expected_accepted, MAX_ENUMERATION_BLOCK};
use dpace_core::weights::surrogate_s;
use dpace_core::{ConfidenceBlock, LossKind};

#[derive(Parser)]
#[command(name = "dpace", version, about = "Train and evaluate block drafters under acceptance-aware losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one drafter per seed.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        loss: Option<LossKind>,
    },
    /// Compare loss kinds over seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Loss kinds to compare; all of them if omitted.
        #[arg(long = "loss", value_delimiter = ',')]
        losses: Vec<LossKind>,
    },
    /// Sweep the smoothing strength of the dpace loss.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.3, 0.5, 0.7, 0.9])]
        alphas: Vec<f64>,
    },
    /// Compare dpace and dflash across block sizes.
    SweepBlock {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [8, 12, 16])]
        blocks: Vec<usize>,
    },
    /// Per-block rank correlation of confidence statistics with emitted length.
    Correlate {
        /// Directory holding `blocks_*.csv` files.
        dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long = "loss", value_delimiter = ',')]
        losses: Vec<LossKind>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale applied to analytic gradients; values other than 1 must fail.
        #[arg(long, default_value_t = 1.0, hide = true)]
        grad_scale: f64,
        /// Also write the report as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate rounds under independent Bernoulli acceptance.
    SimulateBernoulli {
        /// A single confidence profile to simulate instead of random blocks.
        #[arg(long, value_delimiter = ',')]
        q: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 1000)]
        blocks: usize,
        #[arg(long, default_value_t = 8)]
        block: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "DPACE_OUT")]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed list in the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output root; falls back to `DPACE_OUT`, then the config's `output_dir`.
    #[arg(long, env = "DPACE_OUT")]
    out: Option<PathBuf>,
    /// Skip writing per-run artifacts; tables are still written.
    #[arg(long)]
    no_runs: bool,
}

impl Common {
    fn load(&self) -> anyhow::Result<(ExperimentConfig, Vec<u64>)> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        let seeds = if self.seeds.is_empty() {
            config.seeds.clone()
        } else {
            self.seeds.clone()
        };
        Ok((config, seeds))
    }

    fn persist(&self) -> Persist {
        if self.no_runs {
            Persist::None
        } else {
            Persist::Runs
        }
    }
}

/// Failure kinds that map to distinct exit codes.
enum Outcome {
    Ok,
    CheckFailed,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn print_table(table: &tables::Table) {
    for row in &table.rows {
        let cols: Vec<String> = row
            .stats
            .iter()
            .map(|s| {
                let tau = s.tau.map(|m| format!("{:.4} ± {:.4}", m.mean, m.std));
                format!("T={} tau={}", s.temperature, tau.unwrap_or_else(|| "-".into()))
            })
            .collect();
        let stalled = if row.stalled == Some(true) { " (stalled)" } else { "" };
        println!(
            "{:<18} alpha={} gamma={} B={} {}{stalled}",
            row.loss.as_str(),
            row.alpha,
            row.gamma,
            row.block,
            cols.join("  ")
        );
    }
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn execute(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Run { common, seed, loss } => {
            let (mut config, mut seeds) = common.load()?;
            if let Some(kind) = loss {
                config.loss.kind = kind;
                config.validate()?;
            }
            if let Some(seed) = seed {
                seeds = vec![seed];
            }
            let target = dpace_core::specdec::sample_target_model_from_spec(&config.target)?;
            for seed in seeds {
                let artifacts = run::run_and_write(&config, &target, seed)?;
                let dir = run::run_dir(&config, seed);
                for e in &artifacts.record.summary.final_evals {
                    println!(
                        "{} seed={seed} T={} tau={} accepted={} -> {}",
                        config.loss.kind,
                        e.temperature,
                        fmt_opt(e.tau),
                        fmt_opt(e.mean_accepted),
                        dir.display()
                    );
                }
            }
        }
        Command::Compare { common, losses } => {
            let (config, seeds) = common.load()?;
            let kinds = if losses.is_empty() { LossKind::ALL.to_vec() } else { losses };
            let table = tables::compare_losses(&config, &kinds, &seeds, common.persist())?;
            ensure_dir(&config.output_dir)?;
            table.write(&config.output_dir)?;
            print_table(&table);
        }
        Command::SweepAlpha { common, alphas } => {
            let (config, seeds) = common.load()?;
            let table = tables::sweep_alpha(&config, &alphas, &seeds, common.persist())?;
            ensure_dir(&config.output_dir)?;
            table.write(&config.output_dir)?;
            print_table(&table);
        }
        Command::SweepBlock { common, blocks } => {
            let (config, seeds) = common.load()?;
            let sweep = tables::sweep_block(&config, &blocks, &seeds, common.persist())?;
            ensure_dir(&config.output_dir)?;
            sweep.write(&config.output_dir)?;
            for row in &sweep.rows {
                for d in &row.deltas {
                    println!(
                        "B={:<3} gamma={} T={} dpace={} dflash={} delta%={}",
                        row.block,
                        row.gamma,
                        d.temperature,
                        fmt_opt(d.dpace_tau),
                        fmt_opt(d.dflash_tau),
                        fmt_opt(d.delta_pct)
                    );
                }
            }
        }
        Command::Correlate { dir, bins } => {
            for t in tables::correlate(&dir, bins)? {
                println!(
                    "{}: n={} rho(sum q)={:.4} rho(surrogate)={:.4}  [reference {} / {}]",
                    t.source, t.n, t.sum_q.rho, t.surrogate.rho, t.reference.sum_q, t.reference.surrogate
                );
            }
        }
        Command::Gradcheck {
            losses,
            trials,
            seed,
            grad_scale,
            out,
        } => {
            let kinds = if losses.is_empty() { LossKind::ALL.to_vec() } else { losses };
            let settings = GradcheckSettings {
                trials,
                seed,
                grad_scale,
                ..Default::default()
            };
            let report = gradcheck(&kinds, &settings)?;
            for k in &report.kinds {
                println!(
                    "{:<18} {} max_rel_error={:.3e} failures={}/{}",
                    k.kind.as_str(),
                    if k.passed() { "PASS" } else { "FAIL" },
                    k.max_rel_error,
                    k.failures,
                    k.trials
                );
            }
            if let Some(out) = out {
                io::write_json(&out, &report)?;
            }
            if !report.passed() {
                return Ok(Outcome::CheckFailed);
            }
        }
        Command::SimulateBernoulli {
            q,
            trials,
            blocks,
            block,
            seed,
            out,
        } => {
            if !q.is_empty() {
                let q = ConfidenceBlock::new(q)?;
                let (mean, se) = bernoulli_accept_sim(&q, trials, seed)?;
                let surrogate = surrogate_s(&q);
                print!("surrogate={surrogate:.6} simulated={mean:.6} ± {se:.6}");
                if q.values().len() <= MAX_ENUMERATION_BLOCK {
                    print!(" exact={:.6}", exact_expected_accepted(&q)?);
                }
                println!();
                if (mean - surrogate).abs() > 3.0 * se {
                    return Ok(Outcome::CheckFailed);
                }
                return Ok(Outcome::Ok);
            }
            let Some(out) = out else {
                bail!("--out (or DPACE_OUT) is required when simulating random blocks");
            };
            let sim = tables::simulate_bernoulli_blocks(blocks, block, seed)?;
            let path = out.join("blocks_bernoulli.csv");
            io::write_blocks_csv(&path, &format!("bernoulli-s{seed}"), &sim)?;
            let table = tables::correlate_blocks("blocks_bernoulli.csv", &sim, DEFAULT_BINS)?;
            io::write_json(&out.join("correlation.json"), &[&table])?;
            io::write_bins_csv(&out.join("bins_bernoulli.csv"), &table.bins)?;
            println!(
                "n={} rho(sum q)={:.4} rho(surrogate)={:.4} -> {}",
                table.n,
                table.sum_q.rho,
                table.surrogate.rho,
                path.display()
            );
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            // Usage errors are validation errors; help and version are not errors.
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(2),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
