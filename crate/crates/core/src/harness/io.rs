//! JSON and CSV persistence for run records, rounds and training traces.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::analysis::BinSummary;
use crate::drafter::StepMetrics;
use crate::error::{Error, Result};
use crate::specdec::BlockOutcome;
use crate::weights::ConfidenceBlock;

fn create(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

/// One round as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRow {
    pub run_id: String,
    pub block_index: usize,
    pub outcome: BlockOutcome,
}

/// Columns: `run_id, block_index, accepted, emitted, surrogate, q_1..q_B, truncated`.
pub fn write_blocks_csv(path: &Path, run_id: &str, blocks: &[BlockOutcome]) -> Result<()> {
    let width = blocks.first().map_or(0, |b| b.q.values().len());
    if blocks.iter().any(|b| b.q.values().len() != width) {
        return Err(Error::invalid("rounds differ in block size"));
    }
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = ["run_id", "block_index", "accepted", "emitted", "surrogate"]
        .map(String::from)
        .to_vec();
    header.extend(numbered("q", width));
    header.push("truncated".into());
    w.write_record(&header)?;
    for (i, b) in blocks.iter().enumerate() {
        let mut rec = vec![
            run_id.to_string(),
            i.to_string(),
            b.accepted.to_string(),
            b.emitted.to_string(),
            b.surrogate.to_string(),
        ];
        rec.extend(b.q.values().iter().map(f64::to_string));
        rec.push(b.truncated.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_blocks_csv(path: &Path) -> Result<Vec<BlockRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let width = header.iter().filter(|h| h.starts_with("q_")).count();
    let expected = 6 + width;
    if header.len() != expected || header.get(expected - 1) != Some("truncated") {
        return Err(Error::invalid(format!("{}: unexpected header", path.display())));
    }
    let bad = |line: usize, what: &str| Error::invalid(format!("{}:{line}: bad {what}", path.display()));
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = line + 2;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let q = (0..width)
            .map(|i| field(5 + i).parse::<f64>().map_err(|_| bad(line, "q")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(BlockRow {
            run_id: field(0).to_string(),
            block_index: field(1).parse().map_err(|_| bad(line, "block_index"))?,
            outcome: BlockOutcome {
                q: ConfidenceBlock::new(q)?,
                accepted: field(2).parse().map_err(|_| bad(line, "accepted"))?,
                emitted: field(3).parse().map_err(|_| bad(line, "emitted"))?,
                surrogate: field(4).parse().map_err(|_| bad(line, "surrogate"))?,
                truncated: field(5 + width).parse().map_err(|_| bad(line, "truncated"))?,
            },
        });
    }
    Ok(rows)
}

/// Columns: `step, loss, grad_norm, lr, q_1..q_B, w_1..w_B`.
pub fn write_steps_csv(path: &Path, steps: &[StepMetrics]) -> Result<()> {
    let width = steps.first().map_or(0, |m| m.mean_q.len());
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = ["step", "loss", "grad_norm", "lr"].map(String::from).to_vec();
    header.extend(numbered("q", width));
    header.extend(numbered("w", width));
    w.write_record(&header)?;
    for m in steps {
        if m.mean_q.len() != width || m.mean_weight.len() != width {
            return Err(Error::invalid("steps differ in block size"));
        }
        let mut rec = vec![
            m.step.to_string(),
            m.loss.to_string(),
            m.grad_norm.to_string(),
            m.lr.to_string(),
        ];
        rec.extend(m.mean_q.iter().chain(&m.mean_weight).map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Columns: `lo, hi, count, mean, std`; empty bins leave mean and std blank.
pub fn write_bins_csv(path: &Path, bins: &BinSummary) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["lo", "hi", "count", "mean", "std"])?;
    for i in 0..bins.counts.len() {
        w.write_record([
            bins.edges[i].to_string(),
            bins.edges[i + 1].to_string(),
            bins.counts[i].to_string(),
            opt(bins.means[i]),
            opt(bins.stds[i]),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a header and rows of already-formatted cells.
pub fn write_table_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
