//! Run outputs: `metrics.jsonl` (one batch per line), `timing.jsonl`
//! (wall-clock seconds per batch), `curve.csv` (frames, rolling mean, standard
//! error) and optional per-batch buffer dumps.
//!
//! Wall-clock time lives in its own file so that two runs with the same
//! configuration and seed produce byte-identical `metrics.jsonl`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use p4o_core::rollout::RolloutBuffer;
use p4o_core::session::BatchReport;
use p4o_core::Real;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CURVE_FILE: &str = "curve.csv";
const CURVE_HEADER: &str = "frames,rolling_mean,rolling_stderr";

/// One metrics row: the batch report of the trainer.
pub type MetricsRecord = BatchReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub batch: u64,
    pub seconds: f64,
}

/// Appends records to the files of one run directory.
pub struct MetricsWriter {
    dir: PathBuf,
}

fn append(path: &Path) -> CliResult<File> {
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

impl MetricsWriter {
    /// Opens `dir`, dropping rows for batches `>= keep_before` left by an
    /// interrupted run.
    pub fn open(dir: &Path, keep_before: u64) -> CliResult<Self> {
        std::fs::create_dir_all(dir)?;
        let metrics = dir.join(METRICS_FILE);
        let kept: Vec<MetricsRecord> = if metrics.exists() {
            read_metrics(&metrics)?.into_iter().filter(|r| r.batch < keep_before).collect()
        } else {
            Vec::new()
        };
        let timing: Vec<TimingRecord> = match dir.join(TIMING_FILE) {
            p if p.exists() => read_lines(&p)?.into_iter().filter(|r: &TimingRecord| r.batch < keep_before).collect(),
            _ => Vec::new(),
        };
        let w = Self { dir: dir.to_path_buf() };
        let mut m = File::create(&metrics)?;
        let mut t = File::create(dir.join(TIMING_FILE))?;
        let mut c = File::create(dir.join(CURVE_FILE))?;
        writeln!(c, "{CURVE_HEADER}")?;
        for r in &kept {
            writeln!(m, "{}", serde_json::to_string(r)?)?;
            write_curve_row(&mut c, r)?;
        }
        for r in &timing {
            writeln!(t, "{}", serde_json::to_string(r)?)?;
        }
        Ok(w)
    }

    pub fn record(&mut self, report: &MetricsRecord, seconds: f64) -> CliResult<()> {
        let mut m = append(&self.dir.join(METRICS_FILE))?;
        writeln!(m, "{}", serde_json::to_string(report)?)?;
        let mut t = append(&self.dir.join(TIMING_FILE))?;
        writeln!(t, "{}", serde_json::to_string(&TimingRecord { batch: report.batch, seconds })?)?;
        let mut c = append(&self.dir.join(CURVE_FILE))?;
        write_curve_row(&mut c, report)?;
        Ok(())
    }
}

fn write_curve_row(out: &mut impl Write, r: &MetricsRecord) -> CliResult<()> {
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
    writeln!(out, "{},{},{}", r.frames, opt(r.rolling_mean), opt(r.rolling_stderr))?;
    Ok(())
}

fn read_lines<R: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<R>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRecord>> {
    read_lines(path)
}

pub fn read_timing(path: &Path) -> CliResult<Vec<TimingRecord>> {
    read_lines(path)
}

/// Writes `buf` as CSV with one row per sample, time-major:
/// `t,env,action,log_prob,reward,terminal,value,advantage,return`.
pub fn dump_buffer<T: Real>(path: &Path, buf: &RolloutBuffer<T>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(File::create(path)?);
    writeln!(f, "t,env,action,log_prob,reward,terminal,value,advantage,return")?;
    for t in 0..buf.steps {
        for e in 0..buf.num_envs {
            let i = t * buf.num_envs + e;
            writeln!(
                f,
                "{t},{e},{},{},{},{},{},{},{}",
                buf.actions[i],
                buf.log_probs[i],
                buf.rewards[i],
                buf.terminals[i] as u8,
                buf.values[i],
                buf.advantages[i],
                buf.returns[i]
            )?;
        }
    }
    f.flush()?;
    Ok(())
}
