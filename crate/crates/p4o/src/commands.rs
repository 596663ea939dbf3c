//! The four verbs of the command line.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use p4o_core::diagnostics::{collect_latents, DiagnosticReport};
use p4o_core::envs::{wrap, BoxEnv, VecEnv};
use p4o_core::session::{load_arrays, Session};
use p4o_core::{Agent, Real, Rng};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::external::ExternalEnv;
use crate::metrics::{dump_buffer, read_metrics, MetricsRecord, MetricsWriter, METRICS_FILE};

pub const CHECKPOINT_FILE: &str = "checkpoint.p4o";
pub const FAILURE_FILE: &str = "failure.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Seed stream used for evaluation and diagnosis episodes, kept apart from
/// training episode seeds.
const EVAL_SEED_OFFSET: u64 = 0x5EED_0000;

pub fn build_envs(cfg: &RunConfig, count: usize) -> CliResult<Vec<BoxEnv>> {
    (0..count)
        .map(|_| -> CliResult<BoxEnv> {
            match cfg.env_spec() {
                Some(spec) => Ok(spec.build()?),
                None => {
                    let timeout = Duration::from_millis(cfg.external_timeout_ms);
                    let base = ExternalEnv::spawn(&cfg.external_command, timeout, cfg.external_preprocess)?;
                    Ok(wrap(Box::new(base), cfg.frame_stack, cfg.sticky_p, cfg.sign_rewards)?)
                }
            }
        })
        .collect()
}

fn new_session<T: Real>(cfg: &RunConfig) -> CliResult<Session<T>> {
    let envs = VecEnv::new(build_envs(cfg, cfg.num_envs)?, cfg.seed)?;
    let agent = cfg.agent_config(envs.observation_shape());
    Ok(Session::with_envs(agent, envs, cfg.seed)?)
}

/// Outcome of a completed `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub batches: u64,
    pub frames: u64,
    pub final_rolling_mean: Option<f64>,
}

#[derive(Serialize)]
struct Failure<'a> {
    batch: u64,
    error: String,
    last_report: Option<&'a MetricsRecord>,
}

/// Trains for `cfg.batches` batches into `cfg.out`. With `resume`, continues
/// from `cfg.out/checkpoint.p4o`, whose configuration must match `cfg` except
/// for `batches`.
pub fn train(cfg: &RunConfig, resume: bool) -> CliResult<TrainSummary> {
    match cfg.precision {
        32 => train_with::<f32>(cfg, resume),
        64 => train_with::<f64>(cfg, resume),
        p => Err(CliError::Config(format!("precision must be 32 or 64, got {p}"))),
    }
}

fn train_with<T: Real>(cfg: &RunConfig, resume: bool) -> CliResult<TrainSummary> {
    std::fs::create_dir_all(&cfg.out)?;
    let ckpt_path = cfg.out.join(CHECKPOINT_FILE);
    let mut session = new_session::<T>(cfg)?;
    if resume {
        let ckpt = Checkpoint::read(&ckpt_path)?;
        let mut saved = ckpt.config.clone();
        saved.batches = cfg.batches;
        if saved != *cfg {
            return Err(CliError::Config(format!(
                "{} was written with a different configuration",
                ckpt_path.display()
            )));
        }
        session.restore(&ckpt.snapshot)?;
    }
    std::fs::write(cfg.out.join(CONFIG_FILE), cfg.to_toml())?;
    let mut writer = MetricsWriter::open(&cfg.out, session.batch)?;
    let save = |s: &Session<T>| -> CliResult<()> {
        Checkpoint { config: cfg.clone(), snapshot: s.snapshot()? }.write(&ckpt_path)
    };
    let mut last: Option<MetricsRecord> = None;
    while session.batch < cfg.batches {
        let start = Instant::now();
        let report = match session.run_batch() {
            Ok(r) => r,
            Err(e) => {
                let err = CliError::from(e);
                let failure = Failure { batch: session.batch, error: err.to_string(), last_report: last.as_ref() };
                std::fs::write(cfg.out.join(FAILURE_FILE), serde_json::to_string_pretty(&failure)?)?;
                return Err(err);
            }
        };
        writer.record(&report, start.elapsed().as_secs_f64())?;
        if cfg.dump_buffers {
            if let Some(buf) = &session.last_buffer {
                dump_buffer(&cfg.out.join("buffers").join(format!("batch-{:06}.csv", report.batch)), buf)?;
            }
        }
        if cfg.checkpoint_every > 0 && session.batch % cfg.checkpoint_every == 0 {
            save(&session)?;
        }
        last = Some(report);
    }
    save(&session)?;
    Ok(TrainSummary {
        batches: session.batch,
        frames: session.carry.frames,
        final_rolling_mean: session.tracker.rolling_mean(),
    })
}

fn load_agent<T: Real>(ckpt: &Checkpoint, envs: &VecEnv) -> CliResult<Agent<T>> {
    let config = ckpt.config.agent_config(envs.observation_shape());
    let mut agent = Agent::<T>::new(config, envs.action_count(), ckpt.config.seed)?;
    load_arrays(&mut agent.params, &ckpt.snapshot.params)?;
    Ok(agent)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub deterministic: bool,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Plays `episodes` complete episodes with the agent stored in `checkpoint`.
pub fn eval(checkpoint: &Path, deterministic: bool, episodes: usize) -> CliResult<EvalReport> {
    let ckpt = Checkpoint::read(checkpoint)?;
    if episodes == 0 {
        return Err(CliError::Config("episodes must be positive".into()));
    }
    match ckpt.config.precision {
        64 => eval_with::<f64>(&ckpt, deterministic, episodes),
        _ => eval_with::<f32>(&ckpt, deterministic, episodes),
    }
}

fn eval_with<T: Real>(ckpt: &Checkpoint, deterministic: bool, episodes: usize) -> CliResult<EvalReport> {
    let cfg = &ckpt.config;
    let n = cfg.num_envs.min(episodes);
    let seed = cfg.seed.wrapping_add(EVAL_SEED_OFFSET);
    let mut envs = VecEnv::new(build_envs(cfg, n)?, seed)?;
    let agent = load_agent::<T>(ckpt, &envs)?;
    let mut rng = Rng::with_stream(seed, 1);
    let mut obs = envs.reset_all()?;
    let mut state = agent.zero_state(n);
    let mut running = vec![0.0; n];
    // Each environment contributes its first episodes in turn, so the result
    // does not depend on which environment happens to finish first.
    let quota: Vec<usize> = (0..n).map(|i| episodes / n + usize::from(i < episodes % n)).collect();
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut t = 0;
    while scores.iter().zip(&quota).any(|(s, &q)| s.len() < q) {
        let frames: Vec<&[u8]> = obs.iter().map(|o| o.pixels.as_slice()).collect();
        let act = agent.act(&frames, &state, &mut rng, deterministic, t)?;
        let steps = envs.step(&act.actions)?;
        let dones: Vec<bool> = steps.iter().map(|s| s.terminal).collect();
        for (i, s) in steps.iter().enumerate() {
            running[i] += s.reward;
            if s.terminal {
                if scores[i].len() < quota[i] {
                    scores[i].push(running[i]);
                }
                running[i] = 0.0;
            }
        }
        obs = steps.into_iter().map(|s| s.observation).collect();
        state = act.state.reset_rows(&dones);
        t += 1;
    }
    let scores: Vec<f64> = scores.into_iter().flatten().collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(EvalReport { episodes, deterministic, scores, mean, min, max })
}

/// Latent-space statistics of the agent in `checkpoint` over `steps` steps.
pub fn diagnose(checkpoint: &Path, steps: usize) -> CliResult<DiagnosticReport> {
    let ckpt = Checkpoint::read(checkpoint)?;
    match ckpt.config.precision {
        64 => diagnose_with::<f64>(&ckpt, steps),
        _ => diagnose_with::<f32>(&ckpt, steps),
    }
}

fn diagnose_with<T: Real>(ckpt: &Checkpoint, steps: usize) -> CliResult<DiagnosticReport> {
    let cfg = &ckpt.config;
    let seed = cfg.seed.wrapping_add(EVAL_SEED_OFFSET);
    let mut envs = VecEnv::new(build_envs(cfg, cfg.num_envs)?, seed)?;
    let agent = load_agent::<T>(ckpt, &envs)?;
    let mut rng = Rng::with_stream(seed, 2);
    let samples = collect_latents(&agent, &mut envs, steps, &mut rng, false)?;
    Ok(samples.report())
}

/// Mean and standard error across seeds at each frame count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub frames: Vec<u64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// One-tailed p-value for "the first sample has the larger mean".
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub curve_a: Curve,
    pub curve_b: Curve,
    /// Last rolling mean of each seed's run.
    pub final_a: Vec<f64>,
    pub final_b: Vec<f64>,
    /// Mean of `final_a` minus mean of `final_b`.
    pub difference: f64,
    pub welch: WelchTest,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 { x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v)
}

/// Welch's unequal-variance t-test of `mean(a) > mean(b)`. Needs at least two
/// values on each side.
pub fn welch(a: &[f64], b: &[f64]) -> CliResult<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(CliError::Config("the Welch test needs at least two values per side".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        // Both samples are constant: the sign of the difference is certain.
        let p_value = if ma > mb { 0.0 } else if ma < mb { 1.0 } else { 0.5 };
        let t = if ma == mb { 0.0 } else { (ma - mb).signum() * f64::INFINITY };
        return Ok(WelchTest { t, df: (a.len() + b.len() - 2) as f64, p_value });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| CliError::Numeric(format!("t distribution: {e}")))?;
    Ok(WelchTest { t, df, p_value: 1.0 - dist.cdf(t) })
}

/// Averages runs over the frame counts that every run reached.
pub fn aggregate(runs: &[Vec<MetricsRecord>]) -> Curve {
    let mut frames: Vec<u64> = runs
        .first()
        .map(|r| r.iter().filter(|m| m.rolling_mean.is_some()).map(|m| m.frames).collect())
        .unwrap_or_default();
    frames.retain(|f| runs.iter().all(|r| r.iter().any(|m| m.frames == *f && m.rolling_mean.is_some())));
    let mut curve = Curve { frames: Vec::new(), mean: Vec::new(), stderr: Vec::new() };
    for f in frames {
        let vals: Vec<f64> =
            runs.iter().filter_map(|r| r.iter().find(|m| m.frames == f).and_then(|m| m.rolling_mean)).collect();
        let (m, v) = mean_var(&vals);
        curve.frames.push(f);
        curve.mean.push(m);
        curve.stderr.push((v / vals.len() as f64).sqrt());
    }
    curve
}

fn final_score(records: &[MetricsRecord], dir: &Path) -> CliResult<f64> {
    records
        .iter()
        .rev()
        .find_map(|r| r.rolling_mean)
        .ok_or_else(|| CliError::Other(format!("no episode finished in {}", dir.display())))
}

/// Trains `a` and `b` on seeds `0..seeds` under `out/a/seed-S` and
/// `out/b/seed-S`, then compares their final rolling means.
pub fn compare(a: &RunConfig, b: &RunConfig, seeds: u64, out: &Path) -> CliResult<CompareReport> {
    if seeds < 2 {
        return Err(CliError::Config("compare needs at least two seeds".into()));
    }
    let seed_list: Vec<u64> = (0..seeds).collect();
    let mut runs = [Vec::new(), Vec::new()];
    let mut finals = [Vec::new(), Vec::new()];
    for (side, (cfg, label)) in [(a, "a"), (b, "b")].into_iter().enumerate() {
        for &seed in &seed_list {
            let mut c = cfg.clone();
            c.seed = seed;
            c.out = out.join(label).join(format!("seed-{seed}"));
            train(&c, false)?;
            let records = read_metrics(&c.out.join(METRICS_FILE))?;
            finals[side].push(final_score(&records, &c.out)?);
            runs[side].push(records);
        }
    }
    let [final_a, final_b] = finals;
    let welch = welch(&final_a, &final_b)?;
    let difference = mean_var(&final_a).0 - mean_var(&final_b).0;
    Ok(CompareReport {
        seeds: seed_list,
        curve_a: aggregate(&runs[0]),
        curve_b: aggregate(&runs[1]),
        final_a,
        final_b,
        difference,
        welch,
    })
}

/// Default output directory of `compare` when none is configured.
pub fn compare_dir(a: &RunConfig) -> PathBuf {
    a.out.join("compare")
}
