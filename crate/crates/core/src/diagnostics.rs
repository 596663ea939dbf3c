//! Latent, prediction and error statistics of a trained agent.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::envs::VecEnv;
use crate::error::Result;
use crate::numerics::{Real, Rng};

/// Reference prediction R² reported for fully trained agents on pixel games.
pub const REFERENCE_R2: f64 = 0.89;

/// Coefficient of determination of `predictions` against `targets`, both
/// row-major `[n, dim]`, pooled over dimensions: `1 − SS_res / SS_tot` with
/// `SS_tot` measured from each dimension's mean. `None` when the targets have
/// zero variance.
pub fn r_squared(predictions: &[f64], targets: &[f64], dim: usize) -> Option<f64> {
    if dim == 0 || targets.is_empty() || predictions.len() != targets.len() {
        return None;
    }
    let n = targets.len() / dim;
    let mut means = vec![0.0; dim];
    for row in targets.chunks(dim) {
        for (m, &x) in means.iter_mut().zip(row) {
            *m += x;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (prow, trow) in predictions.chunks(dim).zip(targets.chunks(dim)) {
        for j in 0..dim {
            ss_res += (prow[j] - trow[j]) * (prow[j] - trow[j]);
            ss_tot += (trow[j] - means[j]) * (trow[j] - means[j]);
        }
    }
    (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot)
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`. Values
/// outside the range land in the edge bins, so the counts sum to the number of
/// finite values.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0; bins];
    if bins == 0 {
        return counts;
    }
    let width = (hi - lo) / bins as f64;
    for &v in values.iter().filter(|v| v.is_finite()) {
        let i = ((v - lo) / width) as isize;
        counts[i.clamp(0, bins as isize - 1) as usize] += 1;
    }
    counts
}

/// Samples gathered by running a policy: the latent `xₜ`, the prediction made
/// for it `pₜ₋₁`, and the error `eₜ`, all `[n, p]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentSamples {
    pub dim: usize,
    pub latents: Vec<f64>,
    pub predictions: Vec<f64>,
    pub errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    /// Latent vectors recorded.
    pub samples: usize,
    /// Size of each vector; every histogram counts `samples * dim` values.
    pub dim: usize,
    pub bins: Vec<f64>,
    pub latent_hist: Vec<usize>,
    pub prediction_hist: Vec<usize>,
    pub error_hist: Vec<usize>,
    /// `None` when the latents have zero variance.
    pub r_squared: Option<f64>,
    pub reference_r_squared: f64,
}

pub const HIST_BINS: usize = 20;

impl LatentSamples {
    pub fn report(&self) -> DiagnosticReport {
        let edges = (0..=HIST_BINS)
            .map(|i| -1.0 + 2.0 * i as f64 / HIST_BINS as f64)
            .collect();
        DiagnosticReport {
            samples: self.latents.len() / self.dim.max(1),
            dim: self.dim,
            bins: edges,
            latent_hist: histogram(&self.latents, HIST_BINS, -1.0, 1.0),
            prediction_hist: histogram(&self.predictions, HIST_BINS, -1.0, 1.0),
            error_hist: histogram(&self.errors, HIST_BINS, -1.0, 1.0),
            r_squared: r_squared(&self.predictions, &self.latents, self.dim),
            reference_r_squared: REFERENCE_R2,
        }
    }
}

/// Runs `agent` for `steps` steps in every environment and records latents,
/// predictions and errors. The first step of each episode is skipped because
/// its prediction comes from a reset state. Baseline agents have no prediction
/// population, so only latents are recorded.
pub fn collect_latents<T: Real>(
    agent: &Agent<T>,
    envs: &mut VecEnv,
    steps: usize,
    rng: &mut Rng,
    deterministic: bool,
) -> Result<LatentSamples> {
    let n = envs.len();
    let p = agent.config.latent_dim();
    let predictive = agent.world.predictive().is_some();
    let mut obs = envs.reset_all()?;
    let mut state = agent.zero_state(n);
    let mut first = vec![true; n];
    let mut out = LatentSamples {
        dim: p,
        ..Default::default()
    };
    for t in 0..steps {
        let frames: Vec<&[u8]> = obs.iter().map(|o| o.pixels.as_slice()).collect();
        let prev_p = state.p.clone();
        let act = agent.act(&frames, &state, rng, deterministic, t)?;
        for i in 0..n {
            if first[i] {
                continue;
            }
            out.latents.extend(act.latents.row(i).iter().map(|v| v.as_f64()));
            if predictive {
                out.predictions.extend(prev_p.row(i).iter().map(|v| v.as_f64()));
                out.errors.extend(act.errors.row(i).iter().map(|v| v.as_f64()));
            }
        }
        let results = envs.step(&act.actions)?;
        let dones: Vec<bool> = results.iter().map(|s| s.terminal).collect();
        first.copy_from_slice(&dones);
        obs = results.into_iter().map(|s| s.observation).collect();
        state = act.state.reset_rows(&dones);
    }
    Ok(out)
}
