//! The training objective and the epoch/minibatch optimization loop.
//!
//! The objective to minimize is
//! `c₁·L^A + c₂·L^V + c₃·L^P + c₄·L^H (+ c₅·L1)`, where
//!
//! * `L^A = −mean(min(r·Â, clip(r, 1−ε, 1+ε)·Â))`, `r = exp(log π − log π_anchor)`
//! * `L^V = mean(max(|v − R|, |v_clip − R|))`, `v_clip = v_old + clip(v − v_old, −ε, ε)`
//! * `L^P = Σᵢ MSE(prediction i steps ahead − latent i steps ahead)`
//! * `L^H = −mean(entropy)`
//! * `L1 = mean(|[h, p]|)`, off by default.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig, LrDecay, RefreshCadence};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};
use crate::optim::{clip_grad_norm, Adam};
use crate::rollout::{keep_mask, refresh_advantages, refresh_hidden_states, RolloutBuffer};
use crate::world_model::{RecurrentState, StateVars};

/// Learning rate for batch `batch` (counted from 0).
pub fn lr_schedule(batch: u64, decay: LrDecay, lr0: f64) -> f64 {
    match decay {
        LrDecay::Short => lr0 * ((10_000.0 - batch as f64) / 10_000.0).max(1e-4),
        LrDecay::Long => (lr0 * libm::pow(0.995, (batch / 100) as f64)).max(5e-6),
        LrDecay::Constant => lr0,
    }
}

/// Clipped surrogate loss. `log_probs` are `[B]` log-probabilities of the taken
/// actions under the current policy.
pub fn actor_loss<T: Real>(
    g: &mut Graph<'_, T>,
    log_probs: Var,
    anchor_log_probs: &[f64],
    advantages: &[f64],
    eps: f64,
) -> Result<Var> {
    let b = g.shape(log_probs)[0];
    if anchor_log_probs.len() != b || advantages.len() != b {
        return Err(Error::dim("actor_loss", &[b], &[anchor_log_probs.len(), advantages.len()]));
    }
    let anchor = g.constant(Tensor::from_f64(&[b], anchor_log_probs)?);
    let adv = g.constant(Tensor::from_f64(&[b], advantages)?);
    let diff = g.sub(log_probs, anchor)?;
    let ratio = g.exp(diff);
    if !g.value(ratio).all_finite() {
        return Err(Error::Numeric("non-finite probability ratio".into()));
    }
    let unclipped = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, T::of(1.0 - eps), T::of(1.0 + eps));
    let clipped = g.mul(clipped, adv)?;
    let surrogate = g.minimum(unclipped, clipped)?;
    let m = g.mean(surrogate);
    Ok(g.scale(m, -T::one()))
}

/// Value loss with absolute errors and a clipped change from `old_values`.
pub fn critic_loss<T: Real>(
    g: &mut Graph<'_, T>,
    values: Var,
    old_values: &[f64],
    returns: &[f64],
    eps: f64,
) -> Result<Var> {
    let b = g.shape(values)[0];
    if old_values.len() != b || returns.len() != b {
        return Err(Error::dim("critic_loss", &[b], &[old_values.len(), returns.len()]));
    }
    let old = g.constant(Tensor::from_f64(&[b], old_values)?);
    let ret = g.constant(Tensor::from_f64(&[b], returns)?);
    let change = g.sub(values, old)?;
    let change = g.clamp(change, T::of(-eps), T::of(eps));
    let v_clip = g.add(old, change)?;
    let d1 = g.sub(values, ret)?;
    let d1 = g.abs(d1);
    let d2 = g.sub(v_clip, ret)?;
    let d2 = g.abs(d2);
    let worst = g.maximum(d1, d2)?;
    Ok(g.mean(worst))
}

/// `−mean(H(π))` for `[B, A]` logits; returns `(loss, per-row entropy)`.
pub fn entropy_bonus<T: Real>(g: &mut Graph<'_, T>, logits: Var) -> Result<(Var, Var)> {
    let logp = g.log_softmax(logits)?;
    let probs = g.softmax(logits)?;
    let plogp = g.mul(probs, logp)?;
    let neg_h = g.sum_cols(plogp)?;
    let entropy = g.scale(neg_h, -T::one());
    Ok((g.mean(neg_h), entropy))
}

/// Weights of the loss terms. `l1` is `None` when the penalty is disabled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub actor: f64,
    pub critic: f64,
    pub prediction: f64,
    pub entropy: f64,
    pub l1: Option<f64>,
}

impl Coefficients {
    /// Coefficients in effect for batch `batch`, including entropy decay and the
    /// ablation's zero prediction weight.
    pub fn for_batch(cfg: &AgentConfig, batch: u64) -> Self {
        Self {
            actor: cfg.c_actor,
            critic: cfg.c_critic,
            prediction: cfg.effective_c_prediction(),
            entropy: cfg.c_entropy * libm::pow(cfg.entropy_decay, batch as f64),
            l1: cfg.l1_enabled.then_some(cfg.c_l1),
        }
    }
}

impl Default for Coefficients {
    fn default() -> Self {
        Self::for_batch(&AgentConfig::default(), 0)
    }
}

/// Scalar loss components of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub actor: f64,
    pub critic: f64,
    pub prediction: f64,
    pub entropy: f64,
    pub l1: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Fills `total` from the components.
    pub fn with_total(mut self, c: &Coefficients) -> Self {
        self.total = c.actor * self.actor
            + c.critic * self.critic
            + c.prediction * self.prediction
            + c.entropy * self.entropy
            + c.l1.map_or(0.0, |w| w * self.l1);
        self
    }

    pub fn all_finite(&self) -> bool {
        [self.actor, self.critic, self.prediction, self.entropy, self.l1, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Graph handles of the loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub actor: Var,
    pub critic: Var,
    /// Absent for the baseline variants.
    pub prediction: Option<Var>,
    pub entropy: Var,
    pub l1: Var,
    pub total: Var,
    pub ratio: Var,
    pub policy_entropy: Var,
}

/// Weighted sum of the loss terms. Terms with a zero weight are left out of the
/// graph so they cost nothing in the backward pass.
pub fn combined_loss<T: Real>(
    g: &mut Graph<'_, T>,
    actor: Var,
    critic: Var,
    prediction: Option<Var>,
    entropy: Var,
    l1: Var,
    c: &Coefficients,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(5);
    let mut push = |g: &mut Graph<'_, T>, v: Var, w: f64| {
        if w != 0.0 {
            terms.push(g.scale(v, T::of(w)));
        }
    };
    push(g, actor, c.actor);
    push(g, critic, c.critic);
    if let Some(p) = prediction {
        push(g, p, c.prediction);
    }
    push(g, entropy, c.entropy);
    if let Some(w) = c.l1 {
        push(g, l1, w);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => {
            let z = g.scale(actor, T::zero());
            return Ok(z);
        }
    };
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Zero mean and unit variance; a constant input maps to zeros.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    if adv.is_empty() {
        return Vec::new();
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

/// Everything one minibatch loss needs: `L` contiguous steps of `N` envs,
/// time-major.
#[derive(Clone, Debug)]
pub struct MinibatchInput<'a, T> {
    /// `[L·N, C, H, W]`, scaled to `[0, 1]`.
    pub frames: Tensor<T>,
    pub num_envs: usize,
    pub actions: &'a [usize],
    pub anchor_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
    pub old_values: &'a [f64],
    pub terminals: &'a [bool],
    /// State entering the first step.
    pub entry: &'a RecurrentState<T>,
}

/// Builds the full objective for one minibatch: encoder over all frames,
/// recurrent core unrolled through time with episode resets, heads, and the
/// horizon prediction loss. Prediction targets never cross a terminal or the
/// end of the minibatch.
pub fn minibatch_loss<T: Real>(
    agent: &Agent<T>,
    g: &mut Graph<'_, T>,
    input: &MinibatchInput<'_, T>,
    coeffs: &Coefficients,
) -> Result<LossVars> {
    let n = input.num_envs;
    let rows = input.frames.rows();
    if n == 0 || rows % n != 0 || input.actions.len() != rows || input.terminals.len() != rows {
        return Err(Error::dim("minibatch_loss", &[rows, n], &[input.actions.len(), input.terminals.len()]));
    }
    let steps = rows / n;
    let cfg = &agent.config;
    let frames = g.constant(input.frames.clone());
    let latents = agent.encoder.encode(g, frames)?;
    let mut state = input.entry.to_vars(g);
    let mut combined = Vec::with_capacity(steps);
    let mut states: Vec<StateVars> = Vec::with_capacity(steps);
    let mut xs = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = g.slice_rows(latents, t * n, n)?;
        let step = agent.world.step(g, x, &state, t)?;
        xs.push(x);
        combined.push(step.combined);
        states.push(step.state);
        let dones = &input.terminals[t * n..(t + 1) * n];
        state = if dones.iter().any(|&d| d) {
            step.state.mask_rows(g, &keep_mask::<T>(dones))?
        } else {
            step.state
        };
    }
    let combined = g.concat_rows(&combined)?;
    let heads = agent.heads.act_value(g, combined)?;

    let logp_all = g.log_softmax(heads.logits)?;
    let logp = g.gather(logp_all, input.actions)?;
    let diff = {
        let anchor = g.constant(Tensor::from_f64(&[rows], input.anchor_log_probs)?);
        g.sub(logp, anchor)?
    };
    let ratio = g.exp(diff);
    let actor = actor_loss(g, logp, input.anchor_log_probs, input.advantages, cfg.clip_eps)?;
    let critic = critic_loss(g, heads.value, input.old_values, input.returns, cfg.clip_eps)?;
    let (entropy, policy_entropy) = entropy_bonus(g, heads.logits)?;
    let abs = g.abs(combined);
    let l1 = g.mean(abs);

    let prediction = match agent.world.predictive() {
        Some(model) => Some(horizon_loss(g, model, &states, &xs, input.terminals, n, cfg)?),
        None => None,
    };
    let total = combined_loss(g, actor, critic, prediction, entropy, l1, coeffs)?;
    Ok(LossVars {
        actor,
        critic,
        prediction,
        entropy,
        l1,
        total,
        ratio,
        policy_entropy,
    })
}

fn horizon_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &crate::world_model::PcLstm,
    states: &[StateVars],
    xs: &[Var],
    terminals: &[bool],
    n: usize,
    cfg: &AgentConfig,
) -> Result<Var> {
    let steps = states.len();
    let h = cfg.horizon;
    let p = model.latent_dim();
    let mut sums: Vec<Option<Var>> = alloc::vec![None; h];
    let mut counts = alloc::vec![0usize; h];
    let targets: Vec<Var> = if cfg.detach_prediction_targets {
        xs.iter().map(|&x| {
            let v = g.value(x).clone();
            g.constant(v)
        }).collect()
    } else {
        xs.to_vec()
    };
    for t in 0..steps {
        let mut alive = alloc::vec![true; n];
        let mut reach = 0;
        let mut masks: Vec<Vec<T>> = Vec::with_capacity(h);
        for i in 1..=h.min(steps - 1 - t) {
            for (e, a) in alive.iter_mut().enumerate() {
                *a &= !terminals[(t + i - 1) * n + e];
            }
            if !alive.iter().any(|&a| a) {
                break;
            }
            reach = i;
            masks.push(alive.iter().map(|&a| if a { T::one() } else { T::zero() }).collect());
        }
        if reach == 0 {
            continue;
        }
        let preds = model.horizon_predictions(g, &states[t], reach)?;
        for (i, (pred, mask)) in preds.iter().zip(&masks).enumerate() {
            let d = g.sub(*pred, targets[t + i + 1])?;
            let sq = g.square(d);
            let live = mask.iter().filter(|&&m| m > T::zero()).count();
            let sq = if live < n { g.scale_rows(sq, mask)? } else { sq };
            let s = g.sum(sq);
            counts[i] += live;
            sums[i] = Some(match sums[i] {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
    }
    let mut total: Option<Var> = None;
    for (s, c) in sums.into_iter().zip(counts) {
        let Some(s) = s else { continue };
        let mse = g.scale(s, T::of(1.0 / (c * p) as f64));
        total = Some(match total {
            Some(acc) => g.add(acc, mse)?,
            None => mse,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    })
}

/// Per-update training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub epoch: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub policy_entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub anchored: bool,
}

/// Optimizer and anchoring state carried across batches.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState<T> {
    pub adam: Adam<T>,
    /// Parameters before the last optimizer step of the previous batch.
    pub anchor: Option<ParamStore<T>>,
    pub updates: u64,
}

impl<T: Real> TrainerState<T> {
    pub fn new(agent: &Agent<T>) -> Self {
        Self {
            adam: Adam::new(&agent.params, agent.config.adam_eps),
            anchor: None,
            updates: 0,
        }
    }
}

/// Log-probabilities of segment `s`'s actions under `params`, starting from
/// the segment's stored boundary state.
pub fn segment_log_probs<T: Real>(
    agent: &Agent<T>,
    params: &ParamStore<T>,
    buf: &RolloutBuffer<T>,
    s: usize,
) -> Result<Vec<f64>> {
    let range = buf.segment_range(s);
    let frames = buf.frames(range.clone())?;
    let n = buf.num_envs;
    let mut g = Graph::inference(params);
    let x = g.constant(frames);
    let latents = agent.encoder.encode(&mut g, x)?;
    let mut state = buf.boundary_states[s].to_vars(&mut g);
    let mut combined = Vec::with_capacity(buf.segment_len);
    for t in 0..buf.segment_len {
        let xt = g.slice_rows(latents, t * n, n)?;
        let step = agent.world.step(&mut g, xt, &state, t)?;
        combined.push(step.combined);
        let dones = &buf.terminals[range.start + t * n..range.start + (t + 1) * n];
        state = step.state.mask_rows(&mut g, &keep_mask::<T>(dones))?;
    }
    let combined = g.concat_rows(&combined)?;
    let heads = agent.heads.act_value(&mut g, combined)?;
    let logp = g.log_softmax(heads.logits)?;
    let chosen = g.gather(logp, &buf.actions[range])?;
    Ok(g.value(chosen).to_f64_vec())
}

/// One optimizer step on segment `s`. Gradients are left in the store.
fn update<T: Real>(
    agent: &mut Agent<T>,
    state: &mut TrainerState<T>,
    buf: &RolloutBuffer<T>,
    s: usize,
    anchor_log_probs: &[f64],
    coeffs: &Coefficients,
    lr: f64,
) -> Result<UpdateMetrics> {
    let range = buf.segment_range(s);
    let advantages = if agent.config.normalize_advantages {
        normalize_advantages(&buf.advantages[range.clone()])
    } else {
        buf.advantages[range.clone()].to_vec()
    };
    let input = MinibatchInput {
        frames: buf.frames(range.clone())?,
        num_envs: buf.num_envs,
        actions: &buf.actions[range.clone()],
        anchor_log_probs,
        advantages: &advantages,
        returns: &buf.returns[range.clone()],
        old_values: &buf.values[range.clone()],
        terminals: &buf.terminals[range],
        entry: &buf.boundary_states[s],
    };
    let (losses, ratio, entropy, grads) = {
        let mut g = Graph::new(&agent.params);
        let vars = minibatch_loss(agent, &mut g, &input, coeffs)?;
        let scalar = |v: Var| g.value(v).item().as_f64();
        let losses = LossBreakdown {
            actor: scalar(vars.actor),
            critic: scalar(vars.critic),
            prediction: vars.prediction.map_or(0.0, scalar),
            entropy: scalar(vars.entropy),
            l1: scalar(vars.l1),
            total: scalar(vars.total),
        };
        if !losses.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at update {} (minibatch {s}): {losses:?}",
                state.updates
            )));
        }
        let ratio = g.value(vars.ratio).to_f64_vec();
        let entropy = g.value(vars.policy_entropy).to_f64_vec();
        let grads = g.backward(vars.total)?;
        (losses, ratio, entropy, grads)
    };
    agent.params.zero_grads();
    grads.accumulate_into(&mut agent.params);
    drop(grads);
    let grad_norm = match agent.config.grad_clip {
        Some(c) => clip_grad_norm(&mut agent.params, c),
        None => agent.params.grad_norm(),
    };
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient norm at update {}", state.updates)));
    }
    state.adam.step(&mut agent.params, lr)?;
    state.updates += 1;
    let eps = agent.config.clip_eps;
    let clipped = ratio.iter().filter(|r| (**r - 1.0).abs() > eps).count();
    let count = ratio.len().max(1) as f64;
    Ok(UpdateMetrics {
        epoch: 0,
        minibatch: s,
        lr,
        losses,
        policy_entropy: entropy.iter().sum::<f64>() / entropy.len().max(1) as f64,
        mean_ratio: ratio.iter().sum::<f64>() / count,
        clip_fraction: clipped as f64 / count,
        grad_norm,
        anchored: false,
    })
}

/// Runs all epochs and minibatch updates on one batch.
///
/// Each epoch after the first starts with an advantage refresh (every update
/// after the first when the cadence is per minibatch); every optimizer step is
/// followed by a hidden-state refresh. The first update is anchored on the
/// previous batch's second-to-last parameters when available.
pub fn train_on_batch<T: Real>(
    agent: &mut Agent<T>,
    state: &mut TrainerState<T>,
    buf: &mut RolloutBuffer<T>,
    batch: u64,
) -> Result<Vec<UpdateMetrics>> {
    let cfg = agent.config.clone();
    let lr = lr_schedule(batch, cfg.lr_decay, cfg.lr);
    let coeffs = Coefficients::for_batch(&cfg, batch);
    let segments = buf.segments();
    let total_updates = cfg.epochs * segments;
    let mut metrics = Vec::with_capacity(total_updates);
    let mut k = 0;
    for epoch in 0..cfg.epochs {
        for s in 0..segments {
            let refresh = match cfg.advantage_refresh {
                RefreshCadence::Epoch => epoch > 0 && s == 0,
                RefreshCadence::Minibatch => k > 0,
            };
            if refresh {
                refresh_advantages(buf, agent)?;
            }
            let anchored = k == 0 && cfg.anchor_first_update && state.anchor.is_some();
            let anchor_lp = match (&state.anchor, anchored) {
                (Some(p), true) => segment_log_probs(agent, p, buf, s)?,
                _ => buf.log_probs[buf.segment_range(s)].to_vec(),
            };
            if k + 1 == total_updates {
                state.anchor = Some(agent.params.clone());
            }
            let mut m = update(agent, state, buf, s, &anchor_lp, &coeffs, lr)?;
            m.epoch = epoch;
            m.anchored = anchored;
            metrics.push(m);
            refresh_hidden_states(buf, agent)?;
            k += 1;
        }
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_worked_values() {
        assert_eq!(lr_schedule(0, LrDecay::Short, 2.5e-4), 2.5e-4);
        assert_eq!(lr_schedule(0, LrDecay::Long, 2.5e-4), 2.5e-4);
        assert_eq!(lr_schedule(5000, LrDecay::Short, 2.5e-4), 1.25e-4);
        assert_eq!(lr_schedule(200, LrDecay::Long, 2.5e-4), 2.4750625e-4);
    }

    #[test]
    fn schedule_floors() {
        assert!((lr_schedule(20_000, LrDecay::Short, 2.5e-4) - 2.5e-8).abs() < 1e-20);
        assert_eq!(lr_schedule(10_000_000, LrDecay::Long, 2.5e-4), 5e-6);
    }

    #[test]
    fn default_coefficients_on_unit_components() {
        let b = LossBreakdown {
            actor: 1.0,
            critic: 1.0,
            prediction: 1.0,
            entropy: 1.0,
            l1: 1.0,
            total: 0.0,
        };
        assert!((b.with_total(&Coefficients::default()).total - 2.52).abs() < 1e-12);
    }
}
