//! Batch collection, truncated GAE and the two staleness repairs.
//!
//! Buffers are stored time-major: sample `(t, env)` lives at index `t·N + env`,
//! so each timestep is a contiguous block of rows and a minibatch segment is a
//! contiguous range.

use alloc::vec;
use alloc::vec::Vec;

use crate::agent::Agent;
use crate::envs::{Observation, VecEnv};
use crate::error::{Error, Result};
use crate::networks::frames_tensor;
use crate::numerics::{Graph, Real, Rng, Tensor};
use crate::world_model::RecurrentState;

/// One data batch of `N` environments × `T` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer<T> {
    pub num_envs: usize,
    pub steps: usize,
    pub segment_len: usize,
    pub obs_shape: [usize; 3],
    /// `T·N` frames of `C·H·W` bytes each.
    pub observations: Vec<u8>,
    /// `[T·N, p]`
    pub latents: Tensor<T>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// `terminals[t·N + i]`: the transition out of step `t` ended env `i`'s episode.
    pub terminals: Vec<bool>,
    /// Values at acting time; the critic clip is anchored on these.
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// State entering each segment's first step, after episode resets.
    pub boundary_states: Vec<RecurrentState<T>>,
    /// State entering the step after the batch, after episode resets.
    pub end_state: RecurrentState<T>,
    /// Frames observed after the last step.
    pub next_observations: Vec<u8>,
    pub bootstrap_values: Vec<f64>,
    /// Optimizer steps applied to the acting parameters.
    pub policy_version: u64,
}

impl<T: Real> RolloutBuffer<T> {
    pub fn len(&self) -> usize {
        self.num_envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> usize {
        self.steps / self.segment_len
    }

    pub fn frame_len(&self) -> usize {
        self.obs_shape.iter().product()
    }

    pub fn frame(&self, index: usize) -> &[u8] {
        let n = self.frame_len();
        &self.observations[index * n..(index + 1) * n]
    }

    /// Sample indices of segment `s`.
    pub fn segment_range(&self, s: usize) -> core::ops::Range<usize> {
        let rows = self.segment_len * self.num_envs;
        s * rows..(s + 1) * rows
    }

    /// `[rows, C, H, W]` pixels of a sample range scaled to `[0, 1]`.
    pub fn frames(&self, range: core::ops::Range<usize>) -> Result<Tensor<T>> {
        let frames: Vec<&[u8]> = range.map(|i| self.frame(i)).collect();
        frames_tensor(&frames, self.obs_shape)
    }

    /// Values of env `i` in time order.
    fn column<V: Copy>(&self, data: &[V], env: usize) -> Vec<V> {
        (0..self.steps).map(|t| data[t * self.num_envs + env]).collect()
    }

    /// Recomputes advantages and returns from `values` and `bootstrap_values`.
    pub fn recompute_gae(&mut self, values: &[f64], bootstrap: &[f64], gamma: f64, lambda: f64) {
        let n = self.num_envs;
        let mut adv = vec![0.0; self.len()];
        let mut ret = vec![0.0; self.len()];
        for env in 0..n {
            let r = self.column(&self.rewards, env);
            let v = self.column(values, env);
            let d = self.column(&self.terminals, env);
            let (a, rt) = compute_gae(&r, &v, &d, bootstrap[env], gamma, lambda);
            for t in 0..self.steps {
                adv[t * n + env] = a[t];
                ret[t * n + env] = rt[t];
            }
        }
        self.advantages = adv;
        self.returns = ret;
    }
}

/// Truncated generalized advantage estimation over one environment's sequence.
///
/// `δₜ = rₜ + γ·Vₜ₊₁·(1 − doneₜ) − Vₜ` and `Âₜ = δₜ + γλ·(1 − doneₜ)·Âₜ₊₁`, with
/// `V_T = bootstrap`. Returns `(Â, Â + V)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    terminals: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    debug_assert!(values.len() == n && terminals.len() == n);
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if terminals[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Rows to keep (1) or reset (0) after a step with these terminal flags.
pub fn keep_mask<T: Real>(terminals: &[bool]) -> Vec<T> {
    terminals
        .iter()
        .map(|&d| if d { T::zero() } else { T::one() })
        .collect()
}

/// A finished episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub env: usize,
    pub score: f64,
    pub length: usize,
}

/// What carries over between batches: current frames, recurrent state and
/// partial episode statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectorState<T> {
    pub observations: Vec<Observation>,
    pub state: RecurrentState<T>,
    pub episode_scores: Vec<f64>,
    pub episode_lengths: Vec<usize>,
    pub frames: u64,
}

impl<T: Real> CollectorState<T> {
    pub fn start(agent: &Agent<T>, envs: &mut VecEnv) -> Result<Self> {
        let observations = envs.reset_all()?;
        let n = envs.len();
        Ok(Self {
            observations,
            state: agent.zero_state(n),
            episode_scores: vec![0.0; n],
            episode_lengths: vec![0; n],
            frames: 0,
        })
    }
}

/// Runs the acting policy for `T` steps in every environment.
pub fn collect<T: Real>(
    agent: &Agent<T>,
    envs: &mut VecEnv,
    carry: &mut CollectorState<T>,
    rng: &mut Rng,
    policy_version: u64,
) -> Result<(RolloutBuffer<T>, Vec<EpisodeRecord>)> {
    let cfg = &agent.config;
    let (n, steps) = (envs.len(), cfg.batch_steps);
    let seg = cfg.segment_len();
    if carry.observations.len() != n || carry.state.batch() != n {
        return Err(Error::dim("collect", &[n], &[carry.observations.len(), carry.state.batch()]));
    }
    let obs_shape = envs.observation_shape();
    let frame_len: usize = obs_shape.iter().product();
    let mut buf = RolloutBuffer {
        num_envs: n,
        steps,
        segment_len: seg,
        obs_shape,
        observations: Vec::with_capacity(n * steps * frame_len),
        latents: Tensor::zeros(&[0, cfg.latent_dim()]),
        actions: Vec::with_capacity(n * steps),
        log_probs: Vec::with_capacity(n * steps),
        rewards: Vec::with_capacity(n * steps),
        terminals: Vec::with_capacity(n * steps),
        values: Vec::with_capacity(n * steps),
        advantages: Vec::new(),
        returns: Vec::new(),
        boundary_states: Vec::with_capacity(steps / seg),
        end_state: carry.state.clone(),
        next_observations: Vec::new(),
        bootstrap_values: Vec::new(),
        policy_version,
    };
    let mut latent_rows: Vec<Tensor<T>> = Vec::with_capacity(steps);
    let mut finished = Vec::new();
    for t in 0..steps {
        if t % seg == 0 {
            buf.boundary_states.push(carry.state.clone());
        }
        let frames: Vec<&[u8]> = carry.observations.iter().map(|o| o.pixels.as_slice()).collect();
        for f in &frames {
            buf.observations.extend_from_slice(f);
        }
        let out = agent.act(&frames, &carry.state, rng, false, t)?;
        let results = envs.step(&out.actions)?;
        let mut dones = Vec::with_capacity(n);
        for (i, step) in results.into_iter().enumerate() {
            if !step.reward.is_finite() {
                return Err(Error::Env {
                    env: i,
                    step: t,
                    message: "non-finite reward".into(),
                });
            }
            if step.observation.shape != obs_shape {
                return Err(Error::Env {
                    env: i,
                    step: t,
                    message: alloc::format!("observation shape {:?} != {:?}", step.observation.shape, obs_shape),
                });
            }
            carry.episode_scores[i] += step.reward;
            carry.episode_lengths[i] += 1;
            if step.terminal {
                finished.push(EpisodeRecord {
                    env: i,
                    score: carry.episode_scores[i],
                    length: carry.episode_lengths[i],
                });
                carry.episode_scores[i] = 0.0;
                carry.episode_lengths[i] = 0;
            }
            buf.rewards.push(step.reward);
            buf.terminals.push(step.terminal);
            dones.push(step.terminal);
            carry.observations[i] = step.observation;
        }
        if out.log_probs.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numeric(alloc::format!("non-finite log-probability at step {t}")));
        }
        buf.actions.extend_from_slice(&out.actions);
        buf.log_probs.extend_from_slice(&out.log_probs);
        buf.values.extend_from_slice(&out.values);
        latent_rows.push(out.latents);
        carry.state = out.state.reset_rows(&dones);
        carry.frames += n as u64;
    }
    let refs: Vec<&Tensor<T>> = latent_rows.iter().collect();
    buf.latents = Tensor::concat_rows(&refs)?;
    buf.end_state = carry.state.clone();
    for o in &carry.observations {
        buf.next_observations.extend_from_slice(&o.pixels);
    }
    buf.bootstrap_values = bootstrap_values(agent, &buf.next_observations, obs_shape, &buf.end_state)?;
    let values = buf.values.clone();
    let bootstrap = buf.bootstrap_values.clone();
    buf.recompute_gae(&values, &bootstrap, cfg.gamma, cfg.lambda);
    Ok((buf, finished))
}

fn bootstrap_values<T: Real>(
    agent: &Agent<T>,
    next_observations: &[u8],
    obs_shape: [usize; 3],
    state: &RecurrentState<T>,
) -> Result<Vec<f64>> {
    let frame_len: usize = obs_shape.iter().product();
    let frames: Vec<&[u8]> = next_observations.chunks(frame_len).collect();
    let latents = agent.encode_frames(&frames)?;
    let mut g = Graph::inference(&agent.params);
    let prev = state.to_vars(&mut g);
    let x = g.constant(latents);
    let (_, heads) = agent.step_from_latent(&mut g, x, &prev, 0)?;
    Ok(g.value(heads.value).to_f64_vec())
}

/// Output of replaying the recurrent core over stored latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Replay<T> {
    pub boundary_states: Vec<RecurrentState<T>>,
    pub end_state: RecurrentState<T>,
    pub values: Vec<f64>,
}

/// Runs the current recurrent core and critic over `latents` (`[T·N, p]`) from
/// the batch-start state, applying episode resets, without gradients.
pub fn replay<T: Real>(
    agent: &Agent<T>,
    latents: &Tensor<T>,
    terminals: &[bool],
    start: &RecurrentState<T>,
    num_envs: usize,
    segment_len: usize,
) -> Result<Replay<T>> {
    let steps = latents.rows() / num_envs;
    let mut state = start.clone();
    let mut boundary_states = Vec::with_capacity(steps / segment_len.max(1));
    let mut values = Vec::with_capacity(latents.rows());
    for t in 0..steps {
        if t % segment_len == 0 {
            boundary_states.push(state.clone());
        }
        let mut g = Graph::inference(&agent.params);
        let prev = state.to_vars(&mut g);
        let x = g.constant(latents.slice_rows(t * num_envs, num_envs)?);
        let (step, heads) = agent.step_from_latent(&mut g, x, &prev, t)?;
        values.extend(g.value(heads.value).to_f64_vec());
        state = step.state.values(&g).reset_rows(&terminals[t * num_envs..(t + 1) * num_envs]);
    }
    Ok(Replay {
        boundary_states,
        end_state: state,
        values,
    })
}

/// Re-runs the current recurrent core over the buffer's latents and replaces
/// the segment-boundary and end states.
pub fn refresh_hidden_states<T: Real>(buf: &mut RolloutBuffer<T>, agent: &Agent<T>) -> Result<()> {
    let start = buf.boundary_states[0].clone();
    let r = replay(agent, &buf.latents, &buf.terminals, &start, buf.num_envs, buf.segment_len)?;
    buf.boundary_states = r.boundary_states;
    buf.end_state = r.end_state;
    Ok(())
}

/// Re-encodes the stored frames with the current encoder, refreshes the
/// recurrent states and values, and recomputes advantages and returns. Acting
/// values in `buf.values` are left untouched.
pub fn refresh_advantages<T: Real>(buf: &mut RolloutBuffer<T>, agent: &Agent<T>) -> Result<()> {
    let frames: Vec<&[u8]> = (0..buf.len()).map(|i| buf.frame(i)).collect();
    buf.latents = agent.encode_frames(&frames)?;
    let start = buf.boundary_states[0].clone();
    let r = replay(agent, &buf.latents, &buf.terminals, &start, buf.num_envs, buf.segment_len)?;
    buf.boundary_states = r.boundary_states;
    buf.end_state = r.end_state;
    buf.bootstrap_values = bootstrap_values(agent, &buf.next_observations, buf.obs_shape, &buf.end_state)?;
    let bootstrap = buf.bootstrap_values.clone();
    let cfg = &agent.config;
    buf.recompute_gae(&r.values, &bootstrap, cfg.gamma, cfg.lambda);
    Ok(())
}
