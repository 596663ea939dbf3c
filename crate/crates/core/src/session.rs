//! A training run: collect a batch, train on it, repeat.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig};
use crate::envs::{EnvSpec, Observation, VecEnv, VecEnvState};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Rng, RngState, Tensor};
use crate::rollout::{collect, CollectorState, EpisodeRecord, RolloutBuffer};
use crate::trainer::{lr_schedule, train_on_batch, LossBreakdown, TrainerState, UpdateMetrics};
use crate::world_model::RecurrentState;

/// Episode scores of a run and their rolling statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTracker {
    pub scores: Vec<f64>,
}

impl EpisodeTracker {
    pub const WINDOW: usize = 100;

    fn window(&self) -> &[f64] {
        &self.scores[self.scores.len().saturating_sub(Self::WINDOW)..]
    }

    /// Mean of the last 100 episode scores; `None` before the first episode ends.
    pub fn rolling_mean(&self) -> Option<f64> {
        let w = self.window();
        (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64)
    }

    /// Standard error of [`Self::rolling_mean`] (sample standard deviation / √n).
    pub fn rolling_stderr(&self) -> Option<f64> {
        let w = self.window();
        if w.len() < 2 {
            return None;
        }
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        Some(libm::sqrt(var / n))
    }
}

/// What one batch produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub batch: u64,
    /// Environment frames seen after this batch.
    pub frames: u64,
    pub episode_scores: Vec<f64>,
    pub episode_lengths: Vec<usize>,
    pub rolling_mean: Option<f64>,
    pub rolling_stderr: Option<f64>,
    pub lr: f64,
    /// Mean over the batch's updates.
    pub losses: LossBreakdown,
    pub policy_entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub updates: Vec<UpdateMetrics>,
}

fn summarize(batch: u64, frames: u64, episodes: &[EpisodeRecord], tracker: &EpisodeTracker, lr: f64, updates: Vec<UpdateMetrics>) -> BatchReport {
    let n = updates.len().max(1) as f64;
    let mean = |f: &dyn Fn(&UpdateMetrics) -> f64| updates.iter().map(f).sum::<f64>() / n;
    let losses = LossBreakdown {
        actor: mean(&|u| u.losses.actor),
        critic: mean(&|u| u.losses.critic),
        prediction: mean(&|u| u.losses.prediction),
        entropy: mean(&|u| u.losses.entropy),
        l1: mean(&|u| u.losses.l1),
        total: mean(&|u| u.losses.total),
    };
    BatchReport {
        batch,
        frames,
        episode_scores: episodes.iter().map(|e| e.score).collect(),
        episode_lengths: episodes.iter().map(|e| e.length).collect(),
        rolling_mean: tracker.rolling_mean(),
        rolling_stderr: tracker.rolling_stderr(),
        lr,
        losses,
        policy_entropy: mean(&|u| u.policy_entropy),
        mean_ratio: mean(&|u| u.mean_ratio),
        clip_fraction: mean(&|u| u.clip_fraction),
        updates,
    }
}

pub struct Session<T> {
    pub agent: Agent<T>,
    pub trainer: TrainerState<T>,
    pub envs: VecEnv,
    pub carry: CollectorState<T>,
    pub rng: Rng,
    /// Batches completed.
    pub batch: u64,
    pub tracker: EpisodeTracker,
    /// The last collected batch, kept for inspection.
    pub last_buffer: Option<RolloutBuffer<T>>,
}

impl<T: Real> Session<T> {
    /// A fresh run: parameters, acting randomness and episode seeds all derive
    /// from `seed`.
    pub fn new(config: AgentConfig, env: &EnvSpec, seed: u64) -> Result<Self> {
        let envs = (0..config.num_envs).map(|_| env.build()).collect::<Result<Vec<_>>>()?;
        Self::with_envs(config, VecEnv::new(envs, seed)?, seed)
    }

    pub fn with_envs(config: AgentConfig, mut envs: VecEnv, seed: u64) -> Result<Self> {
        if envs.len() != config.num_envs {
            return Err(Error::Config(alloc::format!(
                "{} environments given for num_envs = {}",
                envs.len(),
                config.num_envs
            )));
        }
        let mut config = config;
        let shape = envs.observation_shape();
        if config.encoder.input_shape != shape {
            return Err(Error::Config(alloc::format!(
                "encoder expects frames {:?} but the environment produces {:?}",
                config.encoder.input_shape,
                shape
            )));
        }
        config.encoder.input_shape = shape;
        let agent = Agent::new(config, envs.action_count(), seed)?;
        let carry = CollectorState::start(&agent, &mut envs)?;
        let trainer = TrainerState::new(&agent);
        Ok(Self {
            agent,
            trainer,
            envs,
            carry,
            rng: Agent::<T>::acting_rng(seed),
            batch: 0,
            tracker: EpisodeTracker::default(),
            last_buffer: None,
        })
    }

    /// Collects one batch and trains on it.
    pub fn run_batch(&mut self) -> Result<BatchReport> {
        let (mut buf, episodes) = collect(&self.agent, &mut self.envs, &mut self.carry, &mut self.rng, self.trainer.updates)?;
        let updates = train_on_batch(&mut self.agent, &mut self.trainer, &mut buf, self.batch)?;
        self.carry.state = buf.end_state.clone();
        self.tracker.scores.extend(episodes.iter().map(|e| e.score));
        let lr = lr_schedule(self.batch, self.agent.config.lr_decay, self.agent.config.lr);
        let report = summarize(self.batch, self.carry.frames, &episodes, &self.tracker, lr, updates);
        self.batch += 1;
        self.last_buffer = Some(buf);
        Ok(report)
    }

    /// Everything needed to continue this run bit-for-bit. Environments that
    /// cannot report their state are left out and restart on restore.
    pub fn snapshot(&self) -> Result<SessionSnapshot> {
        let envs = self.envs.state();
        Ok(SessionSnapshot {
            batch: self.batch,
            updates: self.trainer.updates,
            adam_steps: self.trainer.adam.steps,
            params: named_arrays(&self.agent.params),
            adam_m: arrays_like(&self.agent.params, &self.trainer.adam.m),
            adam_v: arrays_like(&self.agent.params, &self.trainer.adam.v),
            anchor: self.trainer.anchor.as_ref().map(named_arrays),
            state: state_arrays(&self.carry.state),
            observations: self.carry.observations.clone(),
            episode_scores: self.carry.episode_scores.clone(),
            episode_lengths: self.carry.episode_lengths.clone(),
            frames: self.carry.frames,
            rng: self.rng.state(),
            envs,
            finished_scores: self.tracker.scores.clone(),
        })
    }

    /// Overwrites this session's state with a snapshot taken from a run with the
    /// same configuration.
    pub fn restore(&mut self, s: &SessionSnapshot) -> Result<()> {
        load_arrays(&mut self.agent.params, &s.params)?;
        let mut m = ParamStore::<T>::new();
        let mut v = ParamStore::<T>::new();
        for (store, arrays) in [(&mut m, &s.adam_m), (&mut v, &s.adam_v)] {
            for a in arrays {
                store.add(&a.name, &a.shape, a.values.iter().map(|&x| T::of(x)).collect())?;
            }
        }
        if m.len() != self.agent.params.len() || v.len() != self.agent.params.len() {
            return Err(Error::Config("optimizer state does not match the parameter layout".into()));
        }
        self.trainer.adam.m = m.iter().map(|(_, _, a)| a.values.clone()).collect();
        self.trainer.adam.v = v.iter().map(|(_, _, a)| a.values.clone()).collect();
        self.trainer.adam.steps = s.adam_steps;
        self.trainer.updates = s.updates;
        self.trainer.anchor = match &s.anchor {
            Some(a) => {
                let mut p = self.agent.params.clone();
                load_arrays(&mut p, a)?;
                Some(p)
            }
            None => None,
        };
        self.carry.state = load_state(&s.state)?;
        self.carry.observations = s.observations.clone();
        self.carry.episode_scores = s.episode_scores.clone();
        self.carry.episode_lengths = s.episode_lengths.clone();
        self.carry.frames = s.frames;
        self.rng = Rng::from_state(s.rng);
        match &s.envs {
            Some(e) => self.envs.restore(e)?,
            None => {
                self.carry.observations = self.envs.reset_all()?;
                self.carry.state = self.agent.zero_state(self.envs.len());
                self.carry.episode_scores.iter_mut().for_each(|x| *x = 0.0);
                self.carry.episode_lengths.iter_mut().for_each(|x| *x = 0);
            }
        }
        self.batch = s.batch;
        self.tracker.scores = s.finished_scores.clone();
        self.last_buffer = None;
        Ok(())
    }
}

/// A named array of values widened to `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: alloc::string::String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Complete resumable state of a [`Session`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub batch: u64,
    pub updates: u64,
    pub adam_steps: u64,
    pub params: Vec<NamedArray>,
    pub adam_m: Vec<NamedArray>,
    pub adam_v: Vec<NamedArray>,
    pub anchor: Option<Vec<NamedArray>>,
    /// `h`, `c_h`, `p`, `c_p` in that order.
    pub state: Vec<NamedArray>,
    pub observations: Vec<Observation>,
    pub episode_scores: Vec<f64>,
    pub episode_lengths: Vec<usize>,
    pub frames: u64,
    pub rng: RngState,
    /// `None` when the environments cannot be snapshotted.
    pub envs: Option<VecEnvState>,
    pub finished_scores: Vec<f64>,
}

pub fn named_arrays<T: Real>(store: &ParamStore<T>) -> Vec<NamedArray> {
    store
        .iter()
        .map(|(_, name, a)| NamedArray {
            name: name.into(),
            shape: a.shape.clone(),
            values: a.values.iter().map(|x| x.as_f64()).collect(),
        })
        .collect()
}

fn arrays_like<T: Real>(store: &ParamStore<T>, data: &[Vec<T>]) -> Vec<NamedArray> {
    store
        .iter()
        .zip(data)
        .map(|((_, name, a), d)| NamedArray {
            name: name.into(),
            shape: a.shape.clone(),
            values: d.iter().map(|x| x.as_f64()).collect(),
        })
        .collect()
}

/// Loads values by name; every parameter of `store` must be present.
pub fn load_arrays<T: Real>(store: &mut ParamStore<T>, arrays: &[NamedArray]) -> Result<()> {
    if arrays.len() != store.len() {
        return Err(Error::Config(alloc::format!(
            "checkpoint has {} parameter arrays, model has {}",
            arrays.len(),
            store.len()
        )));
    }
    for a in arrays {
        store.set_values(&a.name, &a.shape, &a.values)?;
    }
    Ok(())
}

fn state_arrays<T: Real>(s: &RecurrentState<T>) -> Vec<NamedArray> {
    [("h", &s.h), ("c_h", &s.c_h), ("p", &s.p), ("c_p", &s.c_p)]
        .into_iter()
        .map(|(n, t)| NamedArray {
            name: n.into(),
            shape: t.shape().to_vec(),
            values: t.to_f64_vec(),
        })
        .collect()
}

fn load_state<T: Real>(arrays: &[NamedArray]) -> Result<RecurrentState<T>> {
    let get = |name: &str| -> Result<Tensor<T>> {
        let a = arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Config(alloc::format!("checkpoint lacks recurrent state `{name}`")))?;
        Tensor::from_f64(&a.shape, &a.values)
    };
    Ok(RecurrentState {
        h: get("h")?,
        c_h: get("c_h")?,
        p: get("p")?,
        c_p: get("c_p")?,
    })
}
