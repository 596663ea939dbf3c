use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{BoxEnv, EnvSnapshot, EnvStep, Observation};
use crate::error::{Error, Result};
use crate::numerics::{Rng, RngState};

const EPISODE_SEED_STREAM: u64 = 0xE500;

/// `N` independent copies stepped in lockstep. A terminal copy is reset at once:
/// its returned step carries the terminal reward and flag, and the observation
/// of the freshly reset episode.
pub struct VecEnv {
    envs: Vec<BoxEnv>,
    seeders: Vec<Rng>,
    steps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VecEnvState {
    pub envs: Vec<EnvSnapshot>,
    pub seeders: Vec<RngState>,
    pub steps: Vec<usize>,
}

impl VecEnv {
    /// Episode seeds for copy `i` come from stream `i` of `seed`.
    pub fn new(envs: Vec<BoxEnv>, seed: u64) -> Result<Self> {
        let first = envs
            .first()
            .ok_or_else(|| Error::Config("a vectorized environment needs at least one copy".into()))?;
        let (a, shape) = (first.action_count(), first.observation_shape());
        if envs.iter().any(|e| e.action_count() != a || e.observation_shape() != shape) {
            return Err(Error::Config("environment copies disagree on action count or frame shape".into()));
        }
        let seeders = (0..envs.len())
            .map(|i| Rng::with_stream(seed, EPISODE_SEED_STREAM + i as u64))
            .collect();
        let steps = alloc::vec![0; envs.len()];
        Ok(Self { envs, seeders, steps })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn action_count(&self) -> usize {
        self.envs[0].action_count()
    }

    pub fn observation_shape(&self) -> [usize; 3] {
        self.envs[0].observation_shape()
    }

    fn tag(i: usize, e: Error) -> Error {
        match e {
            Error::Env { step, message, .. } => Error::Env { env: i, step, message },
            other => other,
        }
    }

    pub fn reset_all(&mut self) -> Result<Vec<Observation>> {
        let mut out = Vec::with_capacity(self.envs.len());
        for (i, env) in self.envs.iter_mut().enumerate() {
            let seed = self.seeders[i].next_u64();
            self.steps[i] = 0;
            out.push(env.reset(seed).map_err(|e| Self::tag(i, e))?);
        }
        Ok(out)
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<Vec<EnvStep>> {
        if actions.len() != self.envs.len() {
            return Err(Error::dim("vec_env.step", &[self.envs.len()], &[actions.len()]));
        }
        let mut out = Vec::with_capacity(self.envs.len());
        for (i, (env, &a)) in self.envs.iter_mut().zip(actions).enumerate() {
            let mut step = env.step(a).map_err(|e| Self::tag(i, e))?;
            self.steps[i] += 1;
            if step.terminal {
                let seed = self.seeders[i].next_u64();
                step.observation = env.reset(seed).map_err(|e| Self::tag(i, e))?;
                self.steps[i] = 0;
            }
            out.push(step);
        }
        Ok(out)
    }

    /// `None` when any copy cannot be snapshotted.
    pub fn state(&self) -> Option<VecEnvState> {
        let envs = self.envs.iter().map(|e| e.snapshot()).collect::<Option<Vec<_>>>()?;
        Some(VecEnvState {
            envs,
            seeders: self.seeders.iter().map(Rng::state).collect(),
            steps: self.steps.clone(),
        })
    }

    pub fn restore(&mut self, state: &VecEnvState) -> Result<()> {
        if state.envs.len() != self.envs.len() {
            return Err(Error::dim("vec_env.restore", &[self.envs.len()], &[state.envs.len()]));
        }
        for (env, snap) in self.envs.iter_mut().zip(&state.envs) {
            env.restore(snap)?;
        }
        self.seeders = state.seeders.iter().map(|&s| Rng::from_state(s)).collect();
        self.steps = state.steps.clone();
        Ok(())
    }
}
