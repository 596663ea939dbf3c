#![allow(dead_code)]

use std::collections::BTreeMap;

use p4o_core::envs::{BoxEnv, Env, EnvStep, Observation, VecEnv};
use p4o_core::{AgentConfig, Result};

pub const SHAPE: [usize; 3] = [4, 16, 16];

/// Deterministic stand-in environment: frames are a function of `(id, step)`,
/// every step pays `reward`, and episodes last `period` steps (0 = forever).
pub struct Stub {
    pub id: u8,
    pub reward: f64,
    pub period: usize,
    step: usize,
}

impl Stub {
    pub fn new(id: u8, reward: f64, period: usize) -> Self {
        Self { id, reward, period, step: 0 }
    }

    fn frame(&self) -> Observation {
        let pixels = (0..SHAPE.iter().product::<usize>())
            .map(|i| ((i * 7 + self.step * 31 + self.id as usize * 53) % 256) as u8)
            .collect();
        Observation::new(SHAPE, pixels).unwrap()
    }
}

impl Env for Stub {
    fn action_count(&self) -> usize {
        3
    }

    fn observation_shape(&self) -> [usize; 3] {
        SHAPE
    }

    fn reset(&mut self, _seed: u64) -> Result<Observation> {
        self.step = 0;
        Ok(self.frame())
    }

    fn step(&mut self, _action: usize) -> Result<EnvStep> {
        self.step += 1;
        Ok(EnvStep {
            observation: self.frame(),
            reward: self.reward,
            terminal: self.period > 0 && self.step % self.period == 0,
            info: BTreeMap::new(),
        })
    }
}

pub fn stubs(n: usize, period: usize) -> VecEnv {
    let envs: Vec<BoxEnv> = (0..n).map(|i| Box::new(Stub::new(i as u8, 1.0 + i as f64, period)) as BoxEnv).collect();
    VecEnv::new(envs, 0).unwrap()
}

/// Toy agent sized for fast tests.
pub fn small_config(num_envs: usize, batch_steps: usize, minibatches: usize) -> AgentConfig {
    let mut cfg = AgentConfig::toy();
    cfg.num_envs = num_envs;
    cfg.batch_steps = batch_steps;
    cfg.minibatches = minibatches;
    cfg
}
