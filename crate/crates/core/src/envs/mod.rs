//! Toy pixel environments, wrappers and a vectorized set.
//!
//! Every built-in environment is a pure state machine: the reset seed and the
//! action sequence determine every [`EnvStep`]. Wrappers compose in one
//! canonical order, `frame_stack(sign_reward(sticky(env)))`; a sticky-action
//! wrapper refuses to wrap a stacked environment.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod pixel_catch;
pub mod preprocess;
mod tmaze;
mod vec_env;
mod wrappers;

pub use pixel_catch::{PixelCatch, PixelCatchState};
pub use tmaze::{TMaze, TMazeState};
pub use vec_env::{VecEnv, VecEnvState};
pub use wrappers::{FrameStack, SignReward, StickyActions};

/// An 8-bit image in `(channels, height, width)` layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub shape: [usize; 3],
    pub pixels: Vec<u8>,
}

impl Observation {
    pub fn new(shape: [usize; 3], pixels: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != pixels.len() {
            return Err(Error::dim("observation", &shape, &[pixels.len()]));
        }
        Ok(Self { shape, pixels })
    }

    pub fn blank(shape: [usize; 3]) -> Self {
        Self {
            shape,
            pixels: alloc::vec![0; shape.iter().product()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub observation: Observation,
    pub reward: f64,
    pub terminal: bool,
    pub info: BTreeMap<String, f64>,
}

/// Exact state of an environment stack, for checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnvSnapshot {
    PixelCatch(PixelCatchState),
    TMaze(TMazeState),
    FrameStack {
        frames: Vec<Vec<u8>>,
        inner: Box<EnvSnapshot>,
    },
    Sticky {
        rng: crate::numerics::RngState,
        previous: Option<usize>,
        inner: Box<EnvSnapshot>,
    },
    SignReward {
        inner: Box<EnvSnapshot>,
    },
}

pub trait Env {
    fn action_count(&self) -> usize;

    fn observation_shape(&self) -> [usize; 3];

    fn reset(&mut self, seed: u64) -> Result<Observation>;

    /// One transition. After a terminal step the next call must be `reset`.
    fn step(&mut self, action: usize) -> Result<EnvStep>;

    /// True when a frame-stacking wrapper is part of this stack.
    fn is_stacked(&self) -> bool {
        false
    }

    fn snapshot(&self) -> Option<EnvSnapshot> {
        None
    }

    fn restore(&mut self, _snapshot: &EnvSnapshot) -> Result<()> {
        Err(Error::Config("environment does not support snapshots".into()))
    }
}

impl<E: Env + ?Sized> Env for Box<E> {
    fn action_count(&self) -> usize {
        (**self).action_count()
    }
    fn observation_shape(&self) -> [usize; 3] {
        (**self).observation_shape()
    }
    fn reset(&mut self, seed: u64) -> Result<Observation> {
        (**self).reset(seed)
    }
    fn step(&mut self, action: usize) -> Result<EnvStep> {
        (**self).step(action)
    }
    fn is_stacked(&self) -> bool {
        (**self).is_stacked()
    }
    fn snapshot(&self) -> Option<EnvSnapshot> {
        (**self).snapshot()
    }
    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        (**self).restore(snapshot)
    }
}

pub type BoxEnv = Box<dyn Env + Send>;

fn env_err(step: usize, message: impl Into<String>) -> Error {
    Error::Env {
        env: 0,
        step,
        message: message.into(),
    }
}

fn check_action(action: usize, count: usize, step: usize) -> Result<()> {
    if action >= count {
        return Err(env_err(
            step,
            alloc::format!("action {action} outside 0..{count}"),
        ));
    }
    Ok(())
}

/// Built-in environment selection plus wrapper parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: BuiltinEnv,
    pub frame_stack: usize,
    pub sticky_p: f64,
    pub sign_rewards: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BuiltinEnv {
    PixelCatch {
        size: usize,
        pellets: usize,
    },
    TMaze {
        length: usize,
    },
}

impl EnvSpec {
    /// Builds one wrapped environment in the canonical order.
    pub fn build(&self) -> Result<BoxEnv> {
        let base: BoxEnv = match self.kind {
            BuiltinEnv::PixelCatch { size, pellets } => Box::new(PixelCatch::new(size, pellets)?),
            BuiltinEnv::TMaze { length } => Box::new(TMaze::new(length)?),
        };
        wrap(base, self.frame_stack, self.sticky_p, self.sign_rewards)
    }
}

/// Applies sticky actions, reward sign clipping and frame stacking, innermost first.
pub fn wrap(base: BoxEnv, frame_stack: usize, sticky_p: f64, sign_rewards: bool) -> Result<BoxEnv> {
    let mut env = base;
    if sticky_p > 0.0 {
        env = Box::new(StickyActions::new(env, sticky_p)?);
    }
    if sign_rewards {
        env = Box::new(SignReward::new(env));
    }
    if frame_stack > 1 {
        env = Box::new(FrameStack::new(env, frame_stack)?);
    } else if frame_stack == 0 {
        return Err(Error::Config("frame_stack must be at least 1".into()));
    }
    Ok(env)
}
