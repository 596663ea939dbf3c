use alloc::boxed::Box;
use alloc::collections::VecDeque;
use alloc::vec::Vec;

use super::{BoxEnv, Env, EnvSnapshot, EnvStep, Observation};
use crate::error::{Error, Result};
use crate::numerics::Rng;

const STICKY_STREAM: u64 = 0x5717;

fn inner_snapshot(env: &BoxEnv) -> Option<Box<EnvSnapshot>> {
    env.snapshot().map(Box::new)
}

/// Concatenates the last `n` observations along the channel axis, oldest first.
/// After a reset the first frame fills every slot.
pub struct FrameStack {
    inner: BoxEnv,
    n: usize,
    frames: VecDeque<Vec<u8>>,
}

impl FrameStack {
    pub fn new(inner: BoxEnv, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("frame stack depth must be positive".into()));
        }
        Ok(Self {
            inner,
            n,
            frames: VecDeque::new(),
        })
    }

    fn stacked(&self) -> Observation {
        let [c, h, w] = self.inner.observation_shape();
        let mut pixels = Vec::with_capacity(self.n * c * h * w);
        for f in &self.frames {
            pixels.extend_from_slice(f);
        }
        Observation {
            shape: [self.n * c, h, w],
            pixels,
        }
    }
}

impl Env for FrameStack {
    fn action_count(&self) -> usize {
        self.inner.action_count()
    }

    fn observation_shape(&self) -> [usize; 3] {
        let [c, h, w] = self.inner.observation_shape();
        [self.n * c, h, w]
    }

    fn reset(&mut self, seed: u64) -> Result<Observation> {
        let obs = self.inner.reset(seed)?;
        self.frames.clear();
        for _ in 0..self.n {
            self.frames.push_back(obs.pixels.clone());
        }
        Ok(self.stacked())
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        let mut step = self.inner.step(action)?;
        self.frames.pop_front();
        self.frames.push_back(core::mem::take(&mut step.observation.pixels));
        step.observation = self.stacked();
        Ok(step)
    }

    fn is_stacked(&self) -> bool {
        true
    }

    fn snapshot(&self) -> Option<EnvSnapshot> {
        Some(EnvSnapshot::FrameStack {
            frames: self.frames.iter().cloned().collect(),
            inner: inner_snapshot(&self.inner)?,
        })
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        match snapshot {
            EnvSnapshot::FrameStack { frames, inner } => {
                self.inner.restore(inner)?;
                self.frames = frames.iter().cloned().collect();
                Ok(())
            }
            _ => Err(Error::Config("snapshot is not a frame stack".into())),
        }
    }
}

/// With probability `p` the previous executed action is repeated instead of the
/// chosen one. The first step after a reset always executes the chosen action.
/// The repeat coin is seeded from the reset seed.
pub struct StickyActions {
    inner: BoxEnv,
    p: f64,
    rng: Rng,
    previous: Option<usize>,
}

impl StickyActions {
    pub fn new(inner: BoxEnv, p: f64) -> Result<Self> {
        if inner.is_stacked() {
            return Err(Error::Config(
                "sticky actions must be applied before frame stacking".into(),
            ));
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(alloc::format!("sticky probability {p} outside [0, 1)")));
        }
        Ok(Self {
            inner,
            p,
            rng: Rng::with_stream(0, STICKY_STREAM),
            previous: None,
        })
    }
}

impl Env for StickyActions {
    fn action_count(&self) -> usize {
        self.inner.action_count()
    }

    fn observation_shape(&self) -> [usize; 3] {
        self.inner.observation_shape()
    }

    fn reset(&mut self, seed: u64) -> Result<Observation> {
        self.rng = Rng::with_stream(seed, STICKY_STREAM);
        self.previous = None;
        self.inner.reset(seed)
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        let repeat = self.rng.bernoulli(self.p);
        let (executed, repeated) = match self.previous {
            Some(prev) if repeat => (prev, true),
            _ => (action, false),
        };
        let mut step = self.inner.step(executed)?;
        self.previous = Some(executed);
        step.info.insert("repeated".into(), if repeated { 1.0 } else { 0.0 });
        step.info.insert("executed_action".into(), executed as f64);
        Ok(step)
    }

    fn is_stacked(&self) -> bool {
        self.inner.is_stacked()
    }

    fn snapshot(&self) -> Option<EnvSnapshot> {
        Some(EnvSnapshot::Sticky {
            rng: self.rng.state(),
            previous: self.previous,
            inner: inner_snapshot(&self.inner)?,
        })
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        match snapshot {
            EnvSnapshot::Sticky { rng, previous, inner } => {
                self.inner.restore(inner)?;
                self.rng = Rng::from_state(*rng);
                self.previous = *previous;
                Ok(())
            }
            _ => Err(Error::Config("snapshot is not a sticky-action state".into())),
        }
    }
}

/// Replaces each reward by its sign.
pub struct SignReward {
    inner: BoxEnv,
}

impl SignReward {
    pub fn new(inner: BoxEnv) -> Self {
        Self { inner }
    }
}

impl Env for SignReward {
    fn action_count(&self) -> usize {
        self.inner.action_count()
    }

    fn observation_shape(&self) -> [usize; 3] {
        self.inner.observation_shape()
    }

    fn reset(&mut self, seed: u64) -> Result<Observation> {
        self.inner.reset(seed)
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        let mut step = self.inner.step(action)?;
        step.info.insert("raw_reward".into(), step.reward);
        step.reward = if step.reward > 0.0 {
            1.0
        } else if step.reward < 0.0 {
            -1.0
        } else {
            0.0
        };
        Ok(step)
    }

    fn is_stacked(&self) -> bool {
        self.inner.is_stacked()
    }

    fn snapshot(&self) -> Option<EnvSnapshot> {
        Some(EnvSnapshot::SignReward {
            inner: inner_snapshot(&self.inner)?,
        })
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        match snapshot {
            EnvSnapshot::SignReward { inner } => self.inner.restore(inner),
            _ => Err(Error::Config("snapshot is not a sign-reward state".into())),
        }
    }
}
