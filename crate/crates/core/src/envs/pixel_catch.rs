use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{check_action, env_err, Env, EnvSnapshot, EnvStep, Observation};
use crate::error::{Error, Result};
use crate::numerics::{Rng, RngState};

const PADDLE_WIDTH: usize = 3;

/// Catch falling pellets with a paddle on the bottom row.
///
/// One pellet falls at a time, one row per step, drifting sideways by its
/// horizontal velocity (−1, 0 or +1) and bouncing off the side walls. When it
/// reaches the paddle row it is caught (+1) if it lands under the 3-pixel
/// paddle and missed (−1) otherwise, and a new pellet spawns on the top row.
/// The episode ends after `pellets` pellets. Actions: 0 left, 1 stay, 2 right.
#[derive(Clone, Debug)]
pub struct PixelCatch {
    size: usize,
    pellets: usize,
    state: PixelCatchState,
    rng: Rng,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCatchState {
    pub paddle_x: usize,
    pub pellet_y: usize,
    pub pellet_x: usize,
    pub pellet_vx: i8,
    pub resolved: usize,
    pub steps: usize,
    pub done: bool,
    pub rng: Option<RngState>,
}

impl PixelCatch {
    pub fn new(size: usize, pellets: usize) -> Result<Self> {
        if size < 4 || pellets == 0 {
            return Err(Error::Config(alloc::format!(
                "pixel catch needs size >= 4 and at least one pellet, got {size} and {pellets}"
            )));
        }
        Ok(Self {
            size,
            pellets,
            state: PixelCatchState {
                paddle_x: size / 2,
                pellet_y: 0,
                pellet_x: 0,
                pellet_vx: 0,
                resolved: 0,
                steps: 0,
                done: true,
                rng: None,
            },
            rng: Rng::new(0),
        })
    }

    pub fn state(&self) -> &PixelCatchState {
        &self.state
    }

    fn spawn(&mut self) {
        self.state.pellet_y = 0;
        self.state.pellet_x = self.rng.below(self.size as u64) as usize;
        self.state.pellet_vx = self.rng.below(3) as i8 - 1;
    }

    fn render(&self) -> Observation {
        let s = self.size;
        let mut pixels = vec![0u8; s * s];
        let half = PADDLE_WIDTH / 2;
        let lo = self.state.paddle_x.saturating_sub(half);
        let hi = (self.state.paddle_x + half).min(s - 1);
        for x in lo..=hi {
            pixels[(s - 1) * s + x] = 255;
        }
        pixels[self.state.pellet_y * s + self.state.pellet_x] = 255;
        Observation {
            shape: [1, s, s],
            pixels,
        }
    }

    /// Best achievable return of the episode started by `reset(seed)`, found by
    /// breadth-first search over every action sequence with duplicate states
    /// merged.
    pub fn oracle_return(size: usize, pellets: usize, seed: u64) -> Result<f64> {
        let mut start = Self::new(size, pellets)?;
        start.reset(seed)?;
        let mut frontier: Vec<(PixelCatch, f64)> = vec![(start, 0.0)];
        let mut best = f64::NEG_INFINITY;
        while !frontier.is_empty() {
            let mut next: Vec<(PixelCatch, f64)> = Vec::new();
            for (env, ret) in &frontier {
                for a in 0..3 {
                    let mut e = env.clone();
                    let step = e.step(a)?;
                    let r = ret + step.reward;
                    if step.terminal {
                        best = best.max(r);
                        continue;
                    }
                    let snap = e.snapshot_state();
                    match next.iter_mut().find(|(o, _)| o.snapshot_state() == snap) {
                        Some((_, existing)) => *existing = existing.max(r),
                        None => next.push((e, r)),
                    }
                }
            }
            frontier = next;
        }
        Ok(best)
    }

    fn snapshot_state(&self) -> PixelCatchState {
        let mut s = self.state.clone();
        s.rng = Some(self.rng.state());
        s
    }
}

impl Env for PixelCatch {
    fn action_count(&self) -> usize {
        3
    }

    fn observation_shape(&self) -> [usize; 3] {
        [1, self.size, self.size]
    }

    fn reset(&mut self, seed: u64) -> Result<Observation> {
        self.rng = Rng::new(seed);
        self.state = PixelCatchState {
            paddle_x: self.size / 2,
            pellet_y: 0,
            pellet_x: 0,
            pellet_vx: 0,
            resolved: 0,
            steps: 0,
            done: false,
            rng: None,
        };
        self.spawn();
        Ok(self.render())
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.state.done {
            return Err(env_err(self.state.steps, "step called on a finished episode"));
        }
        check_action(action, 3, self.state.steps)?;
        let s = self.size;
        let half = PADDLE_WIDTH / 2;
        let px = self.state.paddle_x as isize + action as isize - 1;
        self.state.paddle_x = px.clamp(half as isize, (s - 1 - half) as isize) as usize;

        let mut x = self.state.pellet_x as isize + self.state.pellet_vx as isize;
        if x < 0 || x >= s as isize {
            self.state.pellet_vx = -self.state.pellet_vx;
            x = x.clamp(0, s as isize - 1);
        }
        self.state.pellet_x = x as usize;
        self.state.pellet_y += 1;
        self.state.steps += 1;

        let mut reward = 0.0;
        let mut info = BTreeMap::new();
        if self.state.pellet_y == s - 1 {
            let caught = self.state.pellet_x.abs_diff(self.state.paddle_x) <= half;
            reward = if caught { 1.0 } else { -1.0 };
            info.insert("caught".into(), if caught { 1.0 } else { 0.0 });
            self.state.resolved += 1;
            if self.state.resolved == self.pellets {
                self.state.done = true;
            }
        }
        let observation = self.render();
        if self.state.pellet_y == s - 1 && !self.state.done {
            self.spawn();
        }
        Ok(EnvStep {
            observation,
            reward,
            terminal: self.state.done,
            info,
        })
    }

    fn snapshot(&self) -> Option<EnvSnapshot> {
        Some(EnvSnapshot::PixelCatch(self.snapshot_state()))
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        match snapshot {
            EnvSnapshot::PixelCatch(s) => {
                self.state = s.clone();
                self.rng = Rng::from_state(s.rng.ok_or_else(|| Error::Config("pixel catch snapshot without rng".into()))?);
                self.state.rng = None;
                Ok(())
            }
            _ => Err(Error::Config("snapshot is not a pixel catch state".into())),
        }
    }
}
