use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{check_action, env_err, wrap, Env, EnvSnapshot, EnvStep, Observation};
use crate::error::{Error, Result};
use crate::numerics::Rng;

const SIZE: usize = 16;
const ROW: usize = 7;

/// Memory T-maze on a 16×16 frame.
///
/// The agent starts at the left end of a corridor of length `L`. At step 0 a
/// cue pixel appears in the top-left (up) or bottom-left (down) corner and is
/// never shown again. While in the corridor any action advances one cell. At
/// the junction the action picks an arm: 0 up, 1 down. The matching arm pays
/// +1, the other −1, and the episode ends after `L + 1` steps.
#[derive(Clone, Debug)]
pub struct TMaze {
    length: usize,
    state: TMazeState,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TMazeState {
    /// 0 up, 1 down.
    pub cue: usize,
    pub position: usize,
    pub steps: usize,
    pub done: bool,
}

impl TMaze {
    pub fn new(length: usize) -> Result<Self> {
        if length == 0 || length + 2 > SIZE {
            return Err(Error::Config(alloc::format!(
                "t-maze length must be in 1..={}, got {length}",
                SIZE - 2
            )));
        }
        Ok(Self {
            length,
            state: TMazeState {
                cue: 0,
                position: 0,
                steps: 0,
                done: true,
            },
        })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn state(&self) -> &TMazeState {
        &self.state
    }

    /// Starts an episode with a chosen cue instead of a seeded one.
    pub fn reset_with_cue(&mut self, cue: usize) -> Observation {
        self.state = TMazeState {
            cue: cue.min(1),
            position: 0,
            steps: 0,
            done: false,
        };
        self.render()
    }

    fn render(&self) -> Observation {
        let mut pixels = vec![0u8; SIZE * SIZE];
        let junction = 1 + self.length;
        for x in 1..=junction {
            pixels[ROW * SIZE + x] = 64;
        }
        pixels[(ROW - 1) * SIZE + junction] = 64;
        pixels[(ROW + 1) * SIZE + junction] = 64;
        pixels[ROW * SIZE + 1 + self.state.position] = 255;
        if self.state.steps == 0 {
            let y = if self.state.cue == 0 { 0 } else { SIZE - 1 };
            pixels[y * SIZE] = 255;
        }
        Observation {
            shape: [1, SIZE, SIZE],
            pixels,
        }
    }

    /// Best expected return over memoryless policies acting on `frame_stack`
    /// stacked frames, by enumerating every deterministic mapping from the
    /// distinct junction observations to arms. Stochastic memoryless policies
    /// are mixtures of these, so they cannot do better.
    pub fn memoryless_optimum(length: usize, frame_stack: usize) -> Result<f64> {
        let mut junction_obs: Vec<Vec<u8>> = Vec::new();
        for cue in 0..2 {
            let seed = (0u64..).find(|&s| Self::cue_for_seed(s) == cue).unwrap();
            let mut env = wrap(alloc::boxed::Box::new(TMaze::new(length)?), frame_stack, 0.0, false)?;
            env.reset(seed)?;
            let mut last = Vec::new();
            for _ in 0..length {
                last = env.step(0)?.observation.pixels;
            }
            junction_obs.push(last);
        }
        let distinct: Vec<&Vec<u8>> = {
            let mut d: Vec<&Vec<u8>> = Vec::new();
            for o in &junction_obs {
                if !d.contains(&o) {
                    d.push(o);
                }
            }
            d
        };
        let mut best = f64::NEG_INFINITY;
        for policy in 0u64..(1u64 << distinct.len()) {
            let mut expected = 0.0;
            for (cue, obs) in junction_obs.iter().enumerate() {
                let idx = distinct.iter().position(|o| *o == obs).unwrap();
                let arm = ((policy >> idx) & 1) as usize;
                expected += 0.5 * if arm == cue { 1.0 } else { -1.0 };
            }
            best = best.max(expected);
        }
        Ok(best)
    }

    /// Cue drawn by `reset(seed)`.
    pub fn cue_for_seed(seed: u64) -> usize {
        Rng::new(seed).below(2) as usize
    }
}

impl Env for TMaze {
    fn action_count(&self) -> usize {
        2
    }

    fn observation_shape(&self) -> [usize; 3] {
        [1, SIZE, SIZE]
    }

    fn reset(&mut self, seed: u64) -> Result<Observation> {
        Ok(self.reset_with_cue(Self::cue_for_seed(seed)))
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.state.done {
            return Err(env_err(self.state.steps, "step called on a finished episode"));
        }
        check_action(action, 2, self.state.steps)?;
        self.state.steps += 1;
        let mut info = BTreeMap::new();
        let mut reward = 0.0;
        if self.state.position < self.length {
            self.state.position += 1;
        } else {
            let correct = action == self.state.cue;
            reward = if correct { 1.0 } else { -1.0 };
            info.insert("correct".into(), if correct { 1.0 } else { 0.0 });
            self.state.done = true;
        }
        Ok(EnvStep {
            observation: self.render(),
            reward,
            terminal: self.state.done,
            info,
        })
    }

    fn snapshot(&self) -> Option<EnvSnapshot> {
        Some(EnvSnapshot::TMaze(self.state.clone()))
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        match snapshot {
            EnvSnapshot::TMaze(s) => {
                self.state = s.clone();
                Ok(())
            }
            _ => Err(Error::Config("snapshot is not a t-maze state".into())),
        }
    }
}
