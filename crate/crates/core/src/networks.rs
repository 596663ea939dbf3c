//! Residual convolutional encoder and actor-critic heads.
//!
//! The encoder has four groups. Each group is a 3×3 convolution, a 2×2 max-pool
//! and two residual blocks of two convolutions each (20 convolutions in total),
//! followed by ReLU, flattening and a fully connected layer with `tanh`.
//! Residual blocks use pre-activation ordering:
//! `x + conv(relu(conv(relu(x))))`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::init;
use crate::numerics::{Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub latent_dim: usize,
    /// `(channels, height, width)` of the stacked input frames.
    pub input_shape: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: [24, 32, 64, 128],
            latent_dim: 512,
            input_shape: [4, 84, 84],
        }
    }
}

impl EncoderConfig {
    /// 16×16 inputs, channels `[4, 8, 8, 8]`, 32-dimensional latents.
    pub fn toy() -> Self {
        Self {
            channels: [4, 8, 8, 8],
            latent_dim: 32,
            input_shape: [4, 16, 16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.channels.contains(&0) || self.input_shape[0] == 0 {
            return Err(Error::Config(format!(
                "encoder sizes must be positive: {self:?}"
            )));
        }
        let [_, h, w] = self.input_shape;
        if h < 16 || w < 16 {
            return Err(Error::Config(format!(
                "encoder input {h}x{w} is smaller than 16x16"
            )));
        }
        Ok(())
    }

    /// Spatial size entering the group `i` convolution, then after each pool.
    pub fn spatial_path(&self) -> Vec<(usize, usize)> {
        let [_, mut h, mut w] = self.input_shape;
        let mut path = vec![(h, w)];
        for _ in 0..4 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            path.push((h, w));
        }
        path
    }

    pub fn flat_dim(&self) -> usize {
        let (h, w) = *self.spatial_path().last().unwrap();
        self.channels[3] * h * w
    }

    /// Scalar parameters: 20 convolutions with biases plus the output layer.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = self.input_shape[0];
        for &c in &self.channels {
            total += 9 * c_in * c + c;
            total += 4 * (9 * c * c + c);
            c_in = c;
        }
        total + self.flat_dim() * self.latent_dim + self.latent_dim
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvParams {
    k: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Group {
    conv: ConvParams,
    blocks: [[ConvParams; 2]; 2],
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    groups: Vec<Group>,
    fc_w: ParamId,
    fc_b: ParamId,
}

fn add_conv<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
) -> Result<ConvParams> {
    let fan_in = 9 * c_in;
    let k = init::fan_in_uniform(rng, c_out * fan_in, fan_in);
    let k = store.add(
        &format!("{name}.k"),
        &[c_out, c_in, 3, 3],
        k.into_iter().map(T::of).collect(),
    )?;
    let b = store.add(&format!("{name}.b"), &[c_out], vec![T::zero(); c_out])?;
    Ok(ConvParams { k, b })
}

/// `x + conv₂(relu(conv₁(relu(x))))`.
pub fn residual_block<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    first: (Var, Option<Var>),
    second: (Var, Option<Var>),
) -> Result<Var> {
    let y = g.relu(x);
    let y = g.conv3(y, first.0, first.1)?;
    let y = g.relu(y);
    let y = g.conv3(y, second.0, second.1)?;
    g.add(x, y)
}

impl Encoder {
    pub fn new<T: Real>(cfg: &EncoderConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut groups = Vec::with_capacity(4);
        let mut c_in = cfg.input_shape[0];
        for (gi, &c) in cfg.channels.iter().enumerate() {
            let conv = add_conv(store, rng, &format!("encoder.g{gi}.conv"), c_in, c)?;
            let mut blocks = [[conv; 2]; 2];
            for (bi, block) in blocks.iter_mut().enumerate() {
                for (ci, slot) in block.iter_mut().enumerate() {
                    *slot = add_conv(store, rng, &format!("encoder.g{gi}.res{bi}.conv{ci}"), c, c)?;
                }
            }
            groups.push(Group { conv, blocks });
            c_in = c;
        }
        let flat = cfg.flat_dim();
        let w = init::fan_in_uniform(rng, cfg.latent_dim * flat, flat);
        let fc_w = store.add(
            "encoder.fc.w",
            &[cfg.latent_dim, flat],
            w.into_iter().map(T::of).collect(),
        )?;
        let fc_b = store.add("encoder.fc.b", &[cfg.latent_dim], vec![T::zero(); cfg.latent_dim])?;
        Ok(Self {
            cfg: cfg.clone(),
            groups,
            fc_w,
            fc_b,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Encodes `[B, C, H, W]` frames (already scaled to `[0, 1]`) into `[B, p]`
    /// latents in `(−1, 1)`.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, frames: Var) -> Result<Var> {
        let shape = g.shape(frames).to_vec();
        let [c, h, w] = self.cfg.input_shape;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::dim("encode", &shape, &[0, c, h, w]));
        }
        let batch = shape[0];
        let mut x = frames;
        for group in &self.groups {
            let (k, b) = (g.param(group.conv.k), g.param(group.conv.b));
            x = g.conv3(x, k, Some(b))?;
            x = g.maxpool2(x)?;
            for block in &group.blocks {
                let first = (g.param(block[0].k), Some(g.param(block[0].b)));
                let second = (g.param(block[1].k), Some(g.param(block[1].b)));
                x = residual_block(g, x, first, second)?;
            }
        }
        let x = g.relu(x);
        let x = g.reshape(x, &[batch, self.cfg.flat_dim()])?;
        let (w, b) = (g.param(self.fc_w), g.param(self.fc_b));
        let x = g.linear(x, w, Some(b))?;
        let x = g.tanh(x);
        // A saturated tanh rounds to ±1, where its derivative is already zero.
        let edge = T::one() - T::epsilon() / T::of(2.0);
        Ok(g.clamp(x, -edge, edge))
    }
}

/// Scales `u8` pixels to `[0, 1]` and stacks them into `[B, C, H, W]`.
pub fn frames_tensor<T: Real>(pixels: &[&[u8]], shape: [usize; 3]) -> Result<Tensor<T>> {
    let per = shape.iter().product::<usize>();
    let mut data = Vec::with_capacity(per * pixels.len());
    let scale = T::of(1.0 / 255.0);
    for (i, p) in pixels.iter().enumerate() {
        if p.len() != per {
            return Err(Error::dim("frames_tensor", &shape, &[i, p.len()]));
        }
        data.extend(p.iter().map(|&v| T::of(v as f64) * scale));
    }
    Tensor::new(&[pixels.len(), shape[0], shape[1], shape[2]], data)
}

/// Actor and critic layers reading the same recurrent state.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    state_dim: usize,
    actions: usize,
    actor_w: ParamId,
    actor_b: ParamId,
    critic_w: ParamId,
    critic_b: ParamId,
}

/// Graph handles for one batch of head outputs.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[B, A]`
    pub logits: Var,
    /// `[B]`
    pub value: Var,
}

/// Action distribution and state value for one step of one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub value: f64,
}

impl PolicyOutput {
    pub fn new(logits: Vec<f64>, value: f64) -> Self {
        let probs = crate::numerics::softmax(&logits);
        Self {
            logits,
            probs,
            value,
        }
    }

    /// Index of the most probable action (first on ties).
    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn log_prob(&self, action: usize) -> f64 {
        self.logits[action] - crate::numerics::log_sum_exp(&self.logits)
    }
}

impl ActorCritic {
    pub fn new<T: Real>(
        state_dim: usize,
        actions: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if state_dim == 0 || actions == 0 {
            return Err(Error::Config(format!(
                "heads need a positive state size and action count, got {state_dim} and {actions}"
            )));
        }
        let aw = init::fan_in_uniform(rng, actions * state_dim, state_dim);
        let cw = init::fan_in_uniform(rng, state_dim, state_dim);
        let actor_w = store.add("heads.actor.w", &[actions, state_dim], aw.into_iter().map(T::of).collect())?;
        let actor_b = store.add("heads.actor.b", &[actions], vec![T::zero(); actions])?;
        let critic_w = store.add("heads.critic.w", &[1, state_dim], cw.into_iter().map(T::of).collect())?;
        let critic_b = store.add("heads.critic.b", &[1], vec![T::zero()])?;
        Ok(Self {
            state_dim,
            actions,
            actor_w,
            actor_b,
            critic_w,
            critic_b,
        })
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn act_value<T: Real>(&self, g: &mut Graph<'_, T>, state: Var) -> Result<HeadVars> {
        let s = g.shape(state).to_vec();
        if s.len() != 2 || s[1] != self.state_dim {
            return Err(Error::dim("act_value", &s, &[0, self.state_dim]));
        }
        let (aw, ab) = (g.param(self.actor_w), g.param(self.actor_b));
        let logits = g.linear(state, aw, Some(ab))?;
        let (cw, cb) = (g.param(self.critic_w), g.param(self.critic_b));
        let value = g.linear(state, cw, Some(cb))?;
        let value = g.reshape(value, &[s[0]])?;
        Ok(HeadVars { logits, value })
    }
}
