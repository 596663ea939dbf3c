//! Agent configuration, variants and the bundle of networks they select.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{frames_tensor, ActorCritic, Encoder, EncoderConfig, HeadVars, PolicyOutput};
use crate::numerics::{categorical_sample, Graph, ParamStore, Real, Rng, Tensor, Var};
use crate::world_model::{BaselineLstm, PcLstm, RecurrentState, StateVars, StepVars, WorldModel};

/// Parameter initialization uses its own stream so acting randomness can change
/// without changing the initial weights.
const PARAM_STREAM: u64 = 0x1417;
const ACT_STREAM: u64 = 0xAC7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "p4o")]
    P4o,
    /// Baseline LSTM with as many hidden units as the predictive model's state.
    #[serde(rename = "lstm-ppo-1024")]
    LstmPpo1024,
    /// Baseline LSTM with a parameter count matched to the predictive model.
    #[serde(rename = "lstm-ppo-800")]
    LstmPpo800,
    /// Predictive model trained with the prediction loss weight set to zero.
    #[serde(rename = "p4o-no-pp")]
    P4oNoPp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::P4o,
        Variant::LstmPpo1024,
        Variant::LstmPpo800,
        Variant::P4oNoPp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::P4o => "p4o",
            Variant::LstmPpo1024 => "lstm-ppo-1024",
            Variant::LstmPpo800 => "lstm-ppo-800",
            Variant::P4oNoPp => "p4o-no-pp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (expected p4o, lstm-ppo-1024, lstm-ppo-800 or p4o-no-pp)"
                ))
            })
    }

    pub fn is_predictive(self) -> bool {
        matches!(self, Variant::P4o | Variant::P4oNoPp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrDecay {
    /// `lr₀ · max(1 − b·10⁻⁴, 10⁻⁴)`, i.e. a floor of 2.5e−8 at the default lr₀.
    Short,
    /// `max(lr₀ · 0.995^⌊b/100⌋, 5e−6)`.
    Long,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefreshCadence {
    Epoch,
    Minibatch,
}

/// Every hyperparameter of an agent. Defaults are the full-scale values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    /// Belief population size `q`.
    pub belief_dim: usize,
    /// Overrides the baseline hidden size chosen by the variant.
    pub baseline_hidden: Option<usize>,
    /// Prediction horizon `H`.
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub adam_eps: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub num_envs: usize,
    pub batch_steps: usize,
    pub c_actor: f64,
    pub c_critic: f64,
    pub c_prediction: f64,
    pub c_entropy: f64,
    pub c_l1: f64,
    pub l1_enabled: bool,
    /// Multiplies the entropy coefficient once per batch; 1 disables decay.
    pub entropy_decay: f64,
    pub normalize_advantages: bool,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Stops the prediction loss from reaching the encoder through the targets.
    pub detach_prediction_targets: bool,
    pub advantage_refresh: RefreshCadence,
    /// Anchor the first update of each batch on the previous batch's
    /// second-to-last policy.
    pub anchor_first_update: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::P4o,
            encoder: EncoderConfig::default(),
            belief_dim: 512,
            baseline_hidden: None,
            horizon: 3,
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.1,
            lr: 2.5e-4,
            lr_decay: LrDecay::Short,
            adam_eps: 1e-5,
            epochs: 4,
            minibatches: 5,
            num_envs: 16,
            batch_steps: 125,
            c_actor: 1.0,
            c_critic: 0.5,
            c_prediction: 1.0,
            c_entropy: 0.02,
            c_l1: 0.1,
            l1_enabled: false,
            entropy_decay: 1.0,
            normalize_advantages: true,
            grad_clip: Some(0.5),
            detach_prediction_targets: false,
            advantage_refresh: RefreshCadence::Epoch,
            anchor_first_update: true,
        }
    }
}

impl AgentConfig {
    /// 16×16 frames, encoder channels `[4, 8, 8, 8]`, `p = q = 32`, `H = 3`.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            belief_dim: 32,
            ..Self::default()
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    /// Recurrent width of the baseline variants.
    pub fn baseline_hidden_dim(&self) -> usize {
        if let Some(k) = self.baseline_hidden {
            return k;
        }
        let (p, q) = (self.latent_dim(), self.belief_dim);
        match self.variant {
            Variant::LstmPpo800 => BaselineLstm::matched_hidden(p, q),
            _ => p + q,
        }
    }

    /// Loss weight actually applied to the prediction term.
    pub fn effective_c_prediction(&self) -> f64 {
        match self.variant {
            Variant::P4oNoPp => 0.0,
            _ => self.c_prediction,
        }
    }

    pub fn segment_len(&self) -> usize {
        self.batch_steps / self.minibatches.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.belief_dim == 0 || self.horizon == 0 {
            return bad(format!(
                "belief size and horizon must be positive, got q={} H={}",
                self.belief_dim, self.horizon
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("gamma and lambda must lie in [0, 1], got {} and {}", self.gamma, self.lambda));
        }
        if self.clip_eps <= 0.0 {
            return bad(format!("clip range must be positive, got {}", self.clip_eps));
        }
        if self.lr < 0.0 || self.adam_eps <= 0.0 {
            return bad("learning rate must be non-negative and adam epsilon positive".into());
        }
        if self.epochs == 0 || self.minibatches == 0 || self.num_envs == 0 {
            return bad("epochs, minibatches and num_envs must be positive".into());
        }
        if self.batch_steps == 0 || self.batch_steps % self.minibatches != 0 {
            return bad(format!(
                "batch_steps {} must be a positive multiple of minibatches {}",
                self.batch_steps, self.minibatches
            ));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.baseline_hidden == Some(0) {
            return bad("baseline_hidden must be positive".into());
        }
        Ok(())
    }
}

/// Encoder, recurrent core and heads sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Agent<T> {
    pub config: AgentConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub world: WorldModel,
    pub heads: ActorCritic,
    actions: usize,
}

/// Graph handles for a batch of agent steps.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub latent: Var,
    pub step: StepVars,
    pub heads: HeadVars,
}

/// Result of acting in `N` environments for one step.
#[derive(Clone, Debug)]
pub struct ActOutput<T> {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// `[N, p]`
    pub latents: Tensor<T>,
    pub errors: Tensor<T>,
    pub state: RecurrentState<T>,
    pub policies: Vec<PolicyOutput>,
}

impl<T: Real> Agent<T> {
    /// Builds and initializes every network from `seed`.
    pub fn new(config: AgentConfig, actions: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::with_stream(seed, PARAM_STREAM);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&config.encoder, &mut params, &mut rng)?;
        let p = config.latent_dim();
        let world = if config.variant.is_predictive() {
            WorldModel::Predictive(PcLstm::new(p, config.belief_dim, &mut params, &mut rng)?)
        } else {
            WorldModel::Baseline(BaselineLstm::new(p, config.baseline_hidden_dim(), &mut params, &mut rng)?)
        };
        let heads = ActorCritic::new(world.combined_dim(), actions, &mut params, &mut rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            world,
            heads,
            actions,
        })
    }

    /// Acting randomness for a run seeded with `seed`.
    pub fn acting_rng(seed: u64) -> Rng {
        Rng::with_stream(seed, ACT_STREAM)
    }

    pub fn action_count(&self) -> usize {
        self.actions
    }

    pub fn zero_state(&self, batch: usize) -> RecurrentState<T> {
        self.world.zero_state(batch)
    }

    /// Recurrent step and heads from an already encoded latent `[B, p]`.
    pub fn step_from_latent(
        &self,
        g: &mut Graph<'_, T>,
        latent: Var,
        prev: &StateVars,
        t: usize,
    ) -> Result<(StepVars, HeadVars)> {
        let step = self.world.step(g, latent, prev, t)?;
        let heads = self.heads.act_value(g, step.combined)?;
        Ok((step, heads))
    }

    /// Encoder, recurrent step and heads for frames `[B, C, H, W]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, frames: Var, prev: &StateVars, t: usize) -> Result<ForwardVars> {
        let latent = self.encoder.encode(g, frames)?;
        let (step, heads) = self.step_from_latent(g, latent, prev, t)?;
        Ok(ForwardVars { latent, step, heads })
    }

    /// Encodes `u8` frames without recording gradients.
    pub fn encode_frames(&self, frames: &[&[u8]]) -> Result<Tensor<T>> {
        let x = frames_tensor(frames, self.config.encoder.input_shape)?;
        let mut g = Graph::inference(&self.params);
        let xv = g.constant(x);
        let z = self.encoder.encode(&mut g, xv)?;
        Ok(g.value(z).clone())
    }

    /// One acting step for `N` environments. Samples from the policy, or takes
    /// the most probable action when `deterministic`.
    pub fn act(
        &self,
        frames: &[&[u8]],
        state: &RecurrentState<T>,
        rng: &mut Rng,
        deterministic: bool,
        t: usize,
    ) -> Result<ActOutput<T>> {
        let latents = self.encode_frames(frames)?;
        self.act_from_latents(latents, state, rng, deterministic, t)
    }

    pub fn act_from_latents(
        &self,
        latents: Tensor<T>,
        state: &RecurrentState<T>,
        rng: &mut Rng,
        deterministic: bool,
        t: usize,
    ) -> Result<ActOutput<T>> {
        let mut g = Graph::inference(&self.params);
        let prev = state.to_vars(&mut g);
        let x = g.constant(latents.clone());
        let (step, heads) = self.step_from_latent(&mut g, x, &prev, t)?;
        let logits = g.value(heads.logits);
        let values = g.value(heads.value).to_f64_vec();
        let n = latents.rows();
        let mut actions = Vec::with_capacity(n);
        let mut log_probs = Vec::with_capacity(n);
        let mut policies = Vec::with_capacity(n);
        for (i, &value) in values.iter().enumerate() {
            let row = logits.row(i);
            if row.iter().any(|l| !l.is_finite()) {
                return Err(Error::Numeric(format!("non-finite logits for env {i} at step {t}")));
            }
            let policy = PolicyOutput::new(row.iter().map(|l| l.as_f64()).collect(), value);
            let a = if deterministic {
                policy.greedy()
            } else {
                categorical_sample(row, rng)?
            };
            actions.push(a);
            log_probs.push(policy.log_prob(a));
            policies.push(policy);
        }
        Ok(ActOutput {
            actions,
            log_probs,
            values,
            latents,
            errors: g.value(step.error).clone(),
            state: step.state.values(&g),
            policies,
        })
    }

    /// The same agent with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Agent<U> {
        Agent {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            world: self.world.clone(),
            heads: self.heads.clone(),
            actions: self.actions,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("ppo").is_err());
    }

    #[test]
    fn baseline_widths_follow_variant() {
        let mut c = AgentConfig::default();
        c.variant = Variant::LstmPpo1024;
        assert_eq!(c.baseline_hidden_dim(), 1024);
        c.variant = Variant::LstmPpo800;
        assert_eq!(c.baseline_hidden_dim(), 800);
        c.baseline_hidden = Some(7);
        assert_eq!(c.baseline_hidden_dim(), 7);
    }

    #[test]
    fn ablation_zeroes_prediction_weight() {
        let mut c = AgentConfig::default();
        assert_eq!(c.effective_c_prediction(), 1.0);
        c.variant = Variant::P4oNoPp;
        assert_eq!(c.effective_c_prediction(), 0.0);
    }

    #[test]
    fn default_batch_tiles_into_five_segments() {
        let c = AgentConfig::default();
        assert_eq!(c.num_envs * c.batch_steps, 2000);
        assert_eq!(c.segment_len() * c.num_envs, 400);
    }
}
