//! Run configuration: one flat TOML document, `P4O_*` environment variables
//! and command-line flags, merged in that order of increasing priority over
//! the built-in defaults.

use std::path::{Path, PathBuf};

use p4o_core::envs::{BuiltinEnv, EnvSpec};
use p4o_core::networks::EncoderConfig;
use p4o_core::{AgentConfig, LrDecay, RefreshCadence, Variant};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

/// Prefix of environment-variable overrides: `P4O_SEED=7` sets `seed`.
pub const ENV_PREFIX: &str = "P4O_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvName {
    PixelCatch,
    Tmaze,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderPreset {
    /// 16×16 frames, channels 4/8/8/8, 32-dimensional latents.
    Toy,
    /// 84×84 frames, channels 24/32/64/128, 512-dimensional latents.
    Full,
}

/// Every knob of a run. Zero stands for "derived" in `latent_dim`,
/// `belief_dim` and `baseline_hidden`, and for "off" in `grad_clip`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: Variant,
    pub env: EnvName,
    pub catch_size: usize,
    pub catch_pellets: usize,
    pub tmaze_length: usize,
    /// Shell command of an external environment process.
    pub external_command: String,
    pub external_timeout_ms: u64,
    /// Convert external RGB frames to 84×84 grayscale before stacking.
    pub external_preprocess: bool,
    pub frame_stack: usize,
    pub sticky_p: f64,
    pub sign_rewards: bool,

    pub encoder: EncoderPreset,
    pub latent_dim: usize,
    pub belief_dim: usize,
    pub baseline_hidden: usize,
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
    pub entropy_decay: f64,
    pub normalize_advantages: bool,
    pub grad_clip: f64,
    pub detach_prediction_targets: bool,
    pub advantage_refresh: RefreshCadence,
    pub anchor_first_update: bool,

    pub seed: u64,
    pub batches: u64,
    pub out: PathBuf,
    /// 32 or 64.
    pub precision: u32,
    pub checkpoint_every: u64,
    /// Write every batch's buffer to `out/buffers/`.
    pub dump_buffers: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = AgentConfig::default();
        Self {
            variant: a.variant,
            env: EnvName::PixelCatch,
            catch_size: 16,
            catch_pellets: 5,
            tmaze_length: 5,
            external_command: String::new(),
            external_timeout_ms: 10_000,
            external_preprocess: false,
            frame_stack: 4,
            sticky_p: 0.25,
            sign_rewards: false,
            encoder: EncoderPreset::Toy,
            latent_dim: 0,
            belief_dim: 0,
            baseline_hidden: 0,
            horizon: a.horizon,
            gamma: a.gamma,
            lambda: a.lambda,
            clip_eps: a.clip_eps,
            lr: a.lr,
            lr_decay: a.lr_decay,
            adam_eps: a.adam_eps,
            epochs: a.epochs,
            minibatches: a.minibatches,
            num_envs: a.num_envs,
            batch_steps: a.batch_steps,
            c_actor: a.c_actor,
            c_critic: a.c_critic,
            c_prediction: a.c_prediction,
            c_entropy: a.c_entropy,
            c_l1: a.c_l1,
            l1_enabled: a.l1_enabled,
            entropy_decay: a.entropy_decay,
            normalize_advantages: a.normalize_advantages,
            grad_clip: a.grad_clip.unwrap_or(0.0),
            detach_prediction_targets: a.detach_prediction_targets,
            advantage_refresh: a.advantage_refresh,
            anchor_first_update: a.anchor_first_update,
            seed: 0,
            batches: 300,
            out: PathBuf::from("runs/p4o"),
            precision: 32,
            checkpoint_every: 50,
            dump_buffers: false,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses a scalar the way it would appear on the right of `key = ...`, falling
/// back to a bare string.
pub fn parse_scalar(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Names of all keys, in declaration order.
    pub fn keys() -> Vec<String> {
        match Value::try_from(Self::default()) {
            Ok(Value::Table(t)) => t.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    /// Merges defaults, `file`, environment variables from `vars` and `flags`.
    pub fn resolve<I>(file: Option<&Path>, vars: I, flags: &Table) -> CliResult<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = match Value::try_from(Self::default()) {
            Ok(Value::Table(t)) => t,
            _ => return Err(config_err("defaults do not serialize to a table")),
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
            let doc: Table = text
                .parse()
                .map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))?;
            for (k, v) in doc {
                if !table.contains_key(&k) {
                    return Err(config_err(format!("unknown key `{k}` in {}", path.display())));
                }
                table.insert(k, v);
            }
        }
        for (name, raw) in vars {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else { continue };
            let key = key.to_ascii_lowercase();
            if table.contains_key(&key) {
                table.insert(key, parse_scalar(&raw));
            }
        }
        for (k, v) in flags {
            if !table.contains_key(k) {
                return Err(config_err(format!("unknown key `{k}`")));
            }
            table.insert(k.clone(), v.clone());
        }
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(format!("invalid configuration: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file on its own, without environment or flags.
    pub fn from_file(path: &Path) -> CliResult<Self> {
        Self::resolve(Some(path), std::iter::empty(), &Table::new())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.precision != 32 && self.precision != 64 {
            return Err(config_err(format!("precision must be 32 or 64, got {}", self.precision)));
        }
        if self.env == EnvName::External && self.external_command.trim().is_empty() {
            return Err(config_err("env = \"external\" needs external_command"));
        }
        if !(0.0..1.0).contains(&self.sticky_p) {
            return Err(config_err(format!("sticky_p must be in [0, 1), got {}", self.sticky_p)));
        }
        if self.grad_clip < 0.0 {
            return Err(config_err("grad_clip must be non-negative"));
        }
        let native = match self.encoder {
            EncoderPreset::Toy => EncoderConfig::toy().input_shape,
            EncoderPreset::Full => EncoderConfig::default().input_shape,
        };
        self.agent_config(native).validate()?;
        Ok(())
    }

    /// Agent configuration for frames of shape `input` (before stacking is
    /// accounted for by the caller).
    pub fn agent_config(&self, input: [usize; 3]) -> AgentConfig {
        let mut encoder = match self.encoder {
            EncoderPreset::Toy => EncoderConfig::toy(),
            EncoderPreset::Full => EncoderConfig::default(),
        };
        if self.latent_dim > 0 {
            encoder.latent_dim = self.latent_dim;
        }
        encoder.input_shape = input;
        let belief_dim = if self.belief_dim > 0 { self.belief_dim } else { encoder.latent_dim };
        AgentConfig {
            variant: self.variant,
            encoder,
            belief_dim,
            baseline_hidden: (self.baseline_hidden > 0).then_some(self.baseline_hidden),
            horizon: self.horizon,
            gamma: self.gamma,
            lambda: self.lambda,
            clip_eps: self.clip_eps,
            lr: self.lr,
            lr_decay: self.lr_decay,
            adam_eps: self.adam_eps,
            epochs: self.epochs,
            minibatches: self.minibatches,
            num_envs: self.num_envs,
            batch_steps: self.batch_steps,
            c_actor: self.c_actor,
            c_critic: self.c_critic,
            c_prediction: self.c_prediction,
            c_entropy: self.c_entropy,
            c_l1: self.c_l1,
            l1_enabled: self.l1_enabled,
            entropy_decay: self.entropy_decay,
            normalize_advantages: self.normalize_advantages,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            detach_prediction_targets: self.detach_prediction_targets,
            advantage_refresh: self.advantage_refresh,
            anchor_first_update: self.anchor_first_update,
        }
    }

    /// The built-in environment, or `None` for an external one.
    pub fn env_spec(&self) -> Option<EnvSpec> {
        let kind = match self.env {
            EnvName::PixelCatch => BuiltinEnv::PixelCatch { size: self.catch_size, pellets: self.catch_pellets },
            EnvName::Tmaze => BuiltinEnv::TMaze { length: self.tmaze_length },
            EnvName::External => return None,
        };
        Some(EnvSpec { kind, frame_stack: self.frame_stack, sticky_p: self.sticky_p, sign_rewards: self.sign_rewards })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn defaults_follow_the_hyperparameter_table() {
        let c = RunConfig::default();
        assert_eq!((c.gamma, c.lambda, c.clip_eps, c.lr, c.adam_eps), (0.99, 0.95, 0.1, 2.5e-4, 1e-5));
        assert_eq!((c.epochs, c.minibatches, c.num_envs, c.batch_steps, c.horizon), (4, 5, 16, 125, 3));
        assert_eq!((c.c_actor, c.c_critic, c.c_prediction, c.c_entropy, c.c_l1), (1.0, 0.5, 1.0, 0.02, 0.1));
        assert_eq!(c.frame_stack, 4);
        assert_eq!(c.checkpoint_every, 50);
    }

    #[test]
    fn flags_beat_environment_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 1\nbatches = 10\nlr = 1e-3\nvariant = \"lstm-ppo-800\"\n").unwrap();
        let mut flags = Table::new();
        flags.insert("seed".into(), Value::Integer(3));
        let env = vars(&[("P4O_SEED", "2"), ("P4O_BATCHES", "20"), ("HOME", "/x"), ("P4O_NOT_A_KEY", "1")]);
        let c = RunConfig::resolve(Some(&path), env, &flags).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.batches, 20);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.variant, Variant::LstmPpo800);
        assert_eq!(c.num_envs, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "sead = 1\n").unwrap();
        assert!(matches!(RunConfig::from_file(&path), Err(CliError::Config(_))));
        let mut flags = Table::new();
        flags.insert("bogus".into(), Value::Integer(1));
        assert!(RunConfig::resolve(None, vars(&[]), &flags).is_err());
    }

    #[test]
    fn bad_values_are_configuration_errors() {
        for (k, v) in [("precision", "16"), ("sticky_p", "1.0"), ("variant", "\"ppo\""), ("epochs", "\"four\"")] {
            let err = RunConfig::resolve(None, vars(&[(&format!("P4O_{}", k.to_uppercase()), v)]), &Table::new());
            assert!(matches!(err, Err(CliError::Config(_))), "{k} = {v}");
        }
    }

    #[test]
    fn string_variables_need_no_quotes() {
        let c = RunConfig::resolve(None, vars(&[("P4O_ENV", "tmaze"), ("P4O_OUT", "/tmp/run")]), &Table::new()).unwrap();
        assert_eq!(c.env, EnvName::Tmaze);
        assert_eq!(c.out, PathBuf::from("/tmp/run"));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.seed = 77;
        c.grad_clip = 0.0;
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::keys().len(), 44);
    }
}
