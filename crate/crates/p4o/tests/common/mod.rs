#![allow(dead_code)]

use std::path::Path;

use p4o::config::EnvName;
use p4o::RunConfig;

/// A TMaze run small enough to train in well under a second per batch.
pub fn tiny(out: &Path) -> RunConfig {
    RunConfig {
        env: EnvName::Tmaze,
        tmaze_length: 3,
        sticky_p: 0.0,
        num_envs: 2,
        batch_steps: 8,
        minibatches: 2,
        epochs: 2,
        batches: 3,
        precision: 64,
        checkpoint_every: 1,
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_p4o")
}
