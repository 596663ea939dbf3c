//! Recurrent proximal policy optimization with a predictive-coding world model.
//!
//! The crate is `no_std` + `alloc`. It holds everything that is a pure function of
//! parameters, seeds and actions:
//!
//! - [`numerics`]: differentiable arrays, a reverse-mode tape, initializers, the
//!   seeded generator and a finite-difference gradient checker.
//! - [`networks`]: the residual convolutional encoder and the actor-critic heads.
//! - [`world_model`]: the two-population predictive-coding LSTM and the plain
//!   LSTM used by the baseline variants.
//! - [`rollout`]: batch storage, truncated GAE and the hidden-state and advantage
//!   refresh passes.
//! - [`trainer`]: loss terms, learning-rate schedules, Adam and the epoch loop.
//! - [`envs`]: toy pixel environments and wrappers.
//! - [`session`]: the collect/train cycle with all carried state.
//!
//! File formats, subprocess environments and the command line live in the `p4o`
//! crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod agent;
pub mod diagnostics;
pub mod envs;
mod error;
pub mod networks;
pub mod numerics;
pub mod optim;
pub mod rollout;
pub mod session;
pub mod trainer;
pub mod world_model;

pub use agent::{Agent, AgentConfig, LrDecay, RefreshCadence, Variant};
pub use error::{Error, Result};
pub use numerics::{DiffArray, Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};
