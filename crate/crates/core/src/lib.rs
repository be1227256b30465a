//! Graph attention networks with causal supervision of attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with a reverse-mode tape.
//! - [`graph`]: graphs, dataset loaders, splits, homophily, perturbations
//!   and a planted-partition generator.
//! - [`models`]: GAT / GCN / MLP forward passes exposing per-layer traces
//!   and attention maps, with optional attention overrides.
//! - [`csa`]: counterfactual attention schemes, layer probes, effect
//!   estimation and the causal loss.
//! - [`train`]: optimiser, training loop, evaluation and MAD.
//! - [`experiments`]: declarative experiment configs and the commands
//!   behind the `csa` binary.

pub mod csa;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod models;
pub mod tensor;
pub mod train;

pub use error::{CsaError, Result};
