//! Visuo-tactile manipulation policy stack on a planar contact simulator.
//!
//! The crate is organised bottom-up: `numerics` provides tensors, a reverse-mode
//! tape and Adam; `sensing` the observation/action types and force math;
//! `encoders`, `fusion` and `diffusion` the network blocks; `policy` wires them
//! into a trainable imitation policy; `simenv` hosts the hinge-flip simulator,
//! the scripted expert and evaluation; `config` and `commands` back the CLI.

pub mod commands;
pub mod config;
pub mod diffusion;
pub mod encoders;
pub mod fusion;
pub mod numerics;
pub mod policy;
pub mod rngstream;
pub mod sensing;
pub mod simenv;
