//! Active task randomization for desk-scale tabletop manipulation.
//!
//! The crate is organised bottom-up:
//!
//! - [`taskspace`]: the graph-parameterised task space, its prior and a flat
//!   canonical encoding.
//! - [`world`]: a deterministic physics-lite tabletop that instantiates task
//!   parameters, renders segmented point observations and executes the four
//!   single-step manipulation primitives.
//! - [`symbolic`]: scene-graph extraction, skill schemas and a breadth-first
//!   task planner.
//! - [`learnsub`]: a small reverse-mode differentiation tape, dense layers,
//!   Adam and checkpoint IO.
//! - [`policy`]: per-skill Gaussian policies trained by behaviour cloning, and
//!   analytic oracle actors.
//! - [`sampler`]: task encoder, value head, particle-based diversity and the
//!   epsilon-greedy active task selector with its replay buffer.
//! - [`harness`]: training loop, evaluation, metrics and checkpoints.

pub mod harness;
pub mod learnsub;
pub mod policy;
pub mod rng;
pub mod sampler;
pub mod symbolic;
pub mod taskspace;
pub mod world;
