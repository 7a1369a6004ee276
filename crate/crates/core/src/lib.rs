//! Exact tabular imitation learning from state-only observations.
//!
//! The crate keeps two evaluation planes side by side: learners see only
//! sampled transitions and expert state sequences, while the verification
//! code computes every occupancy, divergence and Bellman expectation exactly
//! from the known dynamics.

pub mod data;
pub mod density_ratio;
pub mod divergence;
pub mod envs;
pub mod inverse;
pub mod mdp;
pub mod occupancy;
pub mod opolo;
pub mod planning;
