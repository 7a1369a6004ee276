//! The Q-parameterized state-only imitation objective, its exact evaluation,
//! the sampled saddle-point updates and the training loops.
//!
//! For a reward `r(s,s')` and a Q-table the variant backup is
//! `(B^π Q)(s,a) = Σ_{s'} P(s'|s,a) [r(s,s') + γ Σ_{a'} π(a'|s') Q(s',a')]`
//! and the objective is
//! `J(π, Q) = (1-γ) E_{s0~p0, a0~π}[Q(s0,a0)] + E_{μ_R(s,a)}[f*((B^π Q - Q)(s,a))]`,
//! maximized over `π` and minimized over `Q`.

pub mod saddle;
pub mod train;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::density_ratio::SyntheticReward;
use crate::divergence::{DivergenceReport, FDivergenceSpec};
use crate::mdp::{FiniteMdp, TabularPolicy};
use crate::occupancy::{compute_occupancy, OccupancyError};

pub use saddle::{pi_loss, pi_loss_gradient, q_loss, q_loss_gradient, saddle_step, Batch, SaddleConfig, SaddleStats};
pub use train::{
    train, train_bco, train_gaifo_onpolicy, train_opolo, Algorithm, CurvePoint, Evaluator, LearningCurve,
    TrainConfig, TrainError, TrainedAgent,
};

/// Q-table with a lagged target copy refreshed every `period` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub q: Array2<f64>,
    pub target: Array2<f64>,
    pub period: usize,
    pub updates: usize,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize, period: usize) -> Self {
        Self {
            q: Array2::zeros((n_states, n_actions)),
            target: Array2::zeros((n_states, n_actions)),
            period: period.max(1),
            updates: 0,
        }
    }

    /// Counts one update and refreshes the target when the period elapses.
    pub fn tick(&mut self) {
        self.updates += 1;
        if self.updates % self.period == 0 {
            self.target.assign(&self.q);
        }
    }
}

/// Exact `B^π Q` using the known dynamics; pass the target table to get the
/// lagged backup used for Q updates.
pub fn bellman_variant(q: &Array2<f64>, policy: &TabularPolicy, mdp: &FiniteMdp, reward: &SyntheticReward) -> Array2<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.discount();
    let v = policy.expected_values(q);
    let p = mdp.transition();
    let mut out = Array2::zeros((ns, na));
    for s in 0..ns {
        for a in 0..na {
            let mut total = 0.0;
            for t in 0..ns {
                let w = p[[s, a, t]];
                if w > 0.0 {
                    total += w * (reward.get(s, t) + gamma * v[t]);
                }
            }
            out[[s, a]] = total;
        }
    }
    out
}

/// `(B^π Q - Q)(s,a)` with the backup taken from `q` itself.
pub fn residual(q: &Array2<f64>, policy: &TabularPolicy, mdp: &FiniteMdp, reward: &SyntheticReward) -> Array2<f64> {
    bellman_variant(q, policy, mdp, reward) - q
}

fn initial_term(q: &Array2<f64>, policy: &TabularPolicy, p0: &Array1<f64>, gamma: f64) -> f64 {
    (1.0 - gamma) * p0.dot(&policy.expected_values(q))
}

/// `J(π, Q)` evaluated exactly against the `μ_R(s,a)` table.
pub fn opolo_objective(
    policy: &TabularPolicy,
    q: &Array2<f64>,
    reward: &SyntheticReward,
    mu_r_sa: &Array2<f64>,
    p0: &Array1<f64>,
    mdp: &FiniteMdp,
    spec: &FDivergenceSpec,
) -> f64 {
    let x = residual(q, policy, mdp, reward);
    let penalty: f64 = mu_r_sa.iter().zip(x.iter()).map(|(&w, &xi)| if w > 0.0 { w * spec.conjugate(xi) } else { 0.0 }).sum();
    initial_term(q, policy, p0, mdp.discount()) + penalty
}

/// `E_{μ^π(s,a,s')}[r(s,s') - x(s,a)]` with `x = B^π Q - Q`.
fn occupancy_reward_minus_residual(
    mu_sas: &Array3<f64>,
    x: &Array2<f64>,
    reward: &SyntheticReward,
) -> f64 {
    let mut total = 0.0;
    for ((s, a, t), &w) in mu_sas.indexed_iter() {
        if w > 0.0 {
            total += w * (reward.get(s, t) - x[[s, a]]);
        }
    }
    total
}

/// The same objective before the initial-state term is telescoped out:
/// `E_{μ^π(s,a,s')}[r - x] + E_{μ_R}[f*(x)]`.
pub fn pre_telescope_objective(
    policy: &TabularPolicy,
    q: &Array2<f64>,
    reward: &SyntheticReward,
    mu_r_sa: &Array2<f64>,
    mdp: &FiniteMdp,
    spec: &FDivergenceSpec,
) -> Result<f64, OccupancyError> {
    let occ = compute_occupancy(mdp, policy)?;
    let x = residual(q, policy, mdp, reward);
    let penalty: f64 = mu_r_sa.iter().zip(x.iter()).map(|(&w, &xi)| if w > 0.0 { w * spec.conjugate(xi) } else { 0.0 }).sum();
    Ok(occupancy_reward_minus_residual(&occ.mu_sas, &x, reward) + penalty)
}

/// `E_{μ^π(s,a,s')}[r - (B^π Q - Q)] = (1-γ) E_{p0,π}[Q]`, both sides summed
/// exactly with no target lag.
pub fn check_telescoping(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    q: &Array2<f64>,
    reward: &SyntheticReward,
    tolerance: f64,
) -> Result<DivergenceReport, OccupancyError> {
    let occ = compute_occupancy(mdp, policy)?;
    let x = residual(q, policy, mdp, reward);
    let lhs = occupancy_reward_minus_residual(&occ.mu_sas, &x, reward);
    let rhs = initial_term(q, policy, mdp.initial_dist(), mdp.discount());
    Ok(DivergenceReport::equality("telescoping", lhs, rhs, tolerance))
}
