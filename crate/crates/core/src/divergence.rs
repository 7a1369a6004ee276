//! KL and f-divergences, Fenchel conjugates, the variational dual estimate,
//! and numeric checkers for the identities and bounds relating state-only
//! and state-action distribution matching.
//!
//! Support violations yield `+inf` rather than an error so that checkers can
//! report on degenerate inputs instead of aborting.

use ndarray::{Array1, ArrayBase, Data, Dimension, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{FiniteMdp, TabularPolicy};
use crate::occupancy::{compute_occupancy, ConditionalTable, OccupancyError, OccupancyMeasures};

/// Tolerance for identities checked by exact summation.
pub const IDENTITY_TOL: f64 = 1e-10;
/// Allowed negative slack for inequalities.
pub const BOUND_SLACK: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DivergenceError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Occupancy(#[from] OccupancyError),
}

/// Power-family f-divergence generator `f(x) = |x|^p / p` with conjugate
/// `f*(y) = |y|^q / q`, `1/p + 1/q = 1`. `p = 2` gives `f = f* = x²/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FDivergenceSpec {
    pub exponent: f64,
}

impl Default for FDivergenceSpec {
    fn default() -> Self {
        Self { exponent: 2.0 }
    }
}

impl FDivergenceSpec {
    pub fn power(exponent: f64) -> Self {
        assert!(exponent > 1.0, "power family needs p > 1");
        Self { exponent }
    }

    /// The exponents used for sensitivity runs.
    pub fn registered() -> [FDivergenceSpec; 3] {
        [Self::power(1.5), Self::power(2.0), Self::power(3.0)]
    }

    pub fn name(&self) -> String {
        if self.exponent == 2.0 {
            "half-squared".to_string()
        } else {
            format!("power-{}", self.exponent)
        }
    }

    pub fn conjugate_exponent(&self) -> f64 {
        self.exponent / (self.exponent - 1.0)
    }

    pub fn f(&self, x: f64) -> f64 {
        if self.exponent == 2.0 {
            0.5 * x * x
        } else {
            x.abs().powf(self.exponent) / self.exponent
        }
    }

    pub fn conjugate(&self, y: f64) -> f64 {
        if self.exponent == 2.0 {
            0.5 * y * y
        } else {
            let q = self.conjugate_exponent();
            y.abs().powf(q) / q
        }
    }

    /// `d f*/dy`.
    pub fn conjugate_derivative(&self, y: f64) -> f64 {
        if self.exponent == 2.0 {
            y
        } else {
            let q = self.conjugate_exponent();
            y.signum() * y.abs().powf(q - 1.0)
        }
    }

    /// `(f*)'^{-1}(w)`: the witness value where the dual is stationary for ratio `w`.
    pub fn optimal_witness(&self, ratio: f64) -> f64 {
        if self.exponent == 2.0 {
            ratio
        } else {
            ratio.signum() * ratio.abs().powf(self.exponent - 1.0)
        }
    }
}

fn same_shape<S1, S2, D>(p: &ArrayBase<S1, D>, q: &ArrayBase<S2, D>) -> Result<(), DivergenceError>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if p.shape() != q.shape() {
        return Err(DivergenceError::Shape(p.shape().to_vec(), q.shape().to_vec()));
    }
    Ok(())
}

/// `Σ p log(p/q)` with `0 log 0 = 0`; `+inf` when `q = 0 < p`.
pub fn kl<S1, S2, D>(p: &ArrayBase<S1, D>, q: &ArrayBase<S2, D>) -> Result<f64, DivergenceError>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    same_shape(p, q)?;
    let mut total = 0.0;
    let mut infinite = false;
    Zip::from(p).and(q).for_each(|&pi, &qi| {
        if pi > 0.0 {
            if qi > 0.0 {
                total += pi * (pi / qi).ln();
            } else {
                infinite = true;
            }
        }
    });
    Ok(if infinite { f64::INFINITY } else { total })
}

/// `Σ_z w(z) Σ_x p(x|z) log(p(x|z)/q(x|z))`, summed over conditions with
/// positive weight. A condition where `q` is undefined or lacks support
/// gives `+inf`.
pub fn conditional_kl(
    weights: &Array1<f64>,
    p_cond: &ConditionalTable,
    q_cond: &ConditionalTable,
) -> Result<f64, DivergenceError> {
    if weights.len() != p_cond.n_conditions() || p_cond.probs.shape() != q_cond.probs.shape() {
        return Err(DivergenceError::Shape(
            vec![weights.len(), p_cond.probs.ncols()],
            q_cond.probs.shape().to_vec(),
        ));
    }
    let mut total = 0.0;
    for (z, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        if !p_cond.defined[z] || !q_cond.defined[z] {
            return Ok(f64::INFINITY);
        }
        let inner = kl(&p_cond.probs.row(z), &q_cond.probs.row(z))?;
        if inner.is_infinite() {
            return Ok(f64::INFINITY);
        }
        total += w * inner;
    }
    Ok(total)
}

/// `Σ q f(p/q)`. `f(1) = 1/2` for the default generator, so `D_f[P||P] = 1/2`.
pub fn f_div<S1, S2, D>(p: &ArrayBase<S1, D>, q: &ArrayBase<S2, D>, spec: &FDivergenceSpec) -> Result<f64, DivergenceError>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    same_shape(p, q)?;
    let mut total = 0.0;
    let mut infinite = false;
    Zip::from(p).and(q).for_each(|&pi, &qi| {
        if qi > 0.0 {
            total += qi * spec.f(pi / qi);
        } else if pi > 0.0 {
            infinite = true;
        }
    });
    Ok(if infinite { f64::INFINITY } else { total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once every coordinate's stationarity residual is below this.
    pub tolerance: f64,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self { learning_rate: 0.5, max_iters: 1_000_000, tolerance: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEstimate {
    pub value: f64,
    pub witness: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// `sup_x E_p[x] - E_q[f*(x)]` by gradient ascent over a tabular witness.
///
/// Each coordinate's gradient `p_i - q_i f*'(x_i)` is scaled by `1/q_i`, so
/// all coordinates contract at the same rate regardless of their mass.
pub fn f_div_dual_estimate(
    p: &Array1<f64>,
    q: &Array1<f64>,
    spec: &FDivergenceSpec,
    config: &DualConfig,
) -> Result<DualEstimate, DivergenceError> {
    same_shape(p, q)?;
    let n = p.len();
    let mut x = Array1::<f64>::zeros(n);
    if p.iter().zip(q.iter()).any(|(&pi, &qi)| pi > 0.0 && qi <= 0.0) {
        return Ok(DualEstimate { value: f64::INFINITY, witness: x, iterations: 0, converged: true });
    }
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iters {
        iterations += 1;
        let mut worst = 0.0f64;
        for i in 0..n {
            if q[i] <= 0.0 {
                continue;
            }
            let residual = p[i] / q[i] - spec.conjugate_derivative(x[i]);
            worst = worst.max(residual.abs());
            x[i] += config.learning_rate * residual;
        }
        if worst < config.tolerance {
            converged = true;
            break;
        }
    }
    let value = dual_objective(p, q, &x, spec);
    Ok(DualEstimate { value, witness: x, iterations, converged })
}

/// `E_p[x] - E_q[f*(x)]` for a fixed witness.
pub fn dual_objective(p: &Array1<f64>, q: &Array1<f64>, x: &Array1<f64>, spec: &FDivergenceSpec) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            total += p[i] * x[i];
        }
        if q[i] > 0.0 {
            total -= q[i] * spec.conjugate(x[i]);
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `|lhs - rhs| <= tolerance`
    Equal,
    /// `lhs <= rhs + tolerance`
    AtMost,
}

/// Outcome of one numeric identity or bound check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub name: String,
    pub relation: Relation,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs - rhs` for equalities, `rhs - lhs` (slack) for inequalities.
    pub gap: f64,
    pub tolerance: f64,
    pub holds: bool,
}

impl DivergenceReport {
    pub fn equality(name: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let gap = lhs - rhs;
        let holds = gap.abs() <= tolerance || (lhs == rhs);
        Self { name: name.into(), relation: Relation::Equal, lhs, rhs, gap, tolerance, holds }
    }

    pub fn at_most(name: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let gap = rhs - lhs;
        let holds = gap >= -tolerance || (rhs == f64::INFINITY && !lhs.is_nan());
        Self { name: name.into(), relation: Relation::AtMost, lhs, rhs, gap, tolerance, holds }
    }
}

fn occupancies(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    expert: &TabularPolicy,
) -> Result<(OccupancyMeasures, OccupancyMeasures), DivergenceError> {
    Ok((compute_occupancy(mdp, policy)?, compute_occupancy(mdp, expert)?))
}

/// `D_KL[μ^π(a|s,s') || μ^E(a|s,s')]` weighted by `μ^π(s,s')`.
pub fn inverse_action_kl(agent: &OccupancyMeasures, expert: &OccupancyMeasures) -> Result<f64, DivergenceError> {
    conditional_kl(&agent.mu_ss_flat(), &agent.inv_action, &expert.inv_action)
}

/// `D_KL[μ^E(s'|s) || μ^π(s'|s)]` weighted by `μ^E(s)`.
pub fn forward_transition_kl(expert: &OccupancyMeasures, agent_next: &ConditionalTable) -> Result<f64, DivergenceError> {
    conditional_kl(&expert.mu_s, &expert.cond_next, agent_next)
}

/// KL of the `(s,a,s')` joints equals KL of the `(s,a)` marginals, since both
/// share the same dynamics.
pub fn check_joint_equals_sa(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    expert: &TabularPolicy,
) -> Result<DivergenceReport, DivergenceError> {
    let (agent, exp) = occupancies(mdp, policy, expert)?;
    let lhs = kl(&agent.mu_sas, &exp.mu_sas)?;
    let rhs = kl(&agent.mu_sa, &exp.mu_sa)?;
    Ok(DivergenceReport::equality("joint_equals_state_action", lhs, rhs, IDENTITY_TOL))
}

/// Inverse-action KL equals state-action KL minus transition KL.
pub fn check_gap_decomposition(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    expert: &TabularPolicy,
) -> Result<DivergenceReport, DivergenceError> {
    let (agent, exp) = occupancies(mdp, policy, expert)?;
    let lhs = inverse_action_kl(&agent, &exp)?;
    let rhs = kl(&agent.mu_sa, &exp.mu_sa)? - kl(&agent.mu_ss, &exp.mu_ss)?;
    Ok(DivergenceReport::equality("gap_decomposition", lhs, rhs, IDENTITY_TOL))
}

/// `E_{μ^π(s,s')}[log μ_R/μ^E]`, or `None` if `μ_R` misses agent support.
fn cross_log_ratio(agent: &OccupancyMeasures, expert: &OccupancyMeasures, buffer: &OccupancyMeasures) -> Option<f64> {
    let mut total = 0.0;
    for ((&pa, &pe), &pr) in agent.mu_ss.iter().zip(expert.mu_ss.iter()).zip(buffer.mu_ss.iter()) {
        if pa > 0.0 {
            if pr <= 0.0 {
                return None;
            }
            if pe <= 0.0 {
                return Some(f64::INFINITY);
            }
            total += pa * (pr / pe).ln();
        }
    }
    Some(total)
}

/// Transition KL is bounded by the cross log-ratio term plus the state-action
/// KL to the buffer distribution.
pub fn check_surrogate_upper_bound(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    expert: &TabularPolicy,
    buffer: &OccupancyMeasures,
) -> Result<DivergenceReport, DivergenceError> {
    let (agent, exp) = occupancies(mdp, policy, expert)?;
    let lhs = kl(&agent.mu_ss, &exp.mu_ss)?;
    let penalty = kl(&agent.mu_sa, &buffer.mu_sa)?;
    let rhs = match cross_log_ratio(&agent, &exp, buffer) {
        Some(c) if penalty.is_finite() => c + penalty,
        _ => f64::INFINITY,
    };
    Ok(DivergenceReport::at_most("surrogate_upper_bound", lhs, rhs, BOUND_SLACK))
}

/// The surrogate objective with `D_f` in place of the state-action KL.
pub fn opolo_bound_value(
    agent: &OccupancyMeasures,
    expert: &OccupancyMeasures,
    buffer: &OccupancyMeasures,
    spec: &FDivergenceSpec,
) -> Result<f64, DivergenceError> {
    let penalty = f_div(&agent.mu_sa, &buffer.mu_sa, spec)?;
    Ok(match cross_log_ratio(agent, expert, buffer) {
        Some(c) if penalty.is_finite() => c + penalty,
        _ => f64::INFINITY,
    })
}

/// Transition KL is bounded by the surrogate objective with `D_f`.
pub fn check_f_bound_chain(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    expert: &TabularPolicy,
    buffer: &OccupancyMeasures,
    spec: &FDivergenceSpec,
) -> Result<DivergenceReport, DivergenceError> {
    let (agent, exp) = occupancies(mdp, policy, expert)?;
    let lhs = kl(&agent.mu_ss, &exp.mu_ss)?;
    let rhs = opolo_bound_value(&agent, &exp, buffer, spec)?;
    Ok(DivergenceReport::at_most("f_bound_chain", lhs, rhs, BOUND_SLACK))
}

/// Expert-weighted policy KL splits into the forward transition KL plus the
/// forward inverse-action KL.
pub fn check_forward_decomposition(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    expert: &TabularPolicy,
) -> Result<DivergenceReport, DivergenceError> {
    let (agent, exp) = occupancies(mdp, policy, expert)?;
    let expert_pi = ConditionalTable { probs: expert.probs().clone(), defined: Array1::from_elem(mdp.n_states(), true) };
    let agent_pi = ConditionalTable { probs: policy.probs().clone(), defined: Array1::from_elem(mdp.n_states(), true) };
    let lhs = conditional_kl(&exp.mu_s, &expert_pi, &agent_pi)?;
    let next = conditional_kl(&exp.mu_s, &exp.cond_next, &agent.cond_next)?;
    let inverse = conditional_kl(&exp.mu_ss_flat(), &exp.inv_action, &agent.inv_action)?;
    Ok(DivergenceReport::equality("forward_decomposition", lhs, next + inverse, IDENTITY_TOL))
}
