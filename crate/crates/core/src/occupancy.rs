//! Discounted occupancy measures of a policy and their conditionals.
//!
//! `μ(s) = (1-γ) Σ_{t≥0} γ^t Pr(s_t = s)` is obtained from the linear system
//! `(I - γ T_π^T) μ = (1-γ) p0`. Every other table follows from it:
//! `μ(s,a) = μ(s) π(a|s)`, `μ(s,a,s') = μ(s,a) P(s'|s,a)`,
//! `μ(s,s') = Σ_a μ(s,a,s')`, and the conditionals `μ(a|s,s')`, `μ(s'|s)`
//! by Bayes' rule on their supports.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::mdp::{seeded_rng, FiniteMdp, MdpError, Simulator, TabularPolicy};

/// Maximum residual accepted from the occupancy linear solve.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum OccupancyError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("occupancy system is singular")]
    Singular,
    #[error("occupancy solve residual {0:e} exceeds tolerance")]
    Residual(f64),
    #[error("expected return needs an environment reward table")]
    MissingReward,
}

/// Conditional distribution `p(x|z)` stored as rows over a flattened
/// conditioning variable `z`. Rows where `defined[z]` is false have no
/// conditioning mass and hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTable {
    pub probs: Array2<f64>,
    pub defined: Array1<bool>,
}

impl ConditionalTable {
    /// Normalizes each row of `joint`; rows with zero mass are left undefined.
    pub fn from_joint(joint: &Array2<f64>) -> Self {
        let mut probs = Array2::zeros(joint.raw_dim());
        let mut defined = Array1::from_elem(joint.nrows(), false);
        for (z, row) in joint.outer_iter().enumerate() {
            let mass = row.sum();
            if mass > 0.0 {
                defined[z] = true;
                probs.row_mut(z).assign(&(&row / mass));
            }
        }
        Self { probs, defined }
    }

    pub fn n_conditions(&self) -> usize {
        self.probs.nrows()
    }

    pub fn get(&self, z: usize, x: usize) -> Option<f64> {
        self.defined[z].then(|| self.probs[[z, x]])
    }

    /// JSON-friendly view with `null` rows where undefined.
    pub fn to_rows(&self) -> Vec<Option<Vec<f64>>> {
        self.probs
            .outer_iter()
            .zip(self.defined.iter())
            .map(|(row, &d)| d.then(|| row.to_vec()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasures {
    pub n_states: usize,
    pub n_actions: usize,
    /// `μ(s)`
    pub mu_s: Array1<f64>,
    /// `μ(s,a)`
    pub mu_sa: Array2<f64>,
    /// `μ(s,a,s')`
    pub mu_sas: Array3<f64>,
    /// `μ(s,s')`
    pub mu_ss: Array2<f64>,
    /// `μ(a|s,s')`, conditioning index `s * S + s'`.
    pub inv_action: ConditionalTable,
    /// `μ(s'|s)`
    pub cond_next: ConditionalTable,
}

impl OccupancyMeasures {
    /// Builds every derived table from a state-action-next-state joint.
    pub fn from_sas(mu_sas: Array3<f64>) -> Self {
        let (ns, na, _) = mu_sas.dim();
        let mu_sa = mu_sas.sum_axis(Axis(2));
        let mu_ss = mu_sas.sum_axis(Axis(1));
        let mu_s = mu_sa.sum_axis(Axis(1));
        // [s, s', a] layout so each (s, s') is one contiguous row.
        let by_pair = mu_sas
            .view()
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((ns * ns, na))
            .expect("contiguous");
        let inv_action = ConditionalTable::from_joint(&by_pair);
        let cond_next = ConditionalTable::from_joint(&mu_ss);
        Self { n_states: ns, n_actions: na, mu_s, mu_sa, mu_sas, mu_ss, inv_action, cond_next }
    }

    /// Occupancy implied by a state marginal under `policy` and the MDP dynamics.
    pub fn from_state_marginal(mdp: &FiniteMdp, policy: &TabularPolicy, mu_s: &Array1<f64>) -> Self {
        let mu_sa = policy.probs() * &mu_s.view().insert_axis(Axis(1));
        let mut mu_sas = mdp.transition().clone();
        for ((s, a, _), v) in mu_sas.indexed_iter_mut() {
            *v *= mu_sa[[s, a]];
        }
        Self::from_sas(mu_sas)
    }

    /// `μ(s,s')` as a flat vector aligned with `inv_action` rows.
    pub fn mu_ss_flat(&self) -> Array1<f64> {
        self.mu_ss.iter().cloned().collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct View {
            mu_s: Vec<f64>,
            mu_sa: Vec<Vec<f64>>,
            mu_ss: Vec<Vec<f64>>,
            mu_sas: Vec<Vec<Vec<f64>>>,
            inv_action: Vec<Option<Vec<f64>>>,
            cond_next: Vec<Option<Vec<f64>>>,
        }
        let rows = |m: &Array2<f64>| m.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        serde_json::to_value(View {
            mu_s: self.mu_s.to_vec(),
            mu_sa: rows(&self.mu_sa),
            mu_ss: rows(&self.mu_ss),
            mu_sas: self.mu_sas.outer_iter().map(|m| rows(&m.to_owned())).collect(),
            inv_action: self.inv_action.to_rows(),
            cond_next: self.cond_next.to_rows(),
        })
        .expect("finite tables serialize")
    }
}

/// Exact occupancy measures via an LU solve of the flow equations.
pub fn compute_occupancy(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<OccupancyMeasures, OccupancyError> {
    mdp.check_policy(policy)?;
    let mu_s = solve_state_occupancy(mdp, policy)?;
    Ok(OccupancyMeasures::from_state_marginal(mdp, policy, &mu_s))
}

/// Solves `(I - γ T_π^T) μ = (1-γ) p0`.
pub fn solve_state_occupancy(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<Array1<f64>, OccupancyError> {
    let n = mdp.n_states();
    let gamma = mdp.discount();
    let kernel = mdp.state_kernel(policy);
    let a = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - gamma * kernel[[j, i]]
    });
    let b = DVector::from_iterator(n, mdp.initial_dist().iter().map(|p| (1.0 - gamma) * p));
    let x = a.clone().lu().solve(&b).ok_or(OccupancyError::Singular)?;
    let residual = (&a * &x - &b).amax();
    if !(residual <= SOLVE_RESIDUAL_TOL) {
        return Err(OccupancyError::Residual(residual));
    }
    Ok(Array1::from_iter(x.iter().cloned()))
}

/// Truncated series `(1-γ) Σ_t γ^t μ_t`, stopped once `γ^t < 1e-14`.
pub fn occupancy_power_iteration(mdp: &FiniteMdp, policy: &TabularPolicy) -> OccupancyMeasures {
    let gamma = mdp.discount();
    let kernel = mdp.state_kernel(policy);
    let mut marginal = mdp.initial_dist().clone();
    let mut acc = Array1::<f64>::zeros(mdp.n_states());
    let mut weight = 1.0;
    while weight >= 1e-14 {
        acc.scaled_add((1.0 - gamma) * weight, &marginal);
        marginal = kernel.t().dot(&marginal);
        weight *= gamma;
    }
    OccupancyMeasures::from_state_marginal(mdp, policy, &acc)
}

/// Monte-Carlo estimate from a single chain that restarts at `p0` with
/// probability `1-γ` after every step. Its stationary distribution is `μ`.
pub fn occupancy_mc_oracle(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    n_steps: usize,
    rng_seed: u64,
) -> OccupancyMeasures {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let sim = Simulator::new(mdp);
    let mut rng = seeded_rng(rng_seed);
    let mut counts = Array3::<f64>::zeros((ns, na, ns));
    let mut s = sim.reset(&mut rng);
    for _ in 0..n_steps.max(1) {
        let a = policy.sample_action(s, &mut rng);
        let next = sim.step(s, a, &mut rng);
        counts[[s, a, next]] += 1.0;
        s = if rng.random::<f64>() < 1.0 - mdp.discount() { sim.reset(&mut rng) } else { next };
    }
    let total = counts.sum();
    OccupancyMeasures::from_sas(counts / total)
}

/// `μ^π(s'|s) = Σ_a π(a|s) P(s'|s,a)`, defined for every state.
pub fn transition_conditional(mdp: &FiniteMdp, policy: &TabularPolicy) -> ConditionalTable {
    ConditionalTable::from_joint(&mdp.state_kernel(policy))
}

/// Discounted return `E[Σ γ^t r_env(s_t, a_t)] = Σ μ(s,a) r(s,a) / (1-γ)`.
pub fn expected_return(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<f64, OccupancyError> {
    let reward = mdp.reward().ok_or(OccupancyError::MissingReward)?;
    let occ = compute_occupancy(mdp, policy)?;
    Ok(return_from_occupancy(&occ, reward, mdp.discount()))
}

pub fn return_from_occupancy(occ: &OccupancyMeasures, reward: &Array2<f64>, gamma: f64) -> f64 {
    (&occ.mu_sa * reward).sum() / (1.0 - gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{gen_random_mdp, make_counterexample_mdp, random_policy};
    use ndarray::{arr1, Array3};

    fn chain(gamma: f64) -> FiniteMdp {
        let mut p = Array3::zeros((2, 1, 2));
        p[[0, 0, 1]] = 1.0;
        p[[1, 0, 1]] = 1.0;
        FiniteMdp::checked(p, arr1(&[1.0, 0.0]), gamma, Some(ndarray::arr2(&[[0.0], [1.0]]))).unwrap()
    }

    fn max_abs(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        (a - b).iter().fold(0.0f64, |m, d| m.max(d.abs()))
    }

    #[test]
    fn single_state_self_loop() {
        let p = Array3::from_elem((1, 1, 1), 1.0);
        let mdp = FiniteMdp::checked(p, arr1(&[1.0]), 0.7, None).unwrap();
        let occ = compute_occupancy(&mdp, &TabularPolicy::uniform(1, 1)).unwrap();
        assert!((occ.mu_s[0] - 1.0).abs() < 1e-15);
        let mc = occupancy_mc_oracle(&mdp, &TabularPolicy::uniform(1, 1), 17, 0);
        assert_eq!(mc.mu_s[0], 1.0);
    }

    #[test]
    fn two_state_chain_geometric_series() {
        // (1-γ) Σ γ^t at t = 0 on s0, remainder on s1.
        let occ = compute_occupancy(&chain(0.5), &TabularPolicy::uniform(2, 1)).unwrap();
        assert!(max_abs(&occ.mu_s, &arr1(&[0.5, 0.5])) < 1e-14);
    }

    #[test]
    fn two_state_chain_monte_carlo() {
        let mc = occupancy_mc_oracle(&chain(0.5), &TabularPolicy::uniform(2, 1), 1_000_000, 11);
        assert!(max_abs(&mc.mu_s, &arr1(&[0.5, 0.5])) < 0.005);
    }

    #[test]
    fn linear_solve_matches_power_iteration() {
        for seed in 0..20 {
            let mdp = gen_random_mdp(10, 3, 0.95, seed, seed % 2 == 0).unwrap();
            let pi = random_policy(10, 3, seed + 100);
            let exact = compute_occupancy(&mdp, &pi).unwrap();
            let series = occupancy_power_iteration(&mdp, &pi);
            assert!(max_abs(&exact.mu_s, &series.mu_s) < 1e-10, "seed {seed}");
            assert!((exact.mu_s.sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn counterexample_monte_carlo() {
        let ce = make_counterexample_mdp();
        let exact = compute_occupancy(&ce.mdp, &ce.expert).unwrap();
        let mc = occupancy_mc_oracle(&ce.mdp, &ce.expert, 1_000_000, 5);
        assert!(max_abs(&exact.mu_s, &mc.mu_s) < 0.005);
    }

    #[test]
    fn marginal_and_bayes_consistency() {
        let mdp = gen_random_mdp(6, 3, 0.9, 4, false).unwrap();
        let occ = compute_occupancy(&mdp, &random_policy(6, 3, 9)).unwrap();
        let sa = occ.mu_sas.sum_axis(Axis(2));
        assert!((&sa - &occ.mu_sa).iter().all(|d| d.abs() < 1e-12));
        for s in 0..6 {
            for t in 0..6 {
                let z = s * 6 + t;
                assert!(occ.inv_action.defined[z]);
                for a in 0..3 {
                    let lhs = occ.inv_action.probs[[z, a]] * occ.mu_ss[[s, t]];
                    assert!((lhs - occ.mu_sas[[s, a, t]]).abs() < 1e-15);
                }
                assert!((occ.inv_action.probs.row(z).sum() - 1.0).abs() < 1e-12);
            }
            assert!((occ.cond_next.probs.row(s).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_conditionals_stay_undefined() {
        let occ = compute_occupancy(&chain(0.5), &TabularPolicy::uniform(2, 1)).unwrap();
        // (s1 -> s0) never happens.
        assert!(!occ.inv_action.defined[2]);
        assert_eq!(occ.inv_action.get(2, 0), None);
        let json = occ.to_json();
        assert!(json["inv_action"][2].is_null());
    }

    #[test]
    fn expected_return_edge_cases() {
        let mdp = chain(0.9);
        let pi = TabularPolicy::uniform(2, 1);
        // Reward 1 from t = 1 onward: γ / (1 - γ).
        assert!((expected_return(&mdp, &pi).unwrap() - 9.0).abs() < 1e-10);

        let zero = FiniteMdp::checked(mdp.transition().clone(), mdp.initial_dist().clone(), 0.9, Some(Array2::zeros((2, 1)))).unwrap();
        assert_eq!(expected_return(&zero, &pi).unwrap(), 0.0);
        let one = FiniteMdp::checked(mdp.transition().clone(), mdp.initial_dist().clone(), 0.9, Some(Array2::ones((2, 1)))).unwrap();
        assert!((expected_return(&one, &pi).unwrap() - 10.0).abs() < 1e-10);

        let none = FiniteMdp::checked(mdp.transition().clone(), mdp.initial_dist().clone(), 0.9, None).unwrap();
        assert!(matches!(expected_return(&none, &pi), Err(OccupancyError::MissingReward)));
    }
}
