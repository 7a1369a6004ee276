//! Value iteration on the environment reward. Used to derive experts and as
//! an evaluation oracle; never called by learners.

use ndarray::{Array1, Array2};

use crate::mdp::{FiniteMdp, MdpError, TabularPolicy, POLICY_FLOOR};

#[derive(Debug, Clone)]
pub struct ValueIteration {
    pub values: Array1<f64>,
    pub q: Array2<f64>,
    pub iterations: usize,
}

/// Runs Bellman optimality backups until the sup-norm change drops below `tol`.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64, max_iters: usize) -> Result<ValueIteration, MdpError> {
    let reward = mdp
        .reward()
        .ok_or_else(|| MdpError::Shape("value iteration needs an environment reward".into()))?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.discount();
    let p = mdp.transition();
    let mut v = Array1::<f64>::zeros(ns);
    let mut q = Array2::<f64>::zeros((ns, na));
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        for s in 0..ns {
            for a in 0..na {
                let mut next = 0.0;
                for t in 0..ns {
                    next += p[[s, a, t]] * v[t];
                }
                q[[s, a]] = reward[[s, a]] + gamma * next;
            }
        }
        let new_v = q.map_axis(ndarray::Axis(1), |row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        let delta = (&new_v - &v).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        v = new_v;
        if delta < tol {
            break;
        }
    }
    Ok(ValueIteration { values: v, q, iterations })
}

/// Greedy actions, ties broken toward the lowest action index.
pub fn greedy_actions(q: &Array2<f64>, tie_tol: f64) -> Vec<usize> {
    q.outer_iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter().position(|&v| v >= max - tie_tol).unwrap_or(0)
        })
        .collect()
}

/// Floored optimal policy from value iteration on the environment reward.
pub fn optimal_expert(mdp: &FiniteMdp) -> Result<TabularPolicy, MdpError> {
    let vi = value_iteration(mdp, 1e-12, 100_000)?;
    let actions = greedy_actions(&vi.q, 1e-9);
    TabularPolicy::deterministic(&actions, mdp.n_actions(), POLICY_FLOOR)
}
