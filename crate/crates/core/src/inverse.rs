//! Tabular inverse-action model `P_I(a|s,s')`, the policy regularizer built
//! on it, and the check that the buffer-derived policy is never beaten on
//! forward transition KL in deterministic MDPs.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ReplayBuffer;
use crate::divergence::{forward_transition_kl, DivergenceError, DivergenceReport};
use crate::envs::random_policy;
use crate::mdp::{seeded_rng, FiniteMdp, MdpError, TabularPolicy, Transition};
use crate::occupancy::{transition_conditional, OccupancyMeasures};

/// Default Dirichlet smoothing.
pub const DEFAULT_ALPHA: f64 = 0.1;

/// Floor used to turn the buffer-derived policy into finite logits. Small
/// enough that it never shows up at the tolerances the checks use.
const MIXTURE_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum InverseError {
    #[error("the MDP is not deterministic")]
    NotDeterministic,
    #[error("buffer has no mass on expert pair ({0}, {1})")]
    SupportCoverage(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
}

/// Counts `n(s, s', a)` with Dirichlet smoothing `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "InverseModelDocument", try_from = "InverseModelDocument")]
pub struct InverseModel {
    alpha: f64,
    counts: Array3<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InverseModelDocument {
    pub alpha: f64,
    /// `counts[s][s'][a]`
    pub counts: Vec<Vec<Vec<u64>>>,
}

impl From<InverseModel> for InverseModelDocument {
    fn from(m: InverseModel) -> Self {
        let counts = m
            .counts
            .outer_iter()
            .map(|plane| plane.outer_iter().map(|row| row.to_vec()).collect())
            .collect();
        Self { alpha: m.alpha, counts }
    }
}

impl TryFrom<InverseModelDocument> for InverseModel {
    type Error = InverseError;

    fn try_from(doc: InverseModelDocument) -> Result<Self, Self::Error> {
        let ns = doc.counts.len();
        let na = doc.counts.first().and_then(|p| p.first()).map_or(0, Vec::len);
        if ns == 0 || na == 0 {
            return Err(InverseError::Shape("empty count tensor".into()));
        }
        let mut flat = Vec::with_capacity(ns * ns * na);
        for plane in &doc.counts {
            if plane.len() != ns {
                return Err(InverseError::Shape("count tensor is not S x S x A".into()));
            }
            for row in plane {
                if row.len() != na {
                    return Err(InverseError::Shape("count tensor is not S x S x A".into()));
                }
                flat.extend_from_slice(row);
            }
        }
        let counts = Array3::from_shape_vec((ns, ns, na), flat).expect("checked shape");
        Ok(Self { alpha: doc.alpha, counts })
    }
}

impl InverseModel {
    pub fn empty(n_states: usize, n_actions: usize, alpha: f64) -> Self {
        Self { alpha, counts: Array3::zeros((n_states, n_states, n_actions)) }
    }

    pub fn n_states(&self) -> usize {
        self.counts.shape()[0]
    }

    pub fn n_actions(&self) -> usize {
        self.counts.shape()[2]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn counts(&self) -> &Array3<u64> {
        &self.counts
    }

    pub fn observe(&mut self, t: Transition) {
        self.counts[[t.state, t.next_state, t.action]] += 1;
    }

    pub fn total(&self, s: usize, next: usize) -> u64 {
        self.counts.slice(ndarray::s![s, next, ..]).sum()
    }

    pub fn observed(&self, s: usize, next: usize) -> bool {
        self.total(s, next) > 0
    }

    /// `P_I(·|s,s')`, or `None` for a pair never seen.
    pub fn probs(&self, s: usize, next: usize) -> Option<Array1<f64>> {
        let total = self.total(s, next);
        if total == 0 {
            return None;
        }
        let denom = total as f64 + self.alpha * self.n_actions() as f64;
        Some(self.counts.slice(ndarray::s![s, next, ..]).mapv(|c| (c as f64 + self.alpha) / denom))
    }

    /// Empirical log-likelihood `mean log P_I(a|s,s')` over the observed transitions.
    pub fn log_likelihood(&self) -> f64 {
        let mut total = 0.0;
        let mut n = 0u64;
        for s in 0..self.n_states() {
            for t in 0..self.n_states() {
                if let Some(p) = self.probs(s, t) {
                    for (a, &c) in self.counts.slice(ndarray::s![s, t, ..]).iter().enumerate() {
                        if c > 0 {
                            total += c as f64 * p[a].ln();
                            n += c;
                        }
                    }
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }
}

/// Smoothed maximum-likelihood fit on the buffer contents.
pub fn fit_inverse_model(buffer: &ReplayBuffer, alpha: f64) -> InverseModel {
    if buffer.is_empty() {
        log::warn!("fitting inverse model on an empty buffer; every pair is unobserved");
    }
    fit_inverse_model_from(buffer.n_states(), buffer.n_actions(), alpha, buffer.iter().copied())
}

pub fn fit_inverse_model_from(
    n_states: usize,
    n_actions: usize,
    alpha: f64,
    transitions: impl IntoIterator<Item = Transition>,
) -> InverseModel {
    let mut model = InverseModel::empty(n_states, n_actions, alpha);
    for t in transitions {
        model.observe(t);
    }
    model
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerEval {
    /// Mean of `Σ_a P_I(a|s,s') log π(a|s)` over the used pairs.
    pub value: f64,
    /// Gradient with respect to the policy logits.
    pub gradient: Array2<f64>,
    pub used: usize,
    /// Expert pairs the inverse model has never observed.
    pub skipped: usize,
}

/// Value and exact logit gradient of the inverse-model regularizer on expert pairs.
pub fn regularizer_value_and_gradient(
    policy: &TabularPolicy,
    expert_pairs: &[(usize, usize)],
    model: &InverseModel,
) -> RegularizerEval {
    let mut value = 0.0;
    let mut gradient = Array2::zeros(policy.logits().raw_dim());
    let (mut used, mut skipped) = (0usize, 0usize);
    for &(s, next) in expert_pairs {
        let Some(target) = model.probs(s, next) else {
            skipped += 1;
            continue;
        };
        used += 1;
        let pi = policy.probs().row(s);
        for a in 0..policy.n_actions() {
            value += target[a] * pi[a].ln();
            // target sums to one, so d/dlogit_b Σ_a target_a log π_a = target_b - π_b
            gradient[[s, a]] += target[a] - pi[a];
        }
    }
    if used > 0 {
        value /= used as f64;
        gradient /= used as f64;
    }
    RegularizerEval { value, gradient, used, skipped }
}

/// `π̃(·|s) = Σ_{s''} μ^E(s''|s) μ_R(·|s,s'')`: at every expert pair, act like
/// the buffer did when it made that move. States the expert never visits get
/// the uniform policy.
pub fn inverse_model_policy(expert: &OccupancyMeasures, buffer: &OccupancyMeasures) -> Result<TabularPolicy, InverseError> {
    let (ns, na) = (expert.n_states, expert.n_actions);
    if buffer.n_states != ns || buffer.n_actions != na {
        return Err(InverseError::Shape("expert and buffer occupancies differ in shape".into()));
    }
    let mut probs = Array2::from_elem((ns, na), 1.0 / na as f64);
    for s in 0..ns {
        if !expert.cond_next.defined[s] {
            continue;
        }
        let mut row = Array1::<f64>::zeros(na);
        for t in 0..ns {
            let w = expert.cond_next.probs[[s, t]];
            if w <= 0.0 {
                continue;
            }
            let z = s * ns + t;
            if !buffer.inv_action.defined[z] {
                return Err(InverseError::SupportCoverage(s, t));
            }
            row.scaled_add(w, &buffer.inv_action.probs.row(z));
        }
        row /= row.sum();
        probs.row_mut(s).assign(&row);
    }
    Ok(TabularPolicy::from_probs_with_floor(&probs, MIXTURE_FLOOR)?)
}

/// Builds `π̃` and checks that none of `trials` random policies reaches a
/// lower forward transition KL. The report compares `π̃`'s KL to the best
/// challenger.
pub fn check_inverse_model_policy_optimality(
    mdp: &FiniteMdp,
    expert: &OccupancyMeasures,
    buffer: &OccupancyMeasures,
    trials: usize,
    seed: u64,
) -> Result<DivergenceReport, InverseError> {
    if !mdp.classify().deterministic {
        return Err(InverseError::NotDeterministic);
    }
    let tilde = inverse_model_policy(expert, buffer)?;
    let own = forward_transition_kl(expert, &transition_conditional(mdp, &tilde))?;
    let mut rng = seeded_rng(seed);
    let mut best = f64::INFINITY;
    for _ in 0..trials {
        let challenger = random_policy(mdp.n_states(), mdp.n_actions(), rng.random());
        let kl = forward_transition_kl(expert, &transition_conditional(mdp, &challenger))?;
        best = best.min(kl);
    }
    Ok(DivergenceReport::at_most("inverse_model_policy_never_beaten", own, best, crate::divergence::BOUND_SLACK))
}
