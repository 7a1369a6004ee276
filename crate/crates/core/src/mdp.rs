//! Finite MDPs, tabular softmax policies and trajectory sampling.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simplex tolerance used by validation and classification.
pub const PROB_TOL: f64 = 1e-12;

/// Mass given to every zero-probability action when a policy table with
/// exact zeros is turned into a strictly positive softmax policy.
pub const POLICY_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid MDP: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("invalid policy: {0}")]
    Policy(String),
}

/// A single broken invariant found by [`FiniteMdp::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    TransitionRowSum { state: usize, action: usize, sum: f64 },
    NegativeTransition { state: usize, action: usize, next_state: usize, value: f64 },
    InitialDistSum { sum: f64 },
    NegativeInitial { state: usize, value: f64 },
    Discount { gamma: f64 },
    NonFinite { what: &'static str },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::TransitionRowSum { state, action, sum } => {
                write!(f, "P[{state}][{action}] sums to {sum} (off by {:e})", sum - 1.0)
            }
            Violation::NegativeTransition { state, action, next_state, value } => {
                write!(f, "P[{state}][{action}][{next_state}] = {value} is negative")
            }
            Violation::InitialDistSum { sum } => {
                write!(f, "initial_dist sums to {sum} (off by {:e})", sum - 1.0)
            }
            Violation::NegativeInitial { state, value } => {
                write!(f, "initial_dist[{state}] = {value} is negative")
            }
            Violation::Discount { gamma } => write!(f, "discount {gamma} outside (0, 1)"),
            Violation::NonFinite { what } => write!(f, "{what} contains non-finite entries"),
        }
    }
}

/// Structural flags of the transition tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MdpFlags {
    pub deterministic: bool,
    pub injective: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
}

impl Transition {
    pub fn new(state: usize, action: usize, next_state: usize) -> Self {
        Self { state, action, next_state }
    }

    pub fn pair(&self) -> (usize, usize) {
        (self.state, self.next_state)
    }
}

/// Tabular MDP with dynamics `P[s][a][s']`, initial distribution and discount.
///
/// The environment reward is optional and only read by evaluation code;
/// learners interact through [`Simulator`], which never exposes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    transition: Array3<f64>,
    initial_dist: Array1<f64>,
    discount: f64,
    reward: Option<Array2<f64>>,
}

impl FiniteMdp {
    /// Builds an MDP after checking shapes only. Probabilistic invariants are
    /// reported by [`validate`](Self::validate); use [`checked`](Self::checked)
    /// to reject invalid inputs outright.
    pub fn new(
        transition: Array3<f64>,
        initial_dist: Array1<f64>,
        discount: f64,
        reward: Option<Array2<f64>>,
    ) -> Result<Self, MdpError> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(MdpError::Shape("need at least one state and one action".into()));
        }
        if n_next != n_states {
            return Err(MdpError::Shape(format!(
                "transition tensor is {n_states}x{n_actions}x{n_next}, expected last axis {n_states}"
            )));
        }
        if initial_dist.len() != n_states {
            return Err(MdpError::Shape(format!(
                "initial_dist has {} entries for {n_states} states",
                initial_dist.len()
            )));
        }
        if let Some(r) = &reward {
            if r.dim() != (n_states, n_actions) {
                return Err(MdpError::Shape(format!(
                    "reward is {:?}, expected ({n_states}, {n_actions})",
                    r.dim()
                )));
            }
        }
        Ok(Self { n_states, n_actions, transition, initial_dist, discount, reward })
    }

    pub fn checked(
        transition: Array3<f64>,
        initial_dist: Array1<f64>,
        discount: f64,
        reward: Option<Array2<f64>>,
    ) -> Result<Self, MdpError> {
        let mdp = Self::new(transition, initial_dist, discount, reward)?;
        let violations = mdp.validate();
        if violations.is_empty() {
            Ok(mdp)
        } else {
            Err(MdpError::Invalid(violations))
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// `P[s][a][s']`.
    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    pub fn prob(&self, state: usize, action: usize, next_state: usize) -> f64 {
        self.transition[[state, action, next_state]]
    }

    pub fn initial_dist(&self) -> &Array1<f64> {
        &self.initial_dist
    }

    /// Environment reward `r_env[s][a]`. Evaluation only.
    pub fn reward(&self) -> Option<&Array2<f64>> {
        self.reward.as_ref()
    }

    /// Same dynamics under a different discount.
    pub fn with_discount(&self, discount: f64) -> Self {
        Self { discount, ..self.clone() }
    }

    /// Returns every broken invariant; empty iff the MDP is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if !self.transition.iter().all(|p| p.is_finite()) {
            out.push(Violation::NonFinite { what: "transition" });
        }
        if !self.initial_dist.iter().all(|p| p.is_finite()) {
            out.push(Violation::NonFinite { what: "initial_dist" });
        }
        if let Some(r) = &self.reward {
            if !r.iter().all(|v| v.is_finite()) {
                out.push(Violation::NonFinite { what: "reward" });
            }
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.transition.slice(ndarray::s![s, a, ..]);
                for (t, &p) in row.iter().enumerate() {
                    if p < 0.0 {
                        out.push(Violation::NegativeTransition {
                            state: s,
                            action: a,
                            next_state: t,
                            value: p,
                        });
                    }
                }
                let sum = row.sum();
                if (sum - 1.0).abs() > PROB_TOL || !sum.is_finite() {
                    out.push(Violation::TransitionRowSum { state: s, action: a, sum });
                }
            }
        }
        for (s, &p) in self.initial_dist.iter().enumerate() {
            if p < 0.0 {
                out.push(Violation::NegativeInitial { state: s, value: p });
            }
        }
        let sum = self.initial_dist.sum();
        if (sum - 1.0).abs() > PROB_TOL || !sum.is_finite() {
            out.push(Violation::InitialDistSum { sum });
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            out.push(Violation::Discount { gamma: self.discount });
        }
        out
    }

    /// Determinism and injectivity of the dynamics.
    pub fn classify(&self) -> MdpFlags {
        let mut deterministic = true;
        let mut injective = true;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.transition.slice(ndarray::s![s, a, ..]);
                let hot = row.iter().filter(|&&p| p > PROB_TOL).count();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hot != 1 || max < 1.0 - PROB_TOL {
                    deterministic = false;
                }
            }
            for t in 0..self.n_states {
                let causes = (0..self.n_actions)
                    .filter(|&a| self.transition[[s, a, t]] > PROB_TOL)
                    .count();
                if causes > 1 {
                    injective = false;
                }
            }
        }
        MdpFlags { deterministic, injective }
    }

    /// `T_π[s][s'] = Σ_a π(a|s) P(s'|s,a)`.
    pub fn state_kernel(&self, policy: &TabularPolicy) -> Array2<f64> {
        let probs = policy.probs();
        let mut kernel = Array2::zeros((self.n_states, self.n_states));
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let w = probs[[s, a]];
                if w == 0.0 {
                    continue;
                }
                let row = self.transition.slice(ndarray::s![s, a, ..]);
                kernel.row_mut(s).scaled_add(w, &row);
            }
        }
        kernel
    }

    pub fn check_policy(&self, policy: &TabularPolicy) -> Result<(), MdpError> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(MdpError::Shape(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }
}

/// On-disk JSON layout of an MDP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub p0: Vec<f64>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<Vec<Vec<f64>>>,
}

impl From<FiniteMdp> for MdpDocument {
    fn from(mdp: FiniteMdp) -> Self {
        let p = mdp
            .transition
            .outer_iter()
            .map(|sa| sa.outer_iter().map(|row| row.to_vec()).collect())
            .collect();
        Self {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            gamma: mdp.discount,
            p0: mdp.initial_dist.to_vec(),
            p,
            reward: mdp.reward.map(|r| r.outer_iter().map(|row| row.to_vec()).collect()),
        }
    }
}

impl TryFrom<MdpDocument> for FiniteMdp {
    type Error = MdpError;

    fn try_from(doc: MdpDocument) -> Result<Self, Self::Error> {
        let (ns, na) = (doc.n_states, doc.n_actions);
        if doc.p.len() != ns || doc.p.iter().any(|sa| sa.len() != na || sa.iter().any(|r| r.len() != ns)) {
            return Err(MdpError::Shape(format!("\"P\" is not {ns}x{na}x{ns}")));
        }
        let flat: Vec<f64> = doc.p.into_iter().flatten().flatten().collect();
        let transition = Array3::from_shape_vec((ns, na, ns), flat)
            .map_err(|e| MdpError::Shape(e.to_string()))?;
        let reward = match doc.reward {
            Some(rows) => {
                if rows.len() != ns || rows.iter().any(|r| r.len() != na) {
                    return Err(MdpError::Shape(format!("\"reward\" is not {ns}x{na}")));
                }
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                Some(Array2::from_shape_vec((ns, na), flat).map_err(|e| MdpError::Shape(e.to_string()))?)
            }
            None => None,
        };
        FiniteMdp::new(transition, Array1::from(doc.p0), doc.gamma, reward)
    }
}

/// Stochastic policy `π(a|s) = softmax(logits[s])`. Always strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyDocument", into = "PolicyDocument")]
pub struct TabularPolicy {
    logits: Array2<f64>,
    probs: Array2<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub logits: Vec<Vec<f64>>,
}

impl From<TabularPolicy> for PolicyDocument {
    fn from(p: TabularPolicy) -> Self {
        Self { logits: p.logits.outer_iter().map(|r| r.to_vec()).collect() }
    }
}

impl TryFrom<PolicyDocument> for TabularPolicy {
    type Error = MdpError;

    fn try_from(doc: PolicyDocument) -> Result<Self, Self::Error> {
        let ns = doc.logits.len();
        let na = doc.logits.first().map_or(0, |r| r.len());
        if ns == 0 || na == 0 || doc.logits.iter().any(|r| r.len() != na) {
            return Err(MdpError::Shape("policy logits must be a non-empty rectangular matrix".into()));
        }
        let flat: Vec<f64> = doc.logits.into_iter().flatten().collect();
        TabularPolicy::from_logits(Array2::from_shape_vec((ns, na), flat).expect("rectangular"))
    }
}

impl TabularPolicy {
    pub fn from_logits(logits: Array2<f64>) -> Result<Self, MdpError> {
        if logits.nrows() == 0 || logits.ncols() == 0 {
            return Err(MdpError::Shape("empty policy".into()));
        }
        if !logits.iter().all(|l| l.is_finite()) {
            return Err(MdpError::Policy("non-finite logit".into()));
        }
        let probs = softmax_rows(&logits);
        Ok(Self { logits, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self::from_logits(Array2::zeros((n_states, n_actions))).expect("zero logits are valid")
    }

    /// Policy with the given strictly positive probabilities (logits = ln p).
    pub fn from_probs(probs: &Array2<f64>) -> Result<Self, MdpError> {
        for (s, row) in probs.outer_iter().enumerate() {
            if row.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
                return Err(MdpError::Policy(format!("row {s} is not strictly positive")));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(MdpError::Policy(format!("row {s} sums to {sum}")));
            }
        }
        Self::from_logits(probs.mapv(f64::ln))
    }

    /// Turns a probability table that may contain exact zeros into a strictly
    /// positive policy: every zero entry receives `floor`, and the remaining
    /// `1 - k·floor` mass is split over the nonzero entries in proportion to
    /// their original weights.
    pub fn from_probs_with_floor(probs: &Array2<f64>, floor: f64) -> Result<Self, MdpError> {
        let mut out = probs.clone();
        for (s, mut row) in out.outer_iter_mut().enumerate() {
            let sum = row.sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(MdpError::Policy(format!("row {s} is not a distribution")));
            }
            let zeros = row.iter().filter(|&&p| p == 0.0).count();
            if zeros == row.len() {
                return Err(MdpError::Policy(format!("row {s} has no mass")));
            }
            let keep = 1.0 - zeros as f64 * floor;
            if keep <= 0.0 {
                return Err(MdpError::Policy(format!("floor {floor} too large for row {s}")));
            }
            row.mapv_inplace(|p| if p == 0.0 { floor } else { p / sum * keep });
        }
        Self::from_probs(&out)
    }

    /// Near-deterministic policy taking `actions[s]` with mass `1 - (A-1)·floor`.
    pub fn deterministic(actions: &[usize], n_actions: usize, floor: f64) -> Result<Self, MdpError> {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(MdpError::Shape(format!("action {a} out of range at state {s}")));
            }
            probs[[s, a]] = 1.0;
        }
        Self::from_probs_with_floor(&probs, floor)
    }

    pub fn n_states(&self) -> usize {
        self.logits.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.logits.ncols()
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    /// `π(a|s)` as an `S x A` matrix.
    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[[state, action]]
    }

    pub fn set_logits(&mut self, logits: Array2<f64>) -> Result<(), MdpError> {
        *self = Self::from_logits(logits)?;
        Ok(())
    }

    /// `logits += step * direction`.
    pub fn step_logits(&mut self, step: f64, direction: &Array2<f64>) {
        self.logits.scaled_add(step, direction);
        self.probs = softmax_rows(&self.logits);
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        sample_categorical(self.probs.row(state), rng)
    }

    /// `V(s) = Σ_a π(a|s) Q(s,a)`.
    pub fn expected_values(&self, q: &Array2<f64>) -> Array1<f64> {
        (&self.probs * q).sum_axis(Axis(1))
    }

    /// Chain rule through the row softmax: maps `∂J/∂π(a|s)` to `∂J/∂logit(s,a)`.
    pub fn softmax_backward(&self, grad_probs: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(self.logits.raw_dim());
        for s in 0..self.n_states() {
            let p = self.probs.row(s);
            let g = grad_probs.row(s);
            let mean = p.dot(&g);
            for a in 0..self.n_actions() {
                out[[s, a]] = p[a] * (g[a] - mean);
            }
        }
        out
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|l| (l - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Draws an index from a probability vector. Rounding slack in the tail is
/// absorbed by the last index with positive mass.
pub fn sample_categorical<R: Rng + ?Sized>(probs: ArrayView1<'_, f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reward-free view of an MDP used by learners to interact with the dynamics.
#[derive(Debug, Clone, Copy)]
pub struct Simulator<'a> {
    mdp: &'a FiniteMdp,
}

impl<'a> Simulator<'a> {
    pub fn new(mdp: &'a FiniteMdp) -> Self {
        Self { mdp }
    }

    pub fn n_states(&self) -> usize {
        self.mdp.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.mdp.n_actions
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(self.mdp.initial_dist.view(), rng)
    }

    pub fn step<R: Rng + ?Sized>(&self, state: usize, action: usize, rng: &mut R) -> usize {
        sample_categorical(self.mdp.transition.slice(ndarray::s![state, action, ..]), rng)
    }
}

/// Rolls out `horizon` steps from `s0 ~ p0`.
pub fn sample_trajectory(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    horizon: usize,
    rng_seed: u64,
) -> Vec<Transition> {
    let mut rng = seeded_rng(rng_seed);
    rollout(mdp, policy, horizon, &mut rng)
}

pub fn rollout<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    horizon: usize,
    rng: &mut R,
) -> Vec<Transition> {
    let sim = Simulator::new(mdp);
    let mut s = sim.reset(rng);
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = policy.sample_action(s, rng);
        let next = sim.step(s, a, rng);
        out.push(Transition::new(s, a, next));
        s = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array3};

    fn two_state_chain() -> FiniteMdp {
        // s0 -> s1 under either action, s1 absorbing.
        let mut p = Array3::zeros((2, 2, 2));
        p[[0, 0, 1]] = 1.0;
        p[[0, 1, 1]] = 1.0;
        p[[1, 0, 1]] = 1.0;
        p[[1, 1, 1]] = 1.0;
        FiniteMdp::checked(p, arr1(&[1.0, 0.0]), 0.5, None).unwrap()
    }

    #[test]
    fn well_formed_mdp_has_no_violations() {
        assert!(two_state_chain().validate().is_empty());
    }

    #[test]
    fn short_row_is_reported_with_index() {
        let mut p = two_state_chain().transition().clone();
        p[[0, 1, 1]] = 0.9;
        let mdp = FiniteMdp::new(p, arr1(&[1.0, 0.0]), 0.5, None).unwrap();
        let v = mdp.validate();
        assert_eq!(v.len(), 1);
        match &v[0] {
            Violation::TransitionRowSum { state, action, sum } => {
                assert_eq!((*state, *action), (0, 1));
                assert!((sum - 0.9).abs() < 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_initial_dist_is_reported() {
        let p = two_state_chain().transition().clone();
        let mdp = FiniteMdp::new(p, arr1(&[0.5, 0.6]), 0.5, None).unwrap();
        let v = mdp.validate();
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::InitialDistSum { .. }));
    }

    #[test]
    fn discount_bounds() {
        let p = two_state_chain().transition().clone();
        let mdp = FiniteMdp::new(p, arr1(&[1.0, 0.0]), 1.0, None).unwrap();
        assert_eq!(mdp.validate(), vec![Violation::Discount { gamma: 1.0 }]);
        assert!(FiniteMdp::checked(mdp.transition().clone(), arr1(&[1.0, 0.0]), 0.0, None).is_err());
    }

    #[test]
    fn classify_self_loop_and_stochastic() {
        let p = Array3::from_elem((1, 1, 1), 1.0);
        let mdp = FiniteMdp::checked(p, arr1(&[1.0]), 0.9, None).unwrap();
        assert_eq!(mdp.classify(), MdpFlags { deterministic: true, injective: true });

        let mut p = Array3::zeros((2, 1, 2));
        p[[0, 0, 0]] = 0.5;
        p[[0, 0, 1]] = 0.5;
        p[[1, 0, 1]] = 1.0;
        let mdp = FiniteMdp::checked(p, arr1(&[1.0, 0.0]), 0.9, None).unwrap();
        assert!(!mdp.classify().deterministic);
    }

    #[test]
    fn shape_errors() {
        assert!(FiniteMdp::new(Array3::zeros((2, 2, 3)), arr1(&[1.0, 0.0]), 0.5, None).is_err());
        assert!(FiniteMdp::new(Array3::zeros((2, 2, 2)), arr1(&[1.0]), 0.5, None).is_err());
    }

    #[test]
    fn floor_rule_redistributes_mass() {
        let probs = arr2(&[[0.5, 0.0, 0.5, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        let pi = TabularPolicy::from_probs_with_floor(&probs, 1e-6).unwrap();
        let p = pi.probs();
        assert!((p[[0, 0]] - (1.0 - 2e-6) / 2.0).abs() < 1e-15);
        assert!((p[[0, 1]] - 1e-6).abs() < 1e-15);
        assert!((p[[1, 1]] - (1.0 - 3e-6)).abs() < 1e-15);
        for row in p.outer_iter() {
            assert!((row.sum() - 1.0).abs() < PROB_TOL);
        }
    }

    #[test]
    fn deterministic_chain_trajectory() {
        let mdp = two_state_chain();
        let pi = TabularPolicy::uniform(2, 2);
        let traj = sample_trajectory(&mdp, &pi, 3, 7);
        let states: Vec<_> = traj.iter().map(|t| (t.state, t.next_state)).collect();
        assert_eq!(states, vec![(0, 1), (1, 1), (1, 1)]);
        assert_eq!(traj, sample_trajectory(&mdp, &pi, 3, 7));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let logits = arr2(&[[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]]);
        let pi = TabularPolicy::from_logits(logits.clone()).unwrap();
        let weights = arr2(&[[1.0, 2.0, -0.5], [0.3, -0.7, 1.1]]);
        let f = |l: &Array2<f64>| (softmax_rows(l) * &weights).sum();
        let grad = pi.softmax_backward(&weights);
        let h = 1e-6;
        for s in 0..2 {
            for a in 0..3 {
                let mut lp = logits.clone();
                lp[[s, a]] += h;
                let mut lm = logits.clone();
                lm[[s, a]] -= h;
                let fd = (f(&lp) - f(&lm)) / (2.0 * h);
                assert!((fd - grad[[s, a]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut p = Array3::zeros((2, 1, 2));
        p[[0, 0, 0]] = 0.1 + 0.2;
        p[[0, 0, 1]] = 1.0 - (0.1 + 0.2);
        p[[1, 0, 1]] = 1.0;
        let reward = arr2(&[[std::f64::consts::PI], [1e-300]]);
        let mdp = FiniteMdp::new(p, arr1(&[1.0 / 3.0, 2.0 / 3.0]), 0.99, Some(reward)).unwrap();
        let json = serde_json::to_string(&mdp).unwrap();
        let back: FiniteMdp = serde_json::from_str(&json).unwrap();
        assert_eq!(mdp, back);
        assert!(json.contains("\"P\""));
        assert!(json.contains("\"p0\""));
    }
}
