//! Agent replay buffer and state-only expert data.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::{rollout, seeded_rng, FiniteMdp, TabularPolicy, Transition};

/// FIFO buffer of agent transitions with running counts of the empirical
/// off-policy distribution `μ_R`.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    n_states: usize,
    n_actions: usize,
    capacity: usize,
    transitions: VecDeque<Transition>,
    counts_sas: Array3<u64>,
}

impl ReplayBuffer {
    pub fn new(n_states: usize, n_actions: usize, capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            n_states,
            n_actions,
            capacity,
            transitions: VecDeque::with_capacity(capacity.min(1 << 20)),
            counts_sas: Array3::zeros((n_states, n_actions, n_states)),
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Appends a transition, evicting the oldest one when full.
    pub fn push(&mut self, t: Transition) {
        if self.transitions.len() == self.capacity {
            let old = self.transitions.pop_front().expect("non-empty at capacity");
            self.counts_sas[[old.state, old.action, old.next_state]] -= 1;
        }
        self.counts_sas[[t.state, t.action, t.next_state]] += 1;
        self.transitions.push_back(t);
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Transition>) {
        for t in ts {
            self.push(t);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter()
    }

    pub fn get(&self, i: usize) -> Transition {
        self.transitions[i]
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Transition> {
        if self.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| self.transitions[rng.random_range(0..self.len())]).collect()
    }

    pub fn counts_sas(&self) -> &Array3<u64> {
        &self.counts_sas
    }

    /// Recount from the stored transitions; must always equal the running counts.
    pub fn recount(&self) -> Array3<u64> {
        let mut c = Array3::zeros((self.n_states, self.n_actions, self.n_states));
        for t in &self.transitions {
            c[[t.state, t.action, t.next_state]] += 1;
        }
        c
    }

    /// Empirical `μ_R(s,a,s')`.
    pub fn mu_sas(&self) -> Array3<f64> {
        let n = self.len().max(1) as f64;
        self.counts_sas.mapv(|c| c as f64 / n)
    }

    /// Empirical `μ_R(s,a)`.
    pub fn mu_sa(&self) -> Array2<f64> {
        self.mu_sas().sum_axis(ndarray::Axis(2))
    }

    /// Empirical `μ_R(s,s')`.
    pub fn mu_ss(&self) -> Array2<f64> {
        self.mu_sas().sum_axis(ndarray::Axis(1))
    }

    /// Empirical state marginal `μ_R(s)`.
    pub fn mu_s(&self) -> Array1<f64> {
        self.mu_sa().sum_axis(ndarray::Axis(1))
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.transitions.iter().map(Transition::pair).collect()
    }
}

/// Expert observations: state sequences only. There is no field that could
/// hold an action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertDataset {
    pub n_states: usize,
    pub trajectories: Vec<Vec<usize>>,
}

impl ExpertDataset {
    pub fn from_state_sequences(n_states: usize, trajectories: Vec<Vec<usize>>) -> Self {
        Self { n_states, trajectories }
    }

    /// Rolls out the expert and keeps only the visited states.
    pub fn from_rollouts(mdp: &FiniteMdp, expert: &TabularPolicy, n_trajectories: usize, horizon: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let trajectories = (0..n_trajectories)
            .map(|_| {
                let steps = rollout(mdp, expert, horizon, &mut rng);
                let mut states: Vec<usize> = steps.iter().map(|t| t.state).collect();
                if let Some(last) = steps.last() {
                    states.push(last.next_state);
                }
                states
            })
            .collect();
        Self { n_states: mdp.n_states(), trajectories }
    }

    /// Consecutive `(s, s')` pairs from every trajectory.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.trajectories
            .iter()
            .flat_map(|traj| traj.windows(2).map(|w| (w[0], w[1])))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs().is_empty()
    }

    /// Empirical `μ^E(s,s')` from pair frequencies.
    pub fn mu_ss(&self) -> Array2<f64> {
        let pairs = self.pairs();
        let mut m = Array2::zeros((self.n_states, self.n_states));
        for &(s, t) in &pairs {
            m[[s, t]] += 1.0;
        }
        m / pairs.len().max(1) as f64
    }
}
