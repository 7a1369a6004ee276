//! Sampled losses, their exact gradients, and one descent-ascent step.
//!
//! Both losses are written as functions of a weighted [`Batch`] so the same
//! code serves minibatches and the whole buffer. `q_loss` keeps the backup
//! on the target table; `pi_loss` uses the current table and clips the
//! residual at zero, so its gradient is the clipped one.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ReplayBuffer;
use crate::density_ratio::SyntheticReward;
use crate::divergence::FDivergenceSpec;
use crate::inverse::{regularizer_value_and_gradient, InverseModel};
use crate::mdp::{TabularPolicy, Transition};

use super::QTable;

/// Weighted transitions plus weighted virtual initial states. Weights in each
/// part sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub transitions: Vec<(Transition, f64)>,
    pub initial_states: Vec<(usize, f64)>,
}

impl Batch {
    /// Uniform minibatch; the sampled states double as initial states.
    pub fn sample<R: Rng + ?Sized>(buffer: &ReplayBuffer, n: usize, rng: &mut R) -> Self {
        Self::from_transitions(&buffer.sample(n, rng))
    }

    pub fn from_transitions(ts: &[Transition]) -> Self {
        let mut trans = BTreeMap::new();
        let mut starts = BTreeMap::new();
        for t in ts {
            *trans.entry((t.state, t.action, t.next_state)).or_insert(0usize) += 1;
            *starts.entry(t.state).or_insert(0usize) += 1;
        }
        let n = ts.len().max(1) as f64;
        Self {
            transitions: trans.into_iter().map(|((s, a, t), c)| (Transition::new(s, a, t), c as f64 / n)).collect(),
            initial_states: starts.into_iter().map(|(s, c)| (s, c as f64 / n)).collect(),
        }
    }

    /// The whole buffer, weighted by its empirical distribution.
    pub fn full(buffer: &ReplayBuffer) -> Self {
        let n = buffer.len().max(1) as f64;
        let mut transitions = Vec::new();
        let mut starts = vec![0u64; buffer.n_states()];
        for ((s, a, t), &c) in buffer.counts_sas().indexed_iter() {
            if c > 0 {
                transitions.push((Transition::new(s, a, t), c as f64 / n));
                starts[s] += c;
            }
        }
        let initial_states = starts.into_iter().enumerate().filter(|&(_, c)| c > 0).map(|(s, c)| (s, c as f64 / n)).collect();
        Self { transitions, initial_states }
    }

    /// Replaces the virtual initial states with an explicit distribution.
    pub fn with_initial_distribution(mut self, p0: &Array1<f64>) -> Self {
        self.initial_states = p0.iter().enumerate().filter(|&(_, &p)| p > 0.0).map(|(s, &p)| (s, p)).collect();
        self
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaddleConfig {
    pub gamma: f64,
    pub q_learning_rate: f64,
    pub pi_learning_rate: f64,
    /// Weight of the inverse-model regularizer in the policy step.
    pub lambda: f64,
    pub f_spec: FDivergenceSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SaddleStats {
    pub q_loss: f64,
    pub pi_loss: f64,
    pub reg_value: Option<f64>,
    pub reg_skipped: usize,
}

fn sample_backup(values: &Array1<f64>, reward: &SyntheticReward, t: &Transition, gamma: f64) -> f64 {
    reward.get(t.state, t.next_state) + gamma * values[t.next_state]
}

/// `(1-γ) E_{d0,π}[Q] + E_batch[f*(r + γ V_target(s') - Q(s,a))]`.
pub fn q_loss(
    q: &Array2<f64>,
    target: &Array2<f64>,
    policy: &TabularPolicy,
    reward: &SyntheticReward,
    batch: &Batch,
    gamma: f64,
    spec: &FDivergenceSpec,
) -> f64 {
    let v = policy.expected_values(q);
    let vt = policy.expected_values(target);
    let init: f64 = batch.initial_states.iter().map(|&(s, w)| w * v[s]).sum();
    let pen: f64 = batch
        .transitions
        .iter()
        .map(|(t, w)| w * spec.conjugate(sample_backup(&vt, reward, t, gamma) - q[[t.state, t.action]]))
        .sum();
    (1.0 - gamma) * init + pen
}

/// Gradient of [`q_loss`] with respect to `q`, the target held fixed.
pub fn q_loss_gradient(
    q: &Array2<f64>,
    target: &Array2<f64>,
    policy: &TabularPolicy,
    reward: &SyntheticReward,
    batch: &Batch,
    gamma: f64,
    spec: &FDivergenceSpec,
) -> Array2<f64> {
    let vt = policy.expected_values(target);
    let mut g = Array2::zeros(q.raw_dim());
    for &(s, w) in &batch.initial_states {
        g.row_mut(s).scaled_add((1.0 - gamma) * w, &policy.probs().row(s));
    }
    for (t, w) in &batch.transitions {
        let x = sample_backup(&vt, reward, t, gamma) - q[[t.state, t.action]];
        g[[t.state, t.action]] -= w * spec.conjugate_derivative(x);
    }
    g
}

/// `(1-γ) E_{d0,π}[Q] + E_batch[f*(max(r + γ V(s') - Q(s,a), 0))]` as a
/// function of the policy.
pub fn pi_loss(
    policy: &TabularPolicy,
    q: &Array2<f64>,
    reward: &SyntheticReward,
    batch: &Batch,
    gamma: f64,
    spec: &FDivergenceSpec,
) -> f64 {
    let v = policy.expected_values(q);
    let init: f64 = batch.initial_states.iter().map(|&(s, w)| w * v[s]).sum();
    let pen: f64 = batch
        .transitions
        .iter()
        .map(|(t, w)| w * spec.conjugate((sample_backup(&v, reward, t, gamma) - q[[t.state, t.action]]).max(0.0)))
        .sum();
    (1.0 - gamma) * init + pen
}

/// Per-state weight `(1-γ) E_{d0,π}[Q]` and the clipped residual put on
/// `V(s)`, i.e. `∂ pi_loss / ∂V(s)`.
fn value_sensitivity(policy: &TabularPolicy, q: &Array2<f64>, reward: &SyntheticReward, batch: &Batch, gamma: f64, spec: &FDivergenceSpec) -> Array1<f64> {
    let v = policy.expected_values(q);
    let mut c = Array1::zeros(policy.n_states());
    for &(s, w) in &batch.initial_states {
        c[s] += (1.0 - gamma) * w;
    }
    for (t, w) in &batch.transitions {
        let x = (sample_backup(&v, reward, t, gamma) - q[[t.state, t.action]]).max(0.0);
        c[t.next_state] += w * gamma * spec.conjugate_derivative(x);
    }
    c
}

/// Gradient of [`pi_loss`] with respect to the policy logits.
pub fn pi_loss_gradient(
    policy: &TabularPolicy,
    q: &Array2<f64>,
    reward: &SyntheticReward,
    batch: &Batch,
    gamma: f64,
    spec: &FDivergenceSpec,
) -> Array2<f64> {
    let c = value_sensitivity(policy, q, reward, batch, gamma, spec);
    let grad_probs = q * &c.insert_axis(ndarray::Axis(1));
    policy.softmax_backward(&grad_probs)
}

/// One descent step on `Q` followed by one ascent step on `π`.
///
/// Each gradient entry is divided by the batch mass that touches it: the
/// `(s,a)` mass plus the initial mass of `s` for the Q step, the state mass
/// for the policy step, the expert pairs at the state for the regularizer.
/// This is a diagonal preconditioner, so fixed points are those of the raw
/// gradients.
pub fn saddle_step(
    policy: &mut TabularPolicy,
    q: &mut QTable,
    batch: &Batch,
    reward: &SyntheticReward,
    regularizer: Option<(&InverseModel, &[(usize, usize)])>,
    config: &SaddleConfig,
) -> SaddleStats {
    let gamma = config.gamma;
    let spec = &config.f_spec;
    let (ns, na) = (policy.n_states(), policy.n_actions());

    let gq = q_loss_gradient(&q.q, &q.target, policy, reward, batch, gamma, spec);
    let mut wq = Array2::<f64>::zeros((ns, na));
    for &(s, w) in &batch.initial_states {
        // state mass, not scaled by π: an action absent from the batch then
        // moves at a rate proportional to its probability
        wq.row_mut(s).mapv_inplace(|v| v + (1.0 - gamma) * w);
    }
    for (t, w) in &batch.transitions {
        wq[[t.state, t.action]] += w;
    }
    for ((qv, &g), &w) in q.q.iter_mut().zip(gq.iter()).zip(wq.iter()) {
        if w > 0.0 {
            *qv -= config.q_learning_rate * g / w;
        }
    }
    q.tick();

    let gp = pi_loss_gradient(policy, &q.q, reward, batch, gamma, spec);
    let mut wp = Array1::<f64>::zeros(ns);
    for &(s, w) in &batch.initial_states {
        wp[s] += (1.0 - gamma) * w;
    }
    for (t, w) in &batch.transitions {
        wp[t.next_state] += gamma * w;
    }
    let mut direction = Array2::<f64>::zeros((ns, na));
    for s in 0..ns {
        if wp[s] > 0.0 {
            direction.row_mut(s).scaled_add(1.0 / wp[s], &gp.row(s));
        }
    }

    let mut stats = SaddleStats::default();
    if let Some((model, pairs)) = regularizer.filter(|_| config.lambda > 0.0) {
        let eval = regularizer_value_and_gradient(policy, pairs, model);
        if eval.used > 0 {
            let mut per_state = Array1::<f64>::zeros(ns);
            for &(s, t) in pairs {
                if model.observed(s, t) {
                    per_state[s] += 1.0 / eval.used as f64;
                }
            }
            for s in 0..ns {
                if per_state[s] > 0.0 {
                    direction.row_mut(s).scaled_add(config.lambda / per_state[s], &eval.gradient.row(s));
                }
            }
        }
        stats.reg_value = Some(eval.value);
        stats.reg_skipped = eval.skipped;
    }
    policy.step_logits(config.pi_learning_rate, &direction);

    stats.q_loss = q_loss(&q.q, &q.target, policy, reward, batch, gamma, spec);
    stats.pi_loss = pi_loss(policy, &q.q, reward, batch, gamma, spec);
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{gen_random_mdp, random_policy};
    use crate::mdp::{rollout, seeded_rng};

    fn instance(seed: u64) -> (TabularPolicy, Array2<f64>, Array2<f64>, SyntheticReward, Batch) {
        let mdp = gen_random_mdp(7, 3, 0.9, seed, false).unwrap();
        let behaviour = random_policy(7, 3, seed + 1);
        let mut rng = seeded_rng(seed);
        let ts = rollout(&mdp, &behaviour, 60, &mut rng);
        let batch = Batch::from_transitions(&ts);
        let q = Array2::from_shape_fn((7, 3), |_| rng.random::<f64>() * 4.0 - 2.0);
        let target = Array2::from_shape_fn((7, 3), |_| rng.random::<f64>() * 4.0 - 2.0);
        let r = SyntheticReward::from_table(Array2::from_shape_fn((7, 7), |_| rng.random::<f64>() * 2.0));
        (random_policy(7, 3, seed + 2), q, target, r, batch)
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(|d| d * d).sum().sqrt();
        let scale = a.mapv(|d| d * d).sum().sqrt().max(b.mapv(|d| d * d).sum().sqrt()).max(1e-300);
        diff / scale
    }

    #[test]
    fn q_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let (pi, q, target, r, batch) = instance(seed);
            for spec in FDivergenceSpec::registered() {
                let g = q_loss_gradient(&q, &target, &pi, &r, &batch, 0.9, &spec);
                let h = 1e-5;
                let fd = Array2::from_shape_fn(q.raw_dim(), |(s, a)| {
                    let mut up = q.clone();
                    up[[s, a]] += h;
                    let mut down = q.clone();
                    down[[s, a]] -= h;
                    (q_loss(&up, &target, &pi, &r, &batch, 0.9, &spec) - q_loss(&down, &target, &pi, &r, &batch, 0.9, &spec)) / (2.0 * h)
                });
                assert!(rel_err(&g, &fd) < 1e-5, "seed {seed} {}: {}", spec.name(), rel_err(&g, &fd));
            }
        }
    }

    #[test]
    fn pi_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let (pi, q, _, r, batch) = instance(seed);
            for spec in FDivergenceSpec::registered() {
                let g = pi_loss_gradient(&pi, &q, &r, &batch, 0.9, &spec);
                let h = 1e-5;
                let fd = Array2::from_shape_fn(q.raw_dim(), |(s, a)| {
                    let mut up = pi.logits().clone();
                    up[[s, a]] += h;
                    let mut down = pi.logits().clone();
                    down[[s, a]] -= h;
                    let lu = pi_loss(&TabularPolicy::from_logits(up).unwrap(), &q, &r, &batch, 0.9, &spec);
                    let ld = pi_loss(&TabularPolicy::from_logits(down).unwrap(), &q, &r, &batch, 0.9, &spec);
                    (lu - ld) / (2.0 * h)
                });
                assert!(rel_err(&g, &fd) < 1e-5, "seed {seed} {}: {}", spec.name(), rel_err(&g, &fd));
            }
        }
    }

    #[test]
    fn full_batch_weights_sum_to_one() {
        let mdp = gen_random_mdp(5, 2, 0.9, 0, false).unwrap();
        let mut buf = ReplayBuffer::new(5, 2, 1000);
        buf.extend(rollout(&mdp, &TabularPolicy::uniform(5, 2), 300, &mut seeded_rng(0)));
        let b = Batch::full(&buf);
        assert!((b.transitions.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((b.initial_states.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_ignores_regularizer() {
        let (pi, q, target, r, batch) = instance(3);
        let cfg = SaddleConfig { gamma: 0.9, q_learning_rate: 0.5, pi_learning_rate: 0.1, lambda: 0.0, f_spec: FDivergenceSpec::default() };
        let model = InverseModel::empty(7, 3, 0.1);
        let mut qa = QTable { q: q.clone(), target: target.clone(), period: 10, updates: 0 };
        let mut qb = qa.clone();
        let (mut pa, mut pb) = (pi.clone(), pi);
        saddle_step(&mut pa, &mut qa, &batch, &r, Some((&model, &[(0, 1)])), &cfg);
        saddle_step(&mut pb, &mut qb, &batch, &r, None, &cfg);
        assert_eq!(pa, pb);
        assert_eq!(qa, qb);
    }
}
