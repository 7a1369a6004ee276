//! The verification bundle: every identity, bound, counter-example and
//! gradient check run over a seeded corpus of random instances.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use opolo_core::density_ratio::SyntheticReward;
use opolo_core::divergence::{
    check_f_bound_chain, check_forward_decomposition, check_gap_decomposition, check_joint_equals_sa,
    check_surrogate_upper_bound, f_div, f_div_dual_estimate, inverse_action_kl, kl, DivergenceReport, DualConfig,
    FDivergenceSpec, Relation, BOUND_SLACK, IDENTITY_TOL,
};
use opolo_core::envs::{
    gen_gridworld, gen_random_injective_mdp, gen_random_mdp, make_counterexample_mdp, random_policy, GridStart,
    GridTopology, GridworldSpec,
};
use opolo_core::inverse::{check_inverse_model_policy_optimality, fit_inverse_model_from, regularizer_value_and_gradient, DEFAULT_ALPHA};
use opolo_core::mdp::{rollout, seeded_rng, FiniteMdp, TabularPolicy};
use opolo_core::occupancy::compute_occupancy;
use opolo_core::opolo::{check_telescoping, opolo_objective, pi_loss, pi_loss_gradient, pre_telescope_objective, q_loss, q_loss_gradient, Batch};
use opolo_core::planning::optimal_expert;

use crate::error::HarnessError;
use crate::output::content_hash;

/// KL implementation under test, on flattened distributions.
pub type KlFn = fn(&[f64], &[f64]) -> f64;

pub fn library_kl(p: &[f64], q: &[f64]) -> f64 {
    kl(&ArrayView1::from(p), &ArrayView1::from(q)).unwrap_or(f64::NAN)
}

/// Deliberately wrong KL (base-2 logarithm) for exercising the failure path.
pub fn broken_kl(p: &[f64], q: &[f64]) -> f64 {
    library_kl(p, q) / std::f64::consts::LN_2
}

/// Plain loop over `p (ln p - ln q)`, kept separate from the library code.
pub fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return f64::INFINITY;
        }
        total += a * (a.ln() - b.ln());
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub identity: f64,
    pub bound_slack: f64,
    pub kl_oracle: f64,
    pub injective_inverse_action_kl: f64,
    pub counterexample_min_inverse_action_kl: f64,
    pub counterexample_max_transition_kl: f64,
    pub dual_value: f64,
    pub dual_witness: f64,
    pub gradient_relative: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            identity: IDENTITY_TOL,
            bound_slack: BOUND_SLACK,
            kl_oracle: 1e-12,
            injective_inverse_action_kl: 1e-8,
            counterexample_min_inverse_action_kl: 1.0,
            counterexample_max_transition_kl: 1e-6,
            dual_value: 1e-4,
            dual_witness: 1e-3,
            gradient_relative: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub count: usize,
    pub seed: u64,
    pub kl_under_test: KlFn,
}

impl VerifyOptions {
    pub fn new(count: usize, seed: u64) -> Self {
        Self { count, seed, kl_under_test: library_kl }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub label: String,
    pub mdp_hash: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub reports: Vec<DivergenceReport>,
}

impl InstanceReport {
    fn new(label: String, mdp: &FiniteMdp) -> Self {
        Self { label, mdp_hash: content_hash(mdp), n_states: mdp.n_states(), n_actions: mdp.n_actions(), reports: Vec::new() }
    }

    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.holds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub checks: usize,
    pub failures: usize,
    /// Largest `|lhs - rhs|` for equalities, smallest slack for bounds.
    pub worst: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReportBundle {
    pub seed: u64,
    pub count: usize,
    pub tolerances: Tolerances,
    pub passed: bool,
    pub families: BTreeMap<String, FamilySummary>,
    pub instances: Vec<InstanceReport>,
}

impl VerifyReportBundle {
    pub fn from_instances(seed: u64, count: usize, tolerances: Tolerances, mut instances: Vec<InstanceReport>) -> Self {
        instances.sort_by(|a, b| a.label.cmp(&b.label));
        let mut families: BTreeMap<String, FamilySummary> = BTreeMap::new();
        for r in instances.iter().flat_map(|i| &i.reports) {
            let (init, worse): (f64, fn(f64, f64) -> f64) = match r.relation {
                Relation::Equal => (0.0, f64::max),
                Relation::AtMost => (f64::INFINITY, f64::min),
            };
            let value = match r.relation {
                Relation::Equal => r.gap.abs(),
                Relation::AtMost => r.gap,
            };
            let fam = families.entry(r.name.clone()).or_insert(FamilySummary { checks: 0, failures: 0, worst: init });
            fam.checks += 1;
            fam.failures += usize::from(!r.holds);
            fam.worst = worse(fam.worst, value);
        }
        let passed = instances.iter().all(InstanceReport::passed);
        Self { seed, count, tolerances, passed, families, instances }
    }

    /// Combines two bundles; the result does not depend on argument order.
    pub fn merge(self, other: Self) -> Self {
        let mut instances = self.instances;
        instances.extend(other.instances);
        let seed = self.seed.min(other.seed);
        Self::from_instances(seed, self.count + other.count, self.tolerances, instances)
    }

    pub fn family(&self, name: &str) -> Option<&FamilySummary> {
        self.families.get(name)
    }

    /// Instances whose label starts with `prefix`.
    pub fn instances_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a InstanceReport> + 'a {
        self.instances.iter().filter(move |i| i.label.starts_with(prefix))
    }
}

fn exp_draw<R: Rng>(rng: &mut R) -> f64 {
    -(1.0 - rng.random::<f64>()).ln()
}

fn random_distribution<R: Rng>(n: usize, rng: &mut R) -> Array1<f64> {
    let draws: Array1<f64> = (0..n).map(|_| exp_draw(rng)).collect();
    let z = draws.sum();
    draws / z
}

fn random_table<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * (2.0 * rng.random::<f64>() - 1.0))
}

fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let norm = |m: &Array2<f64>| m.mapv(|v| v * v).sum().sqrt();
    let diff = norm(&(a - b));
    if diff == 0.0 {
        0.0
    } else {
        diff / norm(a).max(norm(b))
    }
}

fn central_difference(x: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    Array2::from_shape_fn(x.raw_dim(), |idx| {
        let mut up = x.clone();
        up[idx] += h;
        let mut down = x.clone();
        down[idx] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    })
}

const FD_STEP: f64 = 1e-5;

fn logits_loss(logits: &Array2<f64>, f: impl Fn(&TabularPolicy) -> f64) -> f64 {
    f(&TabularPolicy::from_logits(logits.clone()).expect("finite logits"))
}

/// Identities, bounds, objective forms, gradients, duality and the KL
/// cross-checks on one random MDP.
fn random_instance(i: usize, seed: u64, tol: &Tolerances, kl_fn: KlFn) -> Result<InstanceReport, HarnessError> {
    let mut rng = seeded_rng(seed);
    let ns = rng.random_range(2..=20);
    let na = rng.random_range(1..=5);
    let gamma = rng.random_range(0.5..0.99);
    let mdp = gen_random_mdp(ns, na, gamma, rng.random(), i % 4 == 3)?;
    let mut out = InstanceReport::new(format!("random-{i:04}"), &mdp);
    let pi = random_policy(ns, na, rng.random());
    let expert = random_policy(ns, na, rng.random());
    let behaviour = random_policy(ns, na, rng.random());
    let agent_occ = compute_occupancy(&mdp, &pi)?;
    let expert_occ = compute_occupancy(&mdp, &expert)?;
    let buffer_occ = compute_occupancy(&mdp, &behaviour)?;

    out.reports.push(check_joint_equals_sa(&mdp, &pi, &expert)?);
    out.reports.push(check_gap_decomposition(&mdp, &pi, &expert)?);
    out.reports.push(check_forward_decomposition(&mdp, &pi, &expert)?);

    let q = random_table(ns, na, 10.0, &mut rng);
    let reward = SyntheticReward::from_table(random_table(ns, ns, 3.0, &mut rng));
    out.reports.push(check_telescoping(&mdp, &pi, &q, &reward, tol.identity)?);
    for spec in FDivergenceSpec::registered() {
        let a = opolo_objective(&pi, &q, &reward, &buffer_occ.mu_sa, mdp.initial_dist(), &mdp, &spec);
        let b = pre_telescope_objective(&pi, &q, &reward, &buffer_occ.mu_sa, &mdp, &spec)?;
        out.reports.push(DivergenceReport::equality("objective_equals_pre_telescope", a, b, tol.identity));
    }

    out.reports.push(check_surrogate_upper_bound(&mdp, &pi, &expert, &buffer_occ)?);
    out.reports.push(check_f_bound_chain(&mdp, &pi, &expert, &buffer_occ, &FDivergenceSpec::default())?);

    let p_flat = agent_occ.mu_ss_flat().to_vec();
    let q_flat = expert_occ.mu_ss_flat().to_vec();
    out.reports.push(DivergenceReport::equality("kl_matches_oracle", kl_fn(&p_flat, &q_flat), oracle_kl(&p_flat, &q_flat), tol.kl_oracle));
    for _ in 0..10 {
        let n = rng.random_range(2..=30);
        let p = random_distribution(n, &mut rng);
        let q = random_distribution(n, &mut rng);
        let d = kl_fn(p.as_slice().expect("contiguous"), q.as_slice().expect("contiguous"));
        out.reports.push(DivergenceReport::at_most("f_div_dominates_kl", d, f_div(&p, &q, &FDivergenceSpec::default())?, tol.bound_slack));
    }

    let n = rng.random_range(2..=10);
    let p = random_distribution(n, &mut rng);
    let q = random_distribution(n, &mut rng);
    let spec = FDivergenceSpec::default();
    let est = f_div_dual_estimate(&p, &q, &spec, &DualConfig::default())?;
    out.reports.push(DivergenceReport::equality("dual_value", est.value, f_div(&p, &q, &spec)?, tol.dual_value));
    let worst = (0..n).map(|k| (est.witness[k] - p[k] / q[k]).abs()).fold(0.0, f64::max);
    out.reports.push(DivergenceReport::at_most("dual_witness", worst, 0.0, tol.dual_witness));

    let transitions = rollout(&mdp, &behaviour, 60, &mut rng);
    let batch = Batch::from_transitions(&transitions);
    let target = random_table(ns, na, 2.0, &mut rng);
    let q_small = random_table(ns, na, 2.0, &mut rng);
    for spec in FDivergenceSpec::registered() {
        let g = q_loss_gradient(&q_small, &target, &pi, &reward, &batch, gamma, &spec);
        let fd = central_difference(&q_small, FD_STEP, |x| q_loss(x, &target, &pi, &reward, &batch, gamma, &spec));
        out.reports.push(DivergenceReport::at_most("q_loss_gradient", relative_error(&g, &fd), 0.0, tol.gradient_relative));
        let g = pi_loss_gradient(&pi, &q_small, &reward, &batch, gamma, &spec);
        let fd = central_difference(pi.logits(), FD_STEP, |x| logits_loss(x, |p| pi_loss(p, &q_small, &reward, &batch, gamma, &spec)));
        out.reports.push(DivergenceReport::at_most("pi_loss_gradient", relative_error(&g, &fd), 0.0, tol.gradient_relative));
    }
    let model = fit_inverse_model_from(ns, na, DEFAULT_ALPHA, transitions.iter().copied());
    let pairs: Vec<(usize, usize)> = rollout(&mdp, &expert, 30, &mut rng).iter().map(|t| t.pair()).collect();
    let g = regularizer_value_and_gradient(&pi, &pairs, &model).gradient;
    let fd = central_difference(pi.logits(), FD_STEP, |x| logits_loss(x, |p| regularizer_value_and_gradient(p, &pairs, &model).value));
    out.reports.push(DivergenceReport::at_most("regularizer_gradient", relative_error(&g, &fd), 0.0, tol.gradient_relative));
    Ok(out)
}

/// Deterministic injective MDP: the inverse-action gap vanishes.
fn injective_instance(i: usize, seed: u64, tol: &Tolerances) -> Result<InstanceReport, HarnessError> {
    let mut rng = seeded_rng(seed);
    let ns = rng.random_range(2..=20);
    let na = rng.random_range(1..=ns.min(5));
    let mdp = gen_random_injective_mdp(ns, na, rng.random_range(0.5..0.99), rng.random())?;
    let mut out = InstanceReport::new(format!("injective-{i:04}"), &mdp);
    let pi = random_policy(ns, na, rng.random());
    let expert = random_policy(ns, na, rng.random());
    let gap = inverse_action_kl(&compute_occupancy(&mdp, &pi)?, &compute_occupancy(&mdp, &expert)?)?;
    out.reports.push(DivergenceReport::at_most("injective_inverse_action_kl", gap, 0.0, tol.injective_inverse_action_kl));
    out.reports.push(check_gap_decomposition(&mdp, &pi, &expert)?);
    Ok(out)
}

/// Deterministic gridworld with a full-support buffer: the inverse-model
/// policy is never beaten on forward transition KL.
fn gridworld_instance(i: usize, seed: u64) -> Result<InstanceReport, HarnessError> {
    let mut rng = seeded_rng(seed);
    let (w, h) = (rng.random_range(2..=5), rng.random_range(2..=5));
    let spec = GridworldSpec {
        start: GridStart::Uniform,
        topology: if i % 2 == 0 { GridTopology::Bounded } else { GridTopology::Torus },
        ..GridworldSpec::new(w, h, (rng.random_range(0..w), rng.random_range(0..h)), 0.0, rng.random_range(0.8..0.99), rng.random())
    };
    let mdp = gen_gridworld(&spec)?;
    let mut out = InstanceReport::new(format!("gridworld-{i:04}"), &mdp);
    let expert = if i % 3 == 0 { random_policy(mdp.n_states(), 4, rng.random()) } else { optimal_expert(&mdp)? };
    let buffer = random_policy(mdp.n_states(), 4, rng.random());
    let report = check_inverse_model_policy_optimality(&mdp, &compute_occupancy(&mdp, &expert)?, &compute_occupancy(&mdp, &buffer)?, 100, rng.random())?;
    out.reports.push(report);
    Ok(out)
}

fn counterexample_instance(tol: &Tolerances) -> Result<InstanceReport, HarnessError> {
    let ce = make_counterexample_mdp();
    let mut out = InstanceReport::new("counterexample".into(), &ce.mdp);
    let agent = compute_occupancy(&ce.mdp, &ce.learner)?;
    let expert = compute_occupancy(&ce.mdp, &ce.expert)?;
    let gap = inverse_action_kl(&agent, &expert)?;
    out.reports.push(DivergenceReport::at_most(
        "counterexample_inverse_action_kl_exceeds",
        tol.counterexample_min_inverse_action_kl,
        gap,
        0.0,
    ));
    out.reports.push(DivergenceReport::at_most(
        "counterexample_transition_kl",
        kl(&agent.mu_ss, &expert.mu_ss)?,
        tol.counterexample_max_transition_kl,
        0.0,
    ));
    out.reports.push(check_joint_equals_sa(&ce.mdp, &ce.learner, &ce.expert)?);
    out.reports.push(check_gap_decomposition(&ce.mdp, &ce.learner, &ce.expert)?);
    out.reports.push(check_forward_decomposition(&ce.mdp, &ce.learner, &ce.expert)?);
    Ok(out)
}

fn injective_gridworld_instance(seed: u64, tol: &Tolerances) -> Result<InstanceReport, HarnessError> {
    let spec = GridworldSpec {
        topology: GridTopology::Torus,
        absorbing_goal: false,
        start: GridStart::Random,
        ..GridworldSpec::new(4, 4, (3, 3), 0.0, 0.95, seed)
    };
    let mdp = gen_gridworld(&spec)?;
    let mut out = InstanceReport::new("injective-gridworld".into(), &mdp);
    let pi = random_policy(16, 4, seed.wrapping_add(1));
    let expert = random_policy(16, 4, seed.wrapping_add(2));
    let gap = inverse_action_kl(&compute_occupancy(&mdp, &pi)?, &compute_occupancy(&mdp, &expert)?)?;
    out.reports.push(DivergenceReport::at_most("injective_inverse_action_kl", gap, 0.0, tol.injective_inverse_action_kl));
    out.reports.push(check_joint_equals_sa(&mdp, &pi, &expert)?);
    out.reports.push(check_gap_decomposition(&mdp, &pi, &expert)?);
    out.reports.push(check_forward_decomposition(&mdp, &pi, &expert)?);
    Ok(out)
}

/// Runs every checker over `count` random instances of each kind plus the
/// two fixed environments.
pub fn run_verify(options: &VerifyOptions) -> Result<VerifyReportBundle, HarnessError> {
    let tol = Tolerances::default();
    let mut rng = seeded_rng(options.seed);
    let seeds: Vec<[u64; 3]> = (0..options.count).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let per_index: Vec<Vec<InstanceReport>> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(vec![
                random_instance(i, s[0], &tol, options.kl_under_test)?,
                injective_instance(i, s[1], &tol)?,
                gridworld_instance(i, s[2])?,
            ])
        })
        .collect::<Result<_, HarnessError>>()?;
    let mut instances: Vec<InstanceReport> = per_index.into_iter().flatten().collect();
    instances.push(counterexample_instance(&tol)?);
    instances.push(injective_gridworld_instance(options.seed, &tol)?);
    Ok(VerifyReportBundle::from_instances(options.seed, options.count, tol, instances))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_kl_examples() {
        assert_eq!(oracle_kl(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert!((oracle_kl(&[1.0, 0.0], &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(oracle_kl(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
        assert!((broken_kl(&[1.0, 0.0], &[0.5, 0.5]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn small_bundle_passes_and_is_deterministic() {
        let a = run_verify(&VerifyOptions::new(3, 11)).unwrap();
        let b = run_verify(&VerifyOptions::new(3, 11)).unwrap();
        assert!(a.passed, "{:?}", a.families);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.instances.len(), 3 * 3 + 2);
    }

    #[test]
    fn broken_kl_is_caught() {
        let opts = VerifyOptions { kl_under_test: broken_kl, ..VerifyOptions::new(2, 0) };
        let bundle = run_verify(&opts).unwrap();
        assert!(!bundle.passed);
        assert!(bundle.family("kl_matches_oracle").unwrap().failures > 0);
    }

    #[test]
    fn merge_is_order_independent() {
        let a = run_verify(&VerifyOptions::new(1, 1)).unwrap();
        let mut b = run_verify(&VerifyOptions::new(1, 2)).unwrap();
        for inst in &mut b.instances {
            inst.label.push_str("-b");
        }
        let ab = a.clone().merge(b.clone());
        let ba = b.merge(a);
        assert_eq!(ab, ba);
    }
}
