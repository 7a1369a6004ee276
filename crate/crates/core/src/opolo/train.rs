//! Training loops: the off-policy learner with and without the inverse-model
//! regularizer, behaviour cloning from observations, and an on-policy
//! adversarial baseline. Learners touch the environment only through
//! [`Simulator`]; returns and divergences are computed by an [`Evaluator`]
//! that knows the reward and the expert policy.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ExpertDataset, ReplayBuffer};
use crate::density_ratio::{log_ratio_table, reward_from_discriminator, Discriminator, RewardConvention, RewardMode, SyntheticReward};
use crate::divergence::{kl, DivergenceError, FDivergenceSpec};
use crate::inverse::{fit_inverse_model, regularizer_value_and_gradient, InverseModel};
use crate::mdp::{seeded_rng, FiniteMdp, TabularPolicy, Simulator, Transition};
use crate::occupancy::{compute_occupancy, return_from_occupancy, OccupancyError, OccupancyMeasures};

use super::saddle::{q_loss, saddle_step, Batch, SaddleConfig};
use super::QTable;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("expert dataset has no state pairs")]
    EmptyExpert,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {what} at env step {step}")]
    Diverged { step: usize, what: String },
    #[error(transparent)]
    Occupancy(#[from] OccupancyError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Opolo,
    /// The off-policy learner without the inverse-model regularizer.
    OpoloX,
    Bco,
    Gaifo,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Opolo => "opolo",
            Algorithm::OpoloX => "opolo-x",
            Algorithm::Bco => "bco",
            Algorithm::Gaifo => "gaifo",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learner discount. Evaluation always uses the MDP's own discount.
    pub gamma: f64,
    pub total_steps: usize,
    pub episode_horizon: usize,
    pub buffer_capacity: usize,
    /// Transitions per Q/policy minibatch; 0 uses the whole buffer.
    pub batch_size: usize,
    /// Env steps collected with the initial policy before any update.
    pub warmup_steps: usize,
    /// Env steps between Q/policy update rounds.
    pub update_every: usize,
    pub updates_per_round: usize,
    pub q_learning_rate: f64,
    pub pi_learning_rate: f64,
    pub target_period: usize,
    pub disc_every: usize,
    pub disc_steps: usize,
    pub disc_learning_rate: f64,
    pub inverse_every: usize,
    pub inverse_alpha: f64,
    /// Regularizer weight. Ignored by `opolo-x`.
    pub lambda: f64,
    pub f_exponent: f64,
    pub reward_mode: RewardMode,
    /// Draw initial states for the objective from the buffer instead of
    /// the environment's reset distribution.
    pub virtual_initial_states: bool,
    /// Probability that the off-policy loops act uniformly at random instead
    /// of sampling from the policy.
    pub exploration_epsilon: f64,
    pub eval_every: usize,
    pub seed: u64,
    /// Fresh env steps per iteration of the on-policy baseline.
    pub gaifo_rollout_steps: usize,
    /// Exact policy-gradient steps per iteration, at `pi_learning_rate`.
    pub gaifo_pg_steps: usize,
    pub bco_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            total_steps: 200_000,
            episode_horizon: 50,
            buffer_capacity: 100_000,
            batch_size: 100,
            warmup_steps: 0,
            update_every: 100,
            updates_per_round: 100,
            q_learning_rate: 0.5,
            pi_learning_rate: 0.05,
            target_period: 100,
            disc_every: 50,
            disc_steps: 10,
            disc_learning_rate: 1.0,
            inverse_every: 50,
            inverse_alpha: crate::inverse::DEFAULT_ALPHA,
            lambda: 0.1,
            f_exponent: 2.0,
            reward_mode: RewardMode::Discriminator,
            virtual_initial_states: true,
            exploration_epsilon: 0.1,
            eval_every: 100,
            seed: 0,
            gaifo_rollout_steps: 200,
            gaifo_pg_steps: 8,
            bco_learning_rate: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("total_steps", self.total_steps),
            ("episode_horizon", self.episode_horizon),
            ("buffer_capacity", self.buffer_capacity),
            ("update_every", self.update_every),
            ("updates_per_round", self.updates_per_round),
            ("target_period", self.target_period),
            ("disc_every", self.disc_every),
            ("inverse_every", self.inverse_every),
            ("eval_every", self.eval_every),
            ("gaifo_rollout_steps", self.gaifo_rollout_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        let rates = [
            ("q_learning_rate", self.q_learning_rate),
            ("pi_learning_rate", self.pi_learning_rate),
            ("disc_learning_rate", self.disc_learning_rate),
            ("bco_learning_rate", self.bco_learning_rate),
            ("inverse_alpha", self.inverse_alpha),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(TrainError::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.exploration_epsilon) {
            return Err(TrainError::Config(format!("exploration_epsilon must lie in [0, 1], got {}", self.exploration_epsilon)));
        }
        if !(self.f_exponent > 1.0) {
            return Err(TrainError::Config(format!("f_exponent must exceed 1, got {}", self.f_exponent)));
        }
        Ok(())
    }
}

/// Exact return and transition KL of a policy against a fixed expert.
#[derive(Debug, Clone)]
pub struct Evaluator {
    mdp: FiniteMdp,
    expert: OccupancyMeasures,
    expert_return: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    #[serde(rename = "return")]
    pub ret: f64,
    /// `D_KL[μ^π(s,s') || μ^E(s,s')]`
    pub transition_kl: f64,
}

impl Evaluator {
    pub fn new(mdp: &FiniteMdp, expert: &TabularPolicy) -> Result<Self, TrainError> {
        let reward = mdp.reward().ok_or(OccupancyError::MissingReward)?;
        let occ = compute_occupancy(mdp, expert)?;
        let expert_return = return_from_occupancy(&occ, reward, mdp.discount());
        Ok(Self { mdp: mdp.clone(), expert: occ, expert_return })
    }

    pub fn expert_return(&self) -> f64 {
        self.expert_return
    }

    pub fn expert_occupancy(&self) -> &OccupancyMeasures {
        &self.expert
    }

    pub fn evaluate(&self, policy: &TabularPolicy) -> Result<Evaluation, TrainError> {
        let occ = compute_occupancy(&self.mdp, policy)?;
        let reward = self.mdp.reward().ok_or(OccupancyError::MissingReward)?;
        Ok(Evaluation {
            ret: return_from_occupancy(&occ, reward, self.mdp.discount()),
            transition_kl: kl(&occ.mu_ss, &self.expert.mu_ss)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub transition_kl: f64,
    pub objective: Option<f64>,
    pub disc_loss: Option<f64>,
    pub reg_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub const COLUMNS: [&'static str; 6] = ["step", "return", "transition_kl", "objective", "disc_loss", "reg_value"];

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(p).expect("in-memory csv write");
        }
        let bytes = w.into_inner().expect("in-memory csv flush");
        let text = String::from_utf8(bytes).expect("csv is utf-8");
        if self.points.is_empty() {
            format!("{}\n", Self::COLUMNS.join(","))
        } else {
            text
        }
    }

    pub fn from_csv(text: &str) -> Result<Self, csv::Error> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let points = r.deserialize().collect::<Result<Vec<CurvePoint>, _>>()?;
        Ok(Self { points })
    }

    pub fn last(&self) -> Option<&CurvePoint> {
        self.points.last()
    }

    /// First recorded step whose return reaches `threshold`.
    pub fn steps_to_return(&self, threshold: f64) -> Option<usize> {
        self.points.iter().find(|p| p.ret >= threshold).map(|p| p.step)
    }
}

/// Checkpoint of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedAgent {
    pub algorithm: Algorithm,
    pub config: TrainConfig,
    pub env_steps: usize,
    pub policy: TabularPolicy,
    pub q: Option<QTable>,
    pub discriminator: Option<Discriminator>,
    pub inverse_model: Option<InverseModel>,
    pub final_eval: Evaluation,
    pub expert_return: f64,
}

fn ensure_finite(step: usize, what: &str, values: impl IntoIterator<Item = f64>) -> Result<(), TrainError> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        log::error!("training diverged: non-finite {what} at env step {step}");
        Err(TrainError::Diverged { step, what: what.to_string() })
    }
}

/// Steps the environment and resets after `horizon` steps.
struct Actor<'a> {
    sim: Simulator<'a>,
    state: usize,
    t: usize,
    horizon: usize,
}

impl<'a> Actor<'a> {
    fn new<R: rand::Rng + ?Sized>(mdp: &'a FiniteMdp, horizon: usize, rng: &mut R) -> Self {
        let sim = Simulator::new(mdp);
        let state = sim.reset(rng);
        Self { sim, state, t: 0, horizon }
    }

    fn step<R: rand::Rng + ?Sized>(&mut self, policy: &TabularPolicy, epsilon: f64, rng: &mut R) -> Transition {
        let a = if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            rng.random_range(0..self.sim.n_actions())
        } else {
            policy.sample_action(self.state, rng)
        };
        let next = self.sim.step(self.state, a, rng);
        let tr = Transition::new(self.state, a, next);
        self.t += 1;
        if self.t >= self.horizon {
            self.t = 0;
            self.state = self.sim.reset(rng);
        } else {
            self.state = next;
        }
        tr
    }
}

fn check_inputs(mdp: &FiniteMdp, expert: &ExpertDataset, config: &TrainConfig) -> Result<(), TrainError> {
    config.validate()?;
    if expert.is_empty() {
        return Err(TrainError::EmptyExpert);
    }
    if expert.n_states != mdp.n_states() {
        return Err(TrainError::Config(format!(
            "expert data has {} states, environment has {}",
            expert.n_states,
            mdp.n_states()
        )));
    }
    Ok(())
}

/// Runs the algorithm named in `algorithm`.
pub fn train(
    algorithm: Algorithm,
    mdp: &FiniteMdp,
    expert: &ExpertDataset,
    evaluator: &Evaluator,
    config: &TrainConfig,
) -> Result<(TrainedAgent, LearningCurve), TrainError> {
    match algorithm {
        Algorithm::Opolo | Algorithm::OpoloX | Algorithm::Bco => off_policy_loop(algorithm, mdp, expert, evaluator, config),
        Algorithm::Gaifo => train_gaifo_onpolicy(mdp, expert, evaluator, config),
    }
}

pub fn train_opolo(
    mdp: &FiniteMdp,
    expert: &ExpertDataset,
    evaluator: &Evaluator,
    config: &TrainConfig,
) -> Result<(TrainedAgent, LearningCurve), TrainError> {
    let algorithm = if config.lambda > 0.0 { Algorithm::Opolo } else { Algorithm::OpoloX };
    off_policy_loop(algorithm, mdp, expert, evaluator, config)
}

/// Fits the inverse model on self-collected transitions and clones the
/// inferred expert actions, continuing to interact with the current policy.
pub fn train_bco(
    mdp: &FiniteMdp,
    expert: &ExpertDataset,
    evaluator: &Evaluator,
    config: &TrainConfig,
) -> Result<(TrainedAgent, LearningCurve), TrainError> {
    off_policy_loop(Algorithm::Bco, mdp, expert, evaluator, config)
}

fn off_policy_loop(
    algorithm: Algorithm,
    mdp: &FiniteMdp,
    expert: &ExpertDataset,
    evaluator: &Evaluator,
    config: &TrainConfig,
) -> Result<(TrainedAgent, LearningCurve), TrainError> {
    check_inputs(mdp, expert, config)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let uses_q = algorithm != Algorithm::Bco;
    let lambda = if algorithm == Algorithm::OpoloX { 0.0 } else { config.lambda };
    let uses_inverse = algorithm == Algorithm::Bco || lambda > 0.0;
    let spec = FDivergenceSpec::power(config.f_exponent);
    let saddle_cfg = SaddleConfig {
        gamma: config.gamma,
        q_learning_rate: config.q_learning_rate,
        pi_learning_rate: config.pi_learning_rate,
        lambda,
        f_spec: spec,
    };

    let mut rng = seeded_rng(config.seed);
    let mut actor = Actor::new(mdp, config.episode_horizon, &mut rng);
    let mut buffer = ReplayBuffer::new(ns, na, config.buffer_capacity);
    let mut policy = TabularPolicy::uniform(ns, na);
    let mut q = QTable::zeros(ns, na, config.target_period);
    let mut disc = Discriminator::new(ns);
    let mut reward = SyntheticReward::constant(ns, 0.0);
    let mut inverse = InverseModel::empty(ns, na, config.inverse_alpha);
    let expert_pairs = expert.pairs();
    let expert_mu = expert.mu_ss();
    let mut curve = LearningCurve::default();
    let mut last_reg = None;
    let mut disc_loss = None;

    for step in 1..=config.total_steps {
        buffer.push(actor.step(&policy, config.exploration_epsilon, &mut rng));
        let active = step >= config.warmup_steps;

        if active && uses_q && step % config.disc_every == 0 {
            let mu_r = buffer.mu_ss();
            reward = match config.reward_mode {
                RewardMode::Discriminator => {
                    disc.train_on_weights(&expert_mu, &mu_r, config.disc_learning_rate, config.disc_steps);
                    disc_loss = Some(disc.loss_on_weights(&expert_mu, &mu_r));
                    reward_from_discriminator(&disc)
                }
                RewardMode::Exact => log_ratio_table(&expert_mu, &mu_r, RewardConvention::Shifted)
                    .expect("tables share the state space"),
            };
        }
        if active && uses_inverse && step % config.inverse_every == 0 {
            inverse = fit_inverse_model(&buffer, config.inverse_alpha);
        }
        if active && step % config.update_every == 0 {
            let full = (config.batch_size == 0).then(|| Batch::full(&buffer));
            for _ in 0..config.updates_per_round {
                if uses_q {
                    let mut batch = match &full {
                        Some(b) => b.clone(),
                        None => Batch::sample(&buffer, config.batch_size, &mut rng),
                    };
                    if !config.virtual_initial_states {
                        batch = batch.with_initial_distribution(mdp.initial_dist());
                    }
                    let reg = uses_inverse.then_some((&inverse, expert_pairs.as_slice()));
                    let stats = saddle_step(&mut policy, &mut q, &batch, &reward, reg, &saddle_cfg);
                    if stats.reg_value.is_some() {
                        last_reg = stats.reg_value;
                    }
                } else {
                    last_reg = Some(bco_step(&mut policy, &inverse, &expert_pairs, config.bco_learning_rate));
                }
            }
            ensure_finite(step, "Q table", q.q.iter().copied())?;
            ensure_finite(step, "policy logits", policy.logits().iter().copied())?;
        }

        if step % config.eval_every == 0 || step == config.total_steps {
            let eval = evaluator.evaluate(&policy)?;
            // Sampled objective on the whole buffer; BCO reports its cloning loss.
            let objective = if uses_q {
                Some(q_loss(&q.q, &q.q, &policy, &reward, &Batch::full(&buffer), config.gamma, &spec))
            } else {
                last_reg
            };
            curve.points.push(CurvePoint {
                step,
                ret: eval.ret,
                transition_kl: eval.transition_kl,
                objective,
                disc_loss,
                reg_value: last_reg,
            });
            log::debug!("{algorithm} step {step}: return {:.4} kl {:.4}", eval.ret, eval.transition_kl);
        }
    }

    if algorithm == Algorithm::Bco && last_reg.is_none() {
        log::warn!("behaviour cloning finished without a single update");
    }
    let final_eval = evaluator.evaluate(&policy)?;
    let agent = TrainedAgent {
        algorithm,
        config: config.clone(),
        env_steps: config.total_steps,
        policy,
        q: uses_q.then_some(q),
        discriminator: (uses_q && config.reward_mode == RewardMode::Discriminator).then_some(disc),
        inverse_model: uses_inverse.then_some(inverse),
        final_eval,
        expert_return: evaluator.expert_return(),
    };
    Ok((agent, curve))
}

/// One preconditioned ascent step on the soft-label cloning objective.
fn bco_step(policy: &mut TabularPolicy, model: &InverseModel, pairs: &[(usize, usize)], lr: f64) -> f64 {
    let eval = regularizer_value_and_gradient(policy, pairs, model);
    if eval.used == 0 {
        return eval.value;
    }
    let mut per_state = Array1::<f64>::zeros(policy.n_states());
    for &(s, t) in pairs {
        if model.observed(s, t) {
            per_state[s] += 1.0 / eval.used as f64;
        }
    }
    let mut dir = eval.gradient;
    for (s, mut row) in dir.outer_iter_mut().enumerate() {
        if per_state[s] > 0.0 {
            row /= per_state[s];
        }
    }
    policy.step_logits(lr, &dir);
    eval.value
}

/// `Q^π` for a reward on `(s,s')`, by a linear solve on the known dynamics.
fn policy_q_values(mdp: &FiniteMdp, policy: &TabularPolicy, reward: &SyntheticReward, gamma: f64) -> Array2<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let p = mdp.transition();
    let mut r_sa = Array2::<f64>::zeros((ns, na));
    for s in 0..ns {
        for a in 0..na {
            r_sa[[s, a]] = (0..ns).map(|t| p[[s, a, t]] * reward.get(s, t)).sum();
        }
    }
    let r_pi = (&r_sa * policy.probs()).sum_axis(ndarray::Axis(1));
    let kernel = mdp.state_kernel(policy);
    let a = DMatrix::from_fn(ns, ns, |i, j| if i == j { 1.0 } else { 0.0 } - gamma * kernel[[i, j]]);
    let b = DVector::from_iterator(ns, r_pi.iter().copied());
    let v = a.lu().solve(&b).expect("I - γK is nonsingular for γ < 1");
    let v = Array1::from_iter(v.iter().copied());
    let mut q = r_sa;
    for s in 0..ns {
        for a in 0..na {
            q[[s, a]] += gamma * (0..ns).map(|t| p[[s, a, t]] * v[t]).sum::<f64>();
        }
    }
    q
}

/// On-policy adversarial baseline: every iteration collects fresh rollouts,
/// updates the discriminator against them, and takes exact policy-gradient
/// steps on the resulting reward. Each state's gradient is scaled by its
/// inverse discounted visitation.
pub fn train_gaifo_onpolicy(
    mdp: &FiniteMdp,
    expert: &ExpertDataset,
    evaluator: &Evaluator,
    config: &TrainConfig,
) -> Result<(TrainedAgent, LearningCurve), TrainError> {
    check_inputs(mdp, expert, config)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut rng = seeded_rng(config.seed);
    let mut actor = Actor::new(mdp, config.episode_horizon, &mut rng);
    let mut policy = TabularPolicy::uniform(ns, na);
    let mut disc = Discriminator::new(ns);
    let expert_mu = expert.mu_ss();
    let mut curve = LearningCurve::default();
    let mut steps = 0usize;
    let mut next_eval = config.eval_every;

    while steps < config.total_steps {
        let n = config.gaifo_rollout_steps.min(config.total_steps - steps);
        let mut fresh = ReplayBuffer::new(ns, na, n);
        for _ in 0..n {
            fresh.push(actor.step(&policy, 0.0, &mut rng));
        }
        steps += n;
        let mu_pi = fresh.mu_ss();
        disc.train_on_weights(&expert_mu, &mu_pi, config.disc_learning_rate, config.disc_steps);
        let reward = reward_from_discriminator(&disc);
        let mut surrogate = 0.0;
        for _ in 0..config.gaifo_pg_steps {
            let qv = policy_q_values(mdp, &policy, &reward, config.gamma);
            let v = policy.expected_values(&qv);
            surrogate = mdp.initial_dist().dot(&v);
            let mut dir = Array2::<f64>::zeros((ns, na));
            for s in 0..ns {
                for a in 0..na {
                    dir[[s, a]] = policy.prob(s, a) * (qv[[s, a]] - v[s]);
                }
            }
            policy.step_logits(config.pi_learning_rate, &dir);
        }
        ensure_finite(steps, "policy logits", policy.logits().iter().copied())?;

        if steps >= next_eval || steps == config.total_steps {
            while next_eval <= steps {
                next_eval += config.eval_every;
            }
            let eval = evaluator.evaluate(&policy)?;
            curve.points.push(CurvePoint {
                step: steps,
                ret: eval.ret,
                transition_kl: eval.transition_kl,
                objective: Some(surrogate),
                disc_loss: Some(disc.loss_on_weights(&expert_mu, &mu_pi)),
                reg_value: None,
            });
        }
    }

    let final_eval = evaluator.evaluate(&policy)?;
    let agent = TrainedAgent {
        algorithm: Algorithm::Gaifo,
        config: config.clone(),
        env_steps: steps,
        policy,
        q: None,
        discriminator: Some(disc),
        inverse_model: None,
        final_eval,
        expert_return: evaluator.expert_return(),
    };
    Ok((agent, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{gen_gridworld, GridworldSpec};
    use crate::planning::optimal_expert;

    fn small_config() -> TrainConfig {
        TrainConfig { total_steps: 3_000, warmup_steps: 500, eval_every: 500, updates_per_round: 10, ..TrainConfig::default() }
    }

    #[test]
    fn uniform_expert_is_already_matched() {
        let mdp = gen_gridworld(&GridworldSpec::new(3, 3, (2, 2), 0.0, 0.9, 0)).unwrap();
        let uniform = TabularPolicy::uniform(9, 4);
        let data = ExpertDataset::from_rollouts(&mdp, &uniform, 200, 50, 1);
        let eval = Evaluator::new(&mdp, &uniform).unwrap();
        let (_, curve) = train_opolo(&mdp, &data, &eval, &small_config()).unwrap();
        assert!(eval.evaluate(&uniform).unwrap().transition_kl < 1e-12);
        assert!(curve.points.iter().all(|p| p.transition_kl <= 0.02), "{curve:?}");
    }

    #[test]
    fn runs_are_deterministic_and_csv_round_trips() {
        let mdp = gen_gridworld(&GridworldSpec::new(3, 3, (2, 2), 0.0, 0.9, 0)).unwrap();
        let expert = optimal_expert(&mdp).unwrap();
        let data = ExpertDataset::from_rollouts(&mdp, &expert, 4, 20, 1);
        let eval = Evaluator::new(&mdp, &expert).unwrap();
        for alg in [Algorithm::Opolo, Algorithm::OpoloX, Algorithm::Bco, Algorithm::Gaifo] {
            let (a1, c1) = train(alg, &mdp, &data, &eval, &small_config()).unwrap();
            let (a2, c2) = train(alg, &mdp, &data, &eval, &small_config()).unwrap();
            assert_eq!(c1.to_csv(), c2.to_csv());
            assert_eq!(serde_json::to_string(&a1).unwrap(), serde_json::to_string(&a2).unwrap());
            assert_eq!(LearningCurve::from_csv(&c1.to_csv()).unwrap(), c1);
            let back: TrainedAgent = serde_json::from_str(&serde_json::to_string(&a1).unwrap()).unwrap();
            assert_eq!(back, a1);
        }
    }

    #[test]
    fn bco_without_updates_does_not_crash() {
        let mdp = gen_gridworld(&GridworldSpec::new(3, 3, (2, 2), 0.0, 0.9, 0)).unwrap();
        let expert = optimal_expert(&mdp).unwrap();
        let data = ExpertDataset::from_rollouts(&mdp, &expert, 2, 10, 1);
        let eval = Evaluator::new(&mdp, &expert).unwrap();
        let cfg = TrainConfig { total_steps: 10, warmup_steps: 100, eval_every: 5, ..TrainConfig::default() };
        let (agent, _) = train_bco(&mdp, &data, &eval, &cfg).unwrap();
        assert_eq!(agent.policy, TabularPolicy::uniform(9, 4));
    }

    #[test]
    fn empty_expert_and_bad_config_are_rejected() {
        let mdp = gen_gridworld(&GridworldSpec::new(3, 3, (2, 2), 0.0, 0.9, 0)).unwrap();
        let expert = optimal_expert(&mdp).unwrap();
        let eval = Evaluator::new(&mdp, &expert).unwrap();
        let empty = ExpertDataset::from_state_sequences(9, vec![vec![0]]);
        assert!(matches!(train_opolo(&mdp, &empty, &eval, &small_config()), Err(TrainError::EmptyExpert)));
        let data = ExpertDataset::from_rollouts(&mdp, &expert, 1, 5, 0);
        let bad = TrainConfig { gamma: 1.0, ..small_config() };
        assert!(matches!(train_opolo(&mdp, &data, &eval, &bad), Err(TrainError::Config(_))));
    }

    #[test]
    fn exploding_rate_aborts() {
        let mdp = gen_gridworld(&GridworldSpec::new(3, 3, (2, 2), 0.0, 0.9, 0)).unwrap();
        let expert = optimal_expert(&mdp).unwrap();
        let data = ExpertDataset::from_rollouts(&mdp, &expert, 4, 20, 1);
        let eval = Evaluator::new(&mdp, &expert).unwrap();
        let cfg = TrainConfig { q_learning_rate: 1e200, pi_learning_rate: 1e200, ..small_config() };
        assert!(matches!(train_opolo(&mdp, &data, &eval, &cfg), Err(TrainError::Diverged { .. })));
    }
}
