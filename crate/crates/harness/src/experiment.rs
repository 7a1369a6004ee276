//! Experiment descriptions and the multi-seed training runner.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use opolo_core::data::ExpertDataset;
use opolo_core::envs::{gen_gridworld, gen_random_injective_mdp, gen_random_mdp, make_counterexample_mdp, GridworldSpec};
use opolo_core::mdp::{FiniteMdp, TabularPolicy};
use opolo_core::opolo::{train, Algorithm, Evaluator, LearningCurve, TrainConfig, TrainedAgent};
use opolo_core::planning::optimal_expert;

use crate::error::HarnessError;
use crate::output::{content_hash, read_json, resolve_output, write_json, write_text};

/// Where the environment comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvDescriptor {
    Gridworld(GridworldSpec),
    Random {
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        seed: u64,
        #[serde(default)]
        deterministic: bool,
    },
    Injective {
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        seed: u64,
    },
    Counterexample,
    /// MDP JSON, relative paths taken from the experiment file's directory.
    File { path: PathBuf },
}

impl Default for EnvDescriptor {
    fn default() -> Self {
        EnvDescriptor::Gridworld(GridworldSpec::default())
    }
}

impl EnvDescriptor {
    pub fn build(&self) -> Result<FiniteMdp, HarnessError> {
        Ok(match self {
            EnvDescriptor::Gridworld(spec) => gen_gridworld(spec)?,
            EnvDescriptor::Random { n_states, n_actions, gamma, seed, deterministic } => {
                gen_random_mdp(*n_states, *n_actions, *gamma, *seed, *deterministic)?
            }
            EnvDescriptor::Injective { n_states, n_actions, gamma, seed } => {
                gen_random_injective_mdp(*n_states, *n_actions, *gamma, *seed)?
            }
            EnvDescriptor::Counterexample => make_counterexample_mdp().mdp,
            EnvDescriptor::File { path } => load_mdp(path)?,
        })
    }
}

/// Reads an MDP file and rejects documents that fail validation.
pub fn load_mdp(path: &Path) -> Result<FiniteMdp, HarnessError> {
    let mdp: FiniteMdp = read_json(path)?;
    let violations = mdp.validate();
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(HarnessError::Invalid(format!("{}: {}", path.display(), list.join("; "))));
    }
    Ok(mdp)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertSource {
    /// Deterministic optimal policy from value iteration on the env reward.
    #[default]
    Optimal,
    /// Policy JSON (`{"logits": [[...], ...]}`).
    Policy { path: PathBuf },
}

impl ExpertSource {
    pub fn resolve(&self, mdp: &FiniteMdp) -> Result<TabularPolicy, HarnessError> {
        let policy = match self {
            ExpertSource::Optimal => optimal_expert(mdp)?,
            ExpertSource::Policy { path } => read_json(path)?,
        };
        mdp.check_policy(&policy)?;
        Ok(policy)
    }
}

fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::Opolo, Algorithm::OpoloX]
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_n_expert() -> usize {
    4
}

fn default_expert_horizon() -> usize {
    50
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("experiment")
}

/// One experiment: every listed algorithm runs once per seed on the same
/// environment and the same per-seed expert data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub env: EnvDescriptor,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub config: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub expert: ExpertSource,
    #[serde(default = "default_n_expert")]
    pub n_expert_trajectories: usize,
    #[serde(default = "default_expert_horizon")]
    pub expert_horizon: usize,
    /// Relative paths resolve under the output root.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            env: EnvDescriptor::default(),
            algorithms: default_algorithms(),
            config: TrainConfig::default(),
            seeds: default_seeds(),
            expert: ExpertSource::default(),
            n_expert_trajectories: default_n_expert(),
            expert_horizon: default_expert_horizon(),
            output_dir: default_output_dir(),
        }
    }
}

/// Seed for the expert rollouts of a run, kept apart from the learner's stream.
pub fn expert_data_seed(seed: u64) -> u64 {
    seed.wrapping_add(1000)
}

impl ExperimentSpec {
    /// Parses an experiment file; input paths inside it are made relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut spec: ExperimentSpec = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let EnvDescriptor::File { path: p } = &mut spec.env {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let ExpertSource::Policy { path: p } = &mut spec.expert {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let invalid = |m: &str| Err(HarnessError::Invalid(m.to_string()));
        if self.seeds.is_empty() {
            return invalid("seeds must not be empty");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return invalid("seeds must be distinct");
        }
        if self.algorithms.is_empty() {
            return invalid("algorithms must not be empty");
        }
        if self.algorithms.iter().collect::<BTreeSet<_>>().len() != self.algorithms.len() {
            return invalid("algorithms must be distinct");
        }
        if self.n_expert_trajectories == 0 || self.expert_horizon == 0 {
            return invalid("expert data needs at least one trajectory of positive length");
        }
        self.config.validate().map_err(|e| HarnessError::Invalid(e.to_string()))?;
        let mdp = self.env.build()?;
        if mdp.reward().is_none() {
            return invalid("environment has no reward, so returns cannot be evaluated");
        }
        self.expert.resolve(&mdp)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation, 0 for a single run.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub final_return: f64,
    pub normalized_return: f64,
    pub transition_kl: f64,
    /// First evaluation step at 90% of the expert return.
    pub steps_to_90: Option<usize>,
    pub curve: PathBuf,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: Algorithm,
    pub n_runs: usize,
    pub final_return: Stat,
    pub normalized_return: Stat,
    pub transition_kl: Stat,
    /// Median over seeds, counting a seed that never got there as infinite.
    pub median_steps_to_90: Option<f64>,
    pub table_row: String,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub env_hash: String,
    pub expert_return: f64,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, algorithm: Algorithm) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.algorithm == algorithm)
    }
}

fn median_steps(runs: &[SeedRun]) -> Option<f64> {
    let mut steps: Vec<f64> = runs.iter().map(|r| r.steps_to_90.map_or(f64::INFINITY, |s| s as f64)).collect();
    steps.sort_by(f64::total_cmp);
    let n = steps.len();
    let m = if n % 2 == 1 { steps[n / 2] } else { 0.5 * (steps[n / 2 - 1] + steps[n / 2]) };
    m.is_finite().then_some(m)
}

/// Result of one finished training run, kept in memory for the summary.
pub struct RunOutput {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub agent: TrainedAgent,
    pub curve: LearningCurve,
}

/// Trains every (algorithm, seed) pair in parallel and writes per-run CSV
/// curves and checkpoints, the resolved experiment, the environment and a
/// summary into the output directory.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<(Summary, PathBuf), HarnessError> {
    spec.validate()?;
    let mdp = spec.env.build()?;
    let expert = spec.expert.resolve(&mdp)?;
    let evaluator = Evaluator::new(&mdp, &expert).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let out = resolve_output(&spec.output_dir);

    let jobs: Vec<(Algorithm, u64)> =
        spec.algorithms.iter().flat_map(|&a| spec.seeds.iter().map(move |&s| (a, s))).collect();
    let results: Vec<RunOutput> = jobs
        .par_iter()
        .map(|&(algorithm, seed)| {
            let data = ExpertDataset::from_rollouts(&mdp, &expert, spec.n_expert_trajectories, spec.expert_horizon, expert_data_seed(seed));
            let config = TrainConfig { seed, ..spec.config.clone() };
            log::info!("training {algorithm} seed {seed}");
            let (agent, curve) = train(algorithm, &mdp, &data, &evaluator, &config)
                .map_err(|source| HarnessError::Train { algorithm: algorithm.to_string(), seed, source })?;
            Ok(RunOutput { algorithm, seed, agent, curve })
        })
        .collect::<Result<_, HarnessError>>()?;

    write_json(&out.join("experiment.json"), spec)?;
    write_json(&out.join("env.json"), &mdp)?;
    write_json(&out.join("expert.json"), &expert)?;
    let expert_return = evaluator.expert_return();
    let mut rows = Vec::new();
    for &algorithm in &spec.algorithms {
        let mut runs = Vec::new();
        for r in results.iter().filter(|r| r.algorithm == algorithm) {
            let curve_rel = PathBuf::from(algorithm.name()).join(format!("seed-{}.csv", r.seed));
            let ckpt_rel = PathBuf::from(algorithm.name()).join(format!("seed-{}.json", r.seed));
            write_text(&out.join(&curve_rel), &r.curve.to_csv())?;
            write_json(&out.join(&ckpt_rel), &r.agent)?;
            runs.push(SeedRun {
                seed: r.seed,
                final_return: r.agent.final_eval.ret,
                normalized_return: r.agent.final_eval.ret / expert_return,
                transition_kl: r.agent.final_eval.transition_kl,
                steps_to_90: r.curve.steps_to_return(0.9 * expert_return),
                curve: curve_rel,
                checkpoint: ckpt_rel,
            });
        }
        let collect = |f: fn(&SeedRun) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        let final_return = Stat::of(&collect(|r| r.final_return));
        let normalized_return = Stat::of(&collect(|r| r.normalized_return));
        let transition_kl = Stat::of(&collect(|r| r.transition_kl));
        rows.push(SummaryRow {
            algorithm,
            n_runs: runs.len(),
            table_row: format!("{algorithm} | return {final_return} | normalized {normalized_return} | transition KL {transition_kl}"),
            final_return,
            normalized_return,
            transition_kl,
            median_steps_to_90: median_steps(&runs),
            runs,
        });
    }
    let summary = Summary { env_hash: content_hash(&mdp), expert_return, seeds: spec.seeds.clone(), rows };
    write_json(&out.join("summary.json"), &summary)?;
    Ok((summary, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_examples() {
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-15);
        assert_eq!(Stat::of(&[4.0]).std, 0.0);
    }

    #[test]
    fn median_counts_misses_as_infinite() {
        let run = |s: Option<usize>| SeedRun {
            seed: 0,
            final_return: 0.0,
            normalized_return: 0.0,
            transition_kl: 0.0,
            steps_to_90: s,
            curve: PathBuf::new(),
            checkpoint: PathBuf::new(),
        };
        assert_eq!(median_steps(&[run(Some(3)), run(None), run(Some(1))]), Some(3.0));
        assert_eq!(median_steps(&[run(None), run(None), run(Some(1))]), None);
        assert_eq!(median_steps(&[run(Some(2)), run(Some(4))]), Some(3.0));
    }

    #[test]
    fn defaults_fill_a_minimal_document() {
        let spec: ExperimentSpec = serde_json::from_str(r#"{"seeds": [3]}"#).unwrap();
        assert_eq!(spec.algorithms, default_algorithms());
        assert_eq!(spec.n_expert_trajectories, 4);
        assert_eq!(spec.env, EnvDescriptor::default());
        spec.validate().unwrap();
        assert!(serde_json::from_str::<ExperimentSpec>(r#"{"sedes": [3]}"#).is_err());
    }

    #[test]
    fn validation_failures() {
        let bad = ExperimentSpec { seeds: vec![], ..ExperimentSpec::default() };
        assert!(matches!(bad.validate(), Err(HarnessError::Invalid(_))));
        let dup = ExperimentSpec { seeds: vec![1, 1], ..ExperimentSpec::default() };
        assert!(dup.validate().is_err());
        let no_reward = ExperimentSpec { env: EnvDescriptor::Counterexample, ..ExperimentSpec::default() };
        assert!(no_reward.validate().is_err());
        let missing = ExperimentSpec { expert: ExpertSource::Policy { path: "/nonexistent/p.json".into() }, ..ExperimentSpec::default() };
        assert!(matches!(missing.validate(), Err(HarnessError::Io { .. })));
    }

    #[test]
    fn env_descriptor_round_trips() {
        for env in [
            EnvDescriptor::default(),
            EnvDescriptor::Random { n_states: 4, n_actions: 2, gamma: 0.9, seed: 1, deterministic: true },
            EnvDescriptor::Injective { n_states: 4, n_actions: 2, gamma: 0.9, seed: 1 },
            EnvDescriptor::Counterexample,
        ] {
            let text = serde_json::to_string(&env).unwrap();
            assert_eq!(serde_json::from_str::<EnvDescriptor>(&text).unwrap(), env);
            env.build().unwrap();
        }
    }
}
