//! Environment generators: the three-state counter-example, gridworlds and
//! random tabular MDPs.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{seeded_rng, FiniteMdp, TabularPolicy, POLICY_FLOOR};

pub const MAX_GRID_CELLS: usize = 400;
pub const MAX_RANDOM_STATES: usize = 50;
pub const MAX_RANDOM_ACTIONS: usize = 10;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("goal ({0}, {1}) outside a {2}x{3} grid")]
    GoalOutOfBounds(usize, usize, usize, usize),
    #[error("start ({0}, {1}) outside the grid")]
    StartOutOfBounds(usize, usize),
    #[error("invalid generator parameters: {0}")]
    Params(String),
}

/// The deterministic, non-injective MDP with its learner and expert policies.
///
/// Both `a0` and `a2` move `s1 -> s2`. The expert always uses `a2`, the
/// learner splits `a0`/`a2` evenly; zero entries are floored at
/// [`POLICY_FLOOR`].
pub struct CounterExample {
    pub mdp: FiniteMdp,
    pub expert: TabularPolicy,
    pub learner: TabularPolicy,
}

/// Discount used for the counter-example MDP.
pub const COUNTEREXAMPLE_GAMMA: f64 = 0.99;

pub fn make_counterexample_mdp() -> CounterExample {
    // next_state[s][a]. a0 is only meaningful at s1 and self-loops elsewhere.
    const NEXT: [[usize; 4]; 3] = [[1, 0, 1, 2], [1, 0, 1, 2], [2, 0, 1, 2]];
    let mut p = Array3::zeros((3, 4, 3));
    for (s, row) in NEXT.iter().enumerate() {
        for (a, &t) in row.iter().enumerate() {
            p[[s, a, t]] = 1.0;
        }
    }
    let p0 = Array1::from(vec![1.0, 0.0, 0.0]);
    let mdp = FiniteMdp::checked(p, p0, COUNTEREXAMPLE_GAMMA, None).expect("counter-example is valid");

    // Rows are states s1..s3, columns actions a0..a3.
    let learner = ndarray::arr2(&[
        [0.5, 0.0, 0.5, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0, 0.0],
    ]);
    let expert = ndarray::arr2(&[
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0, 0.0],
    ]);
    CounterExample {
        mdp,
        expert: TabularPolicy::from_probs_with_floor(&expert, POLICY_FLOOR).expect("valid table"),
        learner: TabularPolicy::from_probs_with_floor(&learner, POLICY_FLOOR).expect("valid table"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridTopology {
    /// Moves into a wall leave the agent in place.
    Bounded,
    /// Moves wrap around the edges.
    Torus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GridStart {
    Cell { x: usize, y: usize },
    /// Uniform over every non-goal cell.
    Uniform,
    /// Random simplex point over every non-goal cell, drawn from the seed.
    Random,
}

/// Gridworld parameters. Actions are up, right, down, left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    pub goal: (usize, usize),
    pub slip_prob: f64,
    pub gamma: f64,
    pub seed: u64,
    pub start: GridStart,
    pub topology: GridTopology,
    /// When false the goal is an ordinary cell that only carries reward.
    pub absorbing_goal: bool,
}

impl Default for GridworldSpec {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            goal: (4, 4),
            slip_prob: 0.0,
            gamma: 0.99,
            seed: 0,
            start: GridStart::Cell { x: 0, y: 0 },
            topology: GridTopology::Bounded,
            absorbing_goal: true,
        }
    }
}

impl GridworldSpec {
    pub fn new(width: usize, height: usize, goal: (usize, usize), slip_prob: f64, gamma: f64, seed: u64) -> Self {
        Self { width, height, goal, slip_prob, gamma, seed, ..Self::default() }
    }

    pub fn cell(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn coords(&self, state: usize) -> (usize, usize) {
        (state % self.width, state / self.width)
    }
}

const MOVES: [(i64, i64); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

/// Builds the gridworld MDP. Reward is 1 for every action taken at the goal.
pub fn gen_gridworld(spec: &GridworldSpec) -> Result<FiniteMdp, EnvError> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 || w * h > MAX_GRID_CELLS {
        return Err(EnvError::Params(format!("grid {w}x{h} must have 1..={MAX_GRID_CELLS} cells")));
    }
    if !(0.0..1.0).contains(&spec.slip_prob) {
        return Err(EnvError::Params(format!("slip_prob {} not in [0, 1)", spec.slip_prob)));
    }
    if spec.goal.0 >= w || spec.goal.1 >= h {
        return Err(EnvError::GoalOutOfBounds(spec.goal.0, spec.goal.1, w, h));
    }
    let n = w * h;
    let goal = spec.cell(spec.goal.0, spec.goal.1);
    let dest = |s: usize, m: usize| -> usize {
        let (x, y) = spec.coords(s);
        let (dx, dy) = MOVES[m];
        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
        match spec.topology {
            GridTopology::Bounded => {
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    s
                } else {
                    spec.cell(nx as usize, ny as usize)
                }
            }
            GridTopology::Torus => spec.cell(nx.rem_euclid(w as i64) as usize, ny.rem_euclid(h as i64) as usize),
        }
    };

    let mut p = Array3::zeros((n, 4, n));
    for s in 0..n {
        for a in 0..4 {
            if spec.absorbing_goal && s == goal {
                p[[s, a, s]] = 1.0;
                continue;
            }
            p[[s, a, dest(s, a)]] += 1.0 - spec.slip_prob;
            if spec.slip_prob > 0.0 {
                for m in (0..4).filter(|&m| m != a) {
                    p[[s, a, dest(s, m)]] += spec.slip_prob / 3.0;
                }
            }
        }
    }

    let mut reward = Array2::zeros((n, 4));
    reward.row_mut(goal).fill(1.0);

    let p0 = match spec.start {
        GridStart::Cell { x, y } => {
            if x >= w || y >= h {
                return Err(EnvError::StartOutOfBounds(x, y));
            }
            let mut p0 = Array1::zeros(n);
            p0[spec.cell(x, y)] = 1.0;
            p0
        }
        GridStart::Uniform | GridStart::Random => {
            let mut rng = seeded_rng(spec.seed);
            let mut p0 = Array1::zeros(n);
            for s in (0..n).filter(|&s| s != goal || n == 1) {
                p0[s] = match spec.start {
                    GridStart::Uniform => 1.0,
                    _ => rng.sample::<f64, _>(Exp1),
                };
            }
            let z = p0.sum();
            p0 / z
        }
    };
    FiniteMdp::checked(p, p0, spec.gamma, Some(reward)).map_err(|e| EnvError::Params(e.to_string()))
}

fn random_simplex<R: Rng>(n: usize, rng: &mut R) -> Array1<f64> {
    let draws: Array1<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let z = draws.sum();
    draws / z
}

fn check_random_sizes(n_states: usize, n_actions: usize, gamma: f64) -> Result<(), EnvError> {
    if n_states == 0 || n_states > MAX_RANDOM_STATES {
        return Err(EnvError::Params(format!("n_states {n_states} not in 1..={MAX_RANDOM_STATES}")));
    }
    if n_actions == 0 || n_actions > MAX_RANDOM_ACTIONS {
        return Err(EnvError::Params(format!("n_actions {n_actions} not in 1..={MAX_RANDOM_ACTIONS}")));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(EnvError::Params(format!("gamma {gamma} not in (0, 1)")));
    }
    Ok(())
}

/// Random MDP with Dirichlet(1) rows (or random one-hot rows when
/// `deterministic`), a Dirichlet(1) initial distribution and uniform
/// rewards in `[0, 1)`.
pub fn gen_random_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    rng_seed: u64,
    deterministic: bool,
) -> Result<FiniteMdp, EnvError> {
    check_random_sizes(n_states, n_actions, gamma)?;
    let mut rng = seeded_rng(rng_seed);
    let mut p = Array3::zeros((n_states, n_actions, n_states));
    for s in 0..n_states {
        for a in 0..n_actions {
            if deterministic {
                p[[s, a, rng.random_range(0..n_states)]] = 1.0;
            } else {
                let row = random_simplex(n_states, &mut rng);
                p.slice_mut(ndarray::s![s, a, ..]).assign(&row);
            }
        }
    }
    let p0 = random_simplex(n_states, &mut rng);
    let reward = Array2::from_shape_fn((n_states, n_actions), |_| rng.random::<f64>());
    Ok(FiniteMdp::checked(p, p0, gamma, Some(reward)).expect("generator output is valid"))
}

/// Deterministic MDP where each state's actions lead to distinct successors.
/// Requires `n_actions <= n_states`.
pub fn gen_random_injective_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    rng_seed: u64,
) -> Result<FiniteMdp, EnvError> {
    check_random_sizes(n_states, n_actions, gamma)?;
    if n_actions > n_states {
        return Err(EnvError::Params("injective MDP needs n_actions <= n_states".into()));
    }
    let mut rng = seeded_rng(rng_seed);
    let mut p = Array3::zeros((n_states, n_actions, n_states));
    let mut targets: Vec<usize> = (0..n_states).collect();
    for s in 0..n_states {
        targets.shuffle(&mut rng);
        for a in 0..n_actions {
            p[[s, a, targets[a]]] = 1.0;
        }
    }
    let p0 = random_simplex(n_states, &mut rng);
    let reward = Array2::from_shape_fn((n_states, n_actions), |_| rng.random::<f64>());
    Ok(FiniteMdp::checked(p, p0, gamma, Some(reward)).expect("generator output is valid"))
}

/// Strictly positive policy with Dirichlet(1) rows.
pub fn random_policy(n_states: usize, n_actions: usize, rng_seed: u64) -> TabularPolicy {
    let mut rng = seeded_rng(rng_seed);
    let mut probs = Array2::zeros((n_states, n_actions));
    for mut row in probs.outer_iter_mut() {
        // Keep every entry away from zero so logits stay moderate.
        let r = random_simplex(n_actions, &mut rng);
        row.assign(&(r * 0.98 + 0.02 / n_actions as f64));
    }
    TabularPolicy::from_probs(&probs).expect("random rows are strictly positive")
}
