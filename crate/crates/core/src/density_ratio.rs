//! Synthetic rewards `r(s,s')` from the expert-to-buffer density ratio,
//! either computed exactly from known occupancies or learned by a tabular
//! logistic discriminator.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::seeded_rng;

/// Discriminator logits are kept in `[-LOGIT_CLAMP, LOGIT_CLAMP]`.
pub const LOGIT_CLAMP: f64 = 10.0;

#[derive(Debug, Error)]
pub enum DensityRatioError {
    #[error("expert pairs outside buffer support: {0:?}")]
    SupportCoverage(Vec<(usize, usize)>),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Exact,
    Discriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardConvention {
    /// `log(μ_E / μ_R)`
    LogRatio,
    /// `log(1 + μ_E / μ_R) = -log(1 - D*)`
    Shifted,
}

/// Reward table over `(s, s')` in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticReward {
    pub table: Array2<f64>,
    /// False where the value cannot be trusted: pairs outside `μ_R` support in
    /// exact mode, or `μ_E = 0` under the plain log-ratio (value `-inf`).
    pub usable: Array2<bool>,
    pub mode: RewardMode,
    pub convention: RewardConvention,
}

impl SyntheticReward {
    pub fn constant(n_states: usize, value: f64) -> Self {
        Self {
            table: Array2::from_elem((n_states, n_states), value),
            usable: Array2::from_elem((n_states, n_states), true),
            mode: RewardMode::Exact,
            convention: RewardConvention::LogRatio,
        }
    }

    pub fn from_table(table: Array2<f64>) -> Self {
        let usable = table.mapv(f64::is_finite);
        Self { table, usable, mode: RewardMode::Exact, convention: RewardConvention::LogRatio }
    }

    pub fn n_states(&self) -> usize {
        self.table.nrows()
    }

    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.table[[s, t]]
    }
}

/// Ratio reward from two `(s, s')` tables, flagging unusable pairs instead of
/// failing. Pairs with `μ_R = 0` get value 0.
pub fn log_ratio_table(
    mu_expert: &Array2<f64>,
    mu_buffer: &Array2<f64>,
    convention: RewardConvention,
) -> Result<SyntheticReward, DensityRatioError> {
    if mu_expert.dim() != mu_buffer.dim() {
        return Err(DensityRatioError::Shape(mu_expert.dim(), mu_buffer.dim()));
    }
    let mut table = Array2::zeros(mu_expert.raw_dim());
    let mut usable = Array2::from_elem(mu_expert.raw_dim(), false);
    for ((idx, &pe), &pr) in mu_expert.indexed_iter().zip(mu_buffer.iter()) {
        if pr <= 0.0 {
            continue;
        }
        let ratio = pe / pr;
        let value = match convention {
            RewardConvention::LogRatio => ratio.ln(),
            RewardConvention::Shifted => ratio.ln_1p(),
        };
        table[idx] = value;
        usable[idx] = value.is_finite();
    }
    Ok(SyntheticReward { table, usable, mode: RewardMode::Exact, convention })
}

/// Exact ratio reward. Fails when some expert pair has no buffer mass.
pub fn exact_log_ratio(
    mu_expert: &Array2<f64>,
    mu_buffer: &Array2<f64>,
    convention: RewardConvention,
) -> Result<SyntheticReward, DensityRatioError> {
    let reward = log_ratio_table(mu_expert, mu_buffer, convention)?;
    let uncovered: Vec<(usize, usize)> = mu_expert
        .indexed_iter()
        .filter(|&(idx, &pe)| pe > 0.0 && mu_buffer[idx] <= 0.0)
        .map(|(idx, _)| idx)
        .collect();
    if uncovered.is_empty() {
        Ok(reward)
    } else {
        Err(DensityRatioError::SupportCoverage(uncovered))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Samples drawn from each side per step; `None` uses the full empirical
    /// distributions.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { learning_rate: 1.0, steps: 2_000, batch_size: None, seed: 0 }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Tabular discriminator `D(s,s') = sigmoid(logit[s][s'])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub logits: Array2<f64>,
}

impl Discriminator {
    pub fn new(n_states: usize) -> Self {
        Self { logits: Array2::zeros((n_states, n_states)) }
    }

    pub fn n_states(&self) -> usize {
        self.logits.nrows()
    }

    pub fn prob(&self, s: usize, t: usize) -> f64 {
        sigmoid(self.logits[[s, t]])
    }

    /// Logistic loss `-E_E[log D] - E_R[log(1 - D)]` on two pair samples.
    pub fn loss(&self, expert_pairs: &[(usize, usize)], buffer_pairs: &[(usize, usize)]) -> f64 {
        let mean = |pairs: &[(usize, usize)], f: &dyn Fn(f64) -> f64| {
            if pairs.is_empty() {
                0.0
            } else {
                pairs.iter().map(|&(s, t)| f(self.logits[[s, t]])).sum::<f64>() / pairs.len() as f64
            }
        };
        // -log sigmoid(l) = softplus(-l), -log(1 - sigmoid(l)) = softplus(l)
        mean(expert_pairs, &|l| softplus(-l)) + mean(buffer_pairs, &|l| softplus(l))
    }

    /// Gradient ascent on `E_E[log D] + E_R[log(1 - D)]`.
    ///
    /// Per cell, the ascent direction `w_E (1 - D) - w_R D` is divided by
    /// `w_E + w_R`, the cell's total weight in the step, so rarely visited
    /// cells move as fast as frequent ones. The fixed point is unchanged:
    /// `D = w_E / (w_E + w_R)`.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        expert_pairs: &[(usize, usize)],
        buffer_pairs: &[(usize, usize)],
        config: &DiscriminatorConfig,
        rng: &mut R,
    ) {
        if expert_pairs.is_empty() || buffer_pairs.is_empty() {
            return;
        }
        let n = self.n_states();
        match config.batch_size {
            None => self.train_on_weights(&weights(expert_pairs, n), &weights(buffer_pairs, n), config.learning_rate, config.steps),
            Some(b) => {
                for _ in 0..config.steps {
                    let e: Vec<_> = (0..b).map(|_| expert_pairs[rng.random_range(0..expert_pairs.len())]).collect();
                    let r: Vec<_> = (0..b).map(|_| buffer_pairs[rng.random_range(0..buffer_pairs.len())]).collect();
                    self.train_on_weights(&weights(&e, n), &weights(&r, n), config.learning_rate, 1);
                }
            }
        }
    }

    /// Full-batch version of [`Discriminator::train`] on pair frequency tables.
    pub fn train_on_weights(&mut self, expert: &Array2<f64>, buffer: &Array2<f64>, learning_rate: f64, steps: usize) {
        for _ in 0..steps {
            for (l, (&pe, &pr)) in self.logits.iter_mut().zip(expert.iter().zip(buffer.iter())) {
                let total = pe + pr;
                if total <= 0.0 {
                    continue;
                }
                let d = sigmoid(*l);
                let step = learning_rate * (pe * (1.0 - d) - pr * d) / total;
                *l = (*l + step).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            }
        }
    }

    /// Logistic loss on pair frequency tables.
    pub fn loss_on_weights(&self, expert: &Array2<f64>, buffer: &Array2<f64>) -> f64 {
        let mut total = 0.0;
        for ((&l, &pe), &pr) in self.logits.iter().zip(expert.iter()).zip(buffer.iter()) {
            total += pe * softplus(-l) + pr * softplus(l);
        }
        total
    }
}

fn weights(pairs: &[(usize, usize)], n: usize) -> Array2<f64> {
    let mut w = Array2::zeros((n, n));
    for &(s, t) in pairs {
        w[[s, t]] += 1.0;
    }
    w / pairs.len().max(1) as f64
}

/// Trains a fresh discriminator on expert vs buffer pairs.
pub fn train_discriminator(
    n_states: usize,
    expert_pairs: &[(usize, usize)],
    buffer_pairs: &[(usize, usize)],
    config: &DiscriminatorConfig,
) -> Discriminator {
    let mut d = Discriminator::new(n_states);
    let mut rng = seeded_rng(config.seed);
    d.train(expert_pairs, buffer_pairs, config, &mut rng);
    d
}

/// `r(s,s') = -log(1 - D(s,s'))`, strictly positive.
pub fn reward_from_discriminator(d: &Discriminator) -> SyntheticReward {
    let table = d.logits.mapv(softplus);
    let usable = Array2::from_elem(table.raw_dim(), true);
    SyntheticReward { table, usable, mode: RewardMode::Discriminator, convention: RewardConvention::Shifted }
}
