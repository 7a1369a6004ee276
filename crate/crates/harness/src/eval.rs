//! Exact evaluation of a saved policy against an expert.

use serde::{Deserialize, Serialize};

use opolo_core::divergence::{inverse_action_kl, kl};
use opolo_core::mdp::{FiniteMdp, TabularPolicy};
use opolo_core::occupancy::{compute_occupancy, return_from_occupancy};
use opolo_core::opolo::TrainedAgent;

use crate::error::HarnessError;
use crate::output::content_hash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env_hash: String,
    /// `None` when the environment carries no reward.
    #[serde(rename = "return")]
    pub ret: Option<f64>,
    pub expert_return: Option<f64>,
    pub normalized_return: Option<f64>,
    pub transition_kl: f64,
    pub state_action_kl: f64,
    pub inverse_action_kl: f64,
}

pub fn evaluate_policy(policy: &TabularPolicy, mdp: &FiniteMdp, expert: &TabularPolicy) -> Result<EvalReport, HarnessError> {
    mdp.check_policy(policy)?;
    mdp.check_policy(expert)?;
    let agent = compute_occupancy(mdp, policy)?;
    let exp = compute_occupancy(mdp, expert)?;
    let (ret, expert_return) = match mdp.reward() {
        Some(r) => (
            Some(return_from_occupancy(&agent, r, mdp.discount())),
            Some(return_from_occupancy(&exp, r, mdp.discount())),
        ),
        None => (None, None),
    };
    Ok(EvalReport {
        env_hash: content_hash(mdp),
        ret,
        expert_return,
        normalized_return: ret.zip(expert_return).map(|(a, e)| a / e),
        transition_kl: kl(&agent.mu_ss, &exp.mu_ss)?,
        state_action_kl: kl(&agent.mu_sa, &exp.mu_sa)?,
        inverse_action_kl: inverse_action_kl(&agent, &exp)?,
    })
}

pub fn evaluate_checkpoint(agent: &TrainedAgent, mdp: &FiniteMdp, expert: &TabularPolicy) -> Result<EvalReport, HarnessError> {
    evaluate_policy(&agent.policy, mdp, expert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use opolo_core::envs::{gen_gridworld, make_counterexample_mdp, GridworldSpec};
    use opolo_core::planning::optimal_expert;

    #[test]
    fn expert_against_itself() {
        let mdp = gen_gridworld(&GridworldSpec::default()).unwrap();
        let expert = optimal_expert(&mdp).unwrap();
        let r = evaluate_policy(&expert, &mdp, &expert).unwrap();
        assert_eq!(r.transition_kl, 0.0);
        assert_eq!(r.inverse_action_kl, 0.0);
        assert_eq!(r.normalized_return, Some(1.0));
    }

    #[test]
    fn rewardless_env_reports_divergences_only() {
        let ce = make_counterexample_mdp();
        let r = evaluate_policy(&ce.learner, &ce.mdp, &ce.expert).unwrap();
        assert!(r.ret.is_none());
        assert!(r.inverse_action_kl > 1.0);
        assert!(evaluate_policy(&TabularPolicy::uniform(2, 4), &ce.mdp, &ce.expert).is_err());
    }
}
