//! Constraint evaluation: how much any single agent could gain by
//! unilaterally deviating from the shared policy. Best responses are trained
//! with plain policy gradients against the frozen opponents; gaps are
//! normalized by social welfare, and the largest gap is the exploitability
//! of the joint policy.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpg::TrainConfig;
use crate::gradients::grad_focal_return;
use crate::market::MarketConfig;
use crate::policy::PolicyParams;
use crate::rollout::{rollout_focal, rollout_per_agent, rollout_profile_focal, rollout_shared};
use crate::{Error, Result};

/// Evaluation of the constraint under one trained policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExploitReport {
    /// Trained best-response return per agent.
    pub br_returns: Vec<f64>,
    /// Return per agent under the shared policy.
    pub g_theta: Vec<f64>,
    pub social_welfare: f64,
    /// Per-agent normalized gaps, clamped at zero.
    pub gaps: Vec<f64>,
    pub max_exploitability: f64,
    pub epsilon_norm: f64,
    pub compliant: bool,
    /// Best-response training budget behind the numbers; an undertrained
    /// best response understates exploitability.
    pub br_train_steps: usize,
    pub br_episodes: usize,
}

/// Train a best response for one agent with the others frozen at `theta`.
/// Returns the trained policy and its estimated unilateral return.
pub fn train_best_response(
    agent: usize,
    theta: &PolicyParams,
    env: &MarketConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PolicyParams, f64)> {
    if agent >= env.n_agents {
        return Err(Error::Precondition(format!(
            "agent {agent} out of range (N = {})",
            env.n_agents
        )));
    }
    // a uniform start explores every bid level; warm-starting from theta
    // would have to crawl out of its collapsed distribution
    let mut br = PolicyParams::zeros(theta.arch);
    for _ in 0..cfg.br_train_steps {
        let batch = rollout_focal(&br, theta, agent, env, cfg.br_episodes, rng)?;
        let grad = grad_focal_return(&batch, &br, cfg.use_baseline)?;
        br.add_scaled(&grad, cfg.br_lr)?;
    }
    let eval = rollout_focal(&br, theta, agent, env, cfg.eval_episodes, rng)?;
    let br_return = eval.mean_returns()[agent];
    Ok((br, br_return))
}

/// As [`train_best_response`], with the opponents frozen at their own
/// per-agent policies.
pub fn train_best_response_profile(
    agent: usize,
    policies: &[PolicyParams],
    env: &MarketConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PolicyParams, f64)> {
    if agent >= env.n_agents {
        return Err(Error::Precondition(format!(
            "agent {agent} out of range (N = {})",
            env.n_agents
        )));
    }
    let mut br = PolicyParams::zeros(policies[agent].arch);
    for _ in 0..cfg.br_train_steps {
        let batch = rollout_profile_focal(&br, policies, agent, env, cfg.br_episodes, rng)?;
        let grad = grad_focal_return(&batch, &br, cfg.use_baseline)?;
        br.add_scaled(&grad, cfg.br_lr)?;
    }
    let eval = rollout_profile_focal(&br, policies, agent, env, cfg.eval_episodes, rng)?;
    let br_return = eval.mean_returns()[agent];
    Ok((br, br_return))
}

/// Exploitability of a per-agent policy profile.
pub fn max_exploitability_profile(
    policies: &[PolicyParams],
    env: &MarketConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ExploitReport> {
    let joint = rollout_per_agent(policies, env, cfg.eval_episodes, rng)?;
    let g_theta = joint.mean_returns();
    let social_welfare: f64 = g_theta.iter().sum();
    if social_welfare <= 0.0 {
        return Err(Error::Precondition(format!(
            "social welfare must be positive to normalize gaps, got {social_welfare}"
        )));
    }
    let br_returns: Vec<f64> = (0..env.n_agents)
        .map(|i| train_best_response_profile(i, policies, env, cfg, rng).map(|(_, r)| r))
        .collect::<Result<_>>()?;
    Ok(report_from_returns(&br_returns, &g_theta, social_welfare, cfg))
}

/// Train a best response per agent and report the normalized gaps.
pub fn max_exploitability(
    theta: &PolicyParams,
    env: &MarketConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ExploitReport> {
    let shared = rollout_shared(theta, env, cfg.eval_episodes, rng)?;
    let g_theta = shared.mean_returns();
    let social_welfare: f64 = g_theta.iter().sum();
    if social_welfare <= 0.0 {
        return Err(Error::Precondition(format!(
            "social welfare must be positive to normalize gaps, got {social_welfare}"
        )));
    }
    let br_returns: Vec<f64> = (0..env.n_agents)
        .map(|i| train_best_response(i, theta, env, cfg, rng).map(|(_, r)| r))
        .collect::<Result<_>>()?;
    Ok(report_from_returns(&br_returns, &g_theta, social_welfare, cfg))
}

/// Pure gap arithmetic, separated so it can be checked directly.
pub fn report_from_returns(
    br_returns: &[f64],
    g_theta: &[f64],
    social_welfare: f64,
    cfg: &TrainConfig,
) -> ExploitReport {
    let gaps: Vec<f64> = br_returns
        .iter()
        .zip(g_theta)
        .map(|(br, g)| ((br - g).max(0.0)) / social_welfare)
        .collect();
    let max_exploitability = gaps.iter().cloned().fold(0.0_f64, f64::max);
    ExploitReport {
        br_returns: br_returns.to_vec(),
        g_theta: g_theta.to_vec(),
        social_welfare,
        gaps,
        max_exploitability,
        epsilon_norm: cfg.epsilon_norm,
        compliant: max_exploitability <= cfg.epsilon_norm,
        br_train_steps: cfg.br_train_steps,
        br_episodes: cfg.br_episodes,
    }
}

/// Fraction of per-seed exploitability results within the tolerance.
pub fn compliance_rate(results: &[f64], epsilon_norm: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Precondition("compliance rate needs at least one result".into()));
    }
    let within = results.iter().filter(|&&m| m <= epsilon_norm).count();
    Ok(within as f64 / results.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{ValueAtom, ValueModel};
    use crate::policy::Arch;
    use rand::SeedableRng;

    #[test]
    fn gap_formula_direct() {
        let cfg = TrainConfig { epsilon_norm: 0.08, ..TrainConfig::default() };
        let report = report_from_returns(&[10.0, 8.0], &[9.0, 8.0], 17.0, &cfg);
        assert!((report.gaps[0] - 1.0 / 17.0).abs() < 1e-15);
        assert_eq!(report.gaps[1], 0.0);
        assert!((report.max_exploitability - 1.0 / 17.0).abs() < 1e-15);
        assert!(report.compliant); // 0.0588 <= 0.08
    }

    #[test]
    fn negative_gaps_clamped() {
        let cfg = TrainConfig::default();
        let report = report_from_returns(&[7.0], &[9.0], 9.0, &cfg);
        assert_eq!(report.gaps[0], 0.0);
        assert_eq!(report.max_exploitability, 0.0);
    }

    #[test]
    fn exploitability_scale_invariant() {
        let cfg = TrainConfig::default();
        let base = report_from_returns(&[10.0, 8.0], &[9.0, 8.0], 17.0, &cfg);
        let scaled = report_from_returns(&[30.0, 24.0], &[27.0, 24.0], 51.0, &cfg);
        assert!((base.max_exploitability - scaled.max_exploitability).abs() < 1e-15);
    }

    #[test]
    fn compliance_rate_examples() {
        assert!((compliance_rate(&[0.05, 0.07, 0.20], 0.08).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(compliance_rate(&[0.0, 0.0], 0.0).unwrap(), 1.0);
        assert_eq!(compliance_rate(&[0.1, 0.2], 0.0).unwrap(), 0.0);
        assert!(compliance_rate(&[], 0.1).is_err());
    }

    #[test]
    fn dominant_strategy_best_response_reaches_the_prize() {
        // one agent, one step: any positive bid wins value 1 at the reserve
        let env = MarketConfig {
            n_agents: 1,
            horizon: 1,
            impressions_per_step: 1,
            budgets: vec![5.0],
            value_model: ValueModel::Discrete {
                bases: vec![1.0],
                atoms: vec![ValueAtom { prob: 1.0, multiplier: 1.0 }],
                exchangeable: false,
            },
            reserve_price: 0.0,
            bid_levels: vec![0.0, 1.0],
            seed: 0,
        };
        let cfg = TrainConfig {
            br_train_steps: 120,
            br_episodes: 16,
            eval_episodes: 256,
            embed_dim: 2,
            ..TrainConfig::default()
        };
        let theta = PolicyParams::zeros(Arch::new(2, 1, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, br_return) = train_best_response(0, &theta, &env, &cfg, &mut rng).unwrap();
        assert!(br_return > 0.95, "best response return {br_return}");
    }

    #[test]
    fn symmetric_market_symmetric_gaps() {
        let env = MarketConfig {
            n_agents: 2,
            horizon: 2,
            impressions_per_step: 2,
            budgets: vec![2.0, 2.0],
            value_model: ValueModel::Discrete {
                bases: vec![1.0, 1.3],
                atoms: vec![
                    ValueAtom { prob: 0.5, multiplier: 0.8 },
                    ValueAtom { prob: 0.5, multiplier: 1.2 },
                ],
                exchangeable: true,
            },
            reserve_price: 0.1,
            bid_levels: vec![0.0, 0.6, 1.2],
            seed: 0,
        };
        let cfg = TrainConfig {
            br_train_steps: 150,
            br_episodes: 32,
            eval_episodes: 4096,
            embed_dim: 2,
            ..TrainConfig::default()
        };
        // symmetric policy: zero parameters share the embedding rows
        let theta = PolicyParams::zeros(Arch::new(3, 2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let report = max_exploitability(&theta, &env, &cfg, &mut rng).unwrap();
        assert!(
            (report.gaps[0] - report.gaps[1]).abs() < 0.05,
            "gaps {:?} should match by symmetry",
            report.gaps
        );
    }
}
