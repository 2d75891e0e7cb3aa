//! Episode sampling. Three regimes: every agent on the shared policy, one
//! focal agent deviating to another policy, and the weighted regime where
//! the focal agent is drawn per episode from a simplex of sample ratios.
//!
//! Each episode runs on its own counter-derived RNG stream and batches are
//! aggregated in episode order, so results are bit-identical regardless of
//! how many threads execute the batch.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::market::{sample_initial_state, step, AgentLocalState, MarketConfig};
use crate::policy::{sample_action, PolicyParams};
use crate::{Error, Result};

/// Which policy each agent follows during an episode.
#[derive(Debug, Clone, Copy)]
pub enum PolicyAssignment<'a> {
    /// All agents use the same parameters.
    Shared(&'a PolicyParams),
    /// `focal` uses `focal_policy`; everyone else uses `others`.
    Focal { focal: usize, focal_policy: &'a PolicyParams, others: &'a PolicyParams },
    /// One policy per agent.
    PerAgent(&'a [PolicyParams]),
}

impl<'a> PolicyAssignment<'a> {
    pub fn policy_for(&self, agent: usize) -> &'a PolicyParams {
        match self {
            PolicyAssignment::Shared(p) => p,
            PolicyAssignment::Focal { focal, focal_policy, others } => {
                if agent == *focal {
                    focal_policy
                } else {
                    others
                }
            }
            PolicyAssignment::PerAgent(ps) => &ps[agent],
        }
    }

    pub fn focal(&self) -> Option<usize> {
        match self {
            PolicyAssignment::Focal { focal, .. } => Some(*focal),
            _ => None,
        }
    }
}

/// Everything observed at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Local states at the start of the step.
    pub states: Vec<AgentLocalState>,
    /// Sampled action per agent; `None` for agents inactive that step.
    pub actions: Vec<Option<usize>>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
}

/// One sampled episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    /// The deviating agent in focal/weighted regimes.
    pub focal: Option<usize>,
    pub total_rewards: Vec<f64>,
    pub total_costs: Vec<f64>,
}

impl Trajectory {
    /// `rtg[i][t] = sum of rewards[i][t'] for t' >= t`, with `rtg[i][T] = 0`.
    pub fn reward_to_go(&self) -> Vec<Vec<f64>> {
        let n = self.total_rewards.len();
        let horizon = self.steps.len();
        let mut rtg = vec![vec![0.0; horizon + 1]; n];
        for t in (0..horizon).rev() {
            for (i, row) in rtg.iter_mut().enumerate() {
                row[t] = self.steps[t].rewards[i] + row[t + 1];
            }
        }
        rtg
    }
}

/// A batch of independent episodes.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    pub episodes: Vec<Trajectory>,
    pub n_agents: usize,
    pub horizon: usize,
}

impl TrajectoryBatch {
    /// Mean total reward per agent.
    pub fn mean_returns(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_agents];
        for ep in &self.episodes {
            for (s, r) in sums.iter_mut().zip(&ep.total_rewards) {
                *s += r;
            }
        }
        let count = self.episodes.len().max(1) as f64;
        sums.iter_mut().for_each(|s| *s /= count);
        sums
    }

    /// Mean of the focal agent's return across episodes.
    pub fn mean_focal_return(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .episodes
            .iter()
            .map(|ep| ep.total_rewards[ep.focal.expect("focal annotation")])
            .sum();
        total / self.episodes.len() as f64
    }

    /// Episodes per focal index.
    pub fn focal_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_agents];
        for ep in &self.episodes {
            if let Some(f) = ep.focal {
                counts[f] += 1;
            }
        }
        counts
    }

    /// Mean summed cost across agents (per-episode platform revenue).
    pub fn mean_revenue(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        let total: f64 = self.episodes.iter().map(|ep| ep.total_costs.iter().sum::<f64>()).sum();
        total / self.episodes.len() as f64
    }
}

/// Monte-Carlo return estimates with the sample sizes behind them.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ReturnEstimates {
    /// Mean return per agent when everyone follows the shared policy.
    pub g_shared: Vec<f64>,
    /// Mean return of agent i when it deviates and the rest stay shared.
    pub g_focal: Vec<f64>,
    /// Mean focal return in the weighted regime.
    pub g_weighted: f64,
    pub episode_counts: Vec<usize>,
}

/// Run one episode under the given assignment.
pub fn run_episode(
    assignment: &PolicyAssignment,
    config: &MarketConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let n = config.n_agents;
    let mut state = sample_initial_state(config, rng);
    let mut steps = Vec::with_capacity(config.horizon);
    let mut total_rewards = vec![0.0; n];
    let mut total_costs = vec![0.0; n];
    for _ in 0..config.horizon {
        let actions: Vec<Option<usize>> = state
            .locals
            .iter()
            .map(|local| {
                local
                    .active
                    .then(|| sample_action(assignment.policy_for(local.agent_index), local, rng))
            })
            .collect();
        let joint: Vec<usize> = actions.iter().map(|a| a.unwrap_or(0)).collect();
        let (next, rewards, costs) = step(&state, &joint, config, rng)?;
        for i in 0..n {
            total_rewards[i] += rewards[i];
            total_costs[i] += costs[i];
        }
        steps.push(StepRecord { states: state.locals.clone(), actions, rewards, costs });
        state = next;
    }
    Ok(Trajectory { steps, focal: assignment.focal(), total_rewards, total_costs })
}

fn episode_seeds(rng: &mut ChaCha8Rng, episodes: usize) -> Vec<[u8; 32]> {
    (0..episodes)
        .map(|_| {
            let mut seed = [0u8; 32];
            rng.fill_bytes(&mut seed);
            seed
        })
        .collect()
}

fn batch_from<F>(config: &MarketConfig, episodes: usize, rng: &mut ChaCha8Rng, run: F) -> Result<TrajectoryBatch>
where
    F: Fn(&mut ChaCha8Rng) -> Result<Trajectory> + Sync,
{
    if episodes == 0 {
        return Err(Error::Precondition("episode count must be >= 1".into()));
    }
    let seeds = episode_seeds(rng, episodes);
    let episodes: Result<Vec<Trajectory>> = seeds
        .par_iter()
        .map(|seed| {
            let mut episode_rng = ChaCha8Rng::from_seed(*seed);
            run(&mut episode_rng)
        })
        .collect();
    Ok(TrajectoryBatch { episodes: episodes?, n_agents: config.n_agents, horizon: config.horizon })
}

/// Sample episodes where every agent follows `theta`.
pub fn rollout_shared(
    theta: &PolicyParams,
    config: &MarketConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryBatch> {
    batch_from(config, episodes, rng, |r| run_episode(&PolicyAssignment::Shared(theta), config, r))
}

/// Sample episodes where agent `focal` follows `rho` and everyone else `theta`.
pub fn rollout_focal(
    rho: &PolicyParams,
    theta: &PolicyParams,
    focal: usize,
    config: &MarketConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryBatch> {
    if focal >= config.n_agents {
        return Err(Error::Precondition(format!(
            "focal agent {focal} out of range (N = {})",
            config.n_agents
        )));
    }
    batch_from(config, episodes, rng, |r| {
        run_episode(&PolicyAssignment::Focal { focal, focal_policy: rho, others: theta }, config, r)
    })
}

/// Sample episodes where a per-episode focal agent drawn from `kappa`
/// follows `rho` against `theta`.
pub fn rollout_weighted(
    rho: &PolicyParams,
    theta: &PolicyParams,
    kappa: &[f64],
    config: &MarketConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryBatch> {
    validate_simplex(kappa, config.n_agents)?;
    batch_from(config, episodes, rng, |r| {
        let draw: f64 = r.gen_range(0.0..1.0);
        let mut cum = 0.0;
        let mut focal = config.n_agents - 1;
        for (i, &k) in kappa.iter().enumerate() {
            cum += k;
            if draw < cum {
                focal = i;
                break;
            }
        }
        run_episode(&PolicyAssignment::Focal { focal, focal_policy: rho, others: theta }, config, r)
    })
}

/// Sample episodes where `focal` follows `rho` and every other agent `j`
/// follows its own `policies[j]`; episodes carry the focal annotation.
pub fn rollout_profile_focal(
    rho: &PolicyParams,
    policies: &[PolicyParams],
    focal: usize,
    config: &MarketConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryBatch> {
    if focal >= config.n_agents {
        return Err(Error::Precondition(format!(
            "focal agent {focal} out of range (N = {})",
            config.n_agents
        )));
    }
    let mut assignment = policies.to_vec();
    assignment[focal] = rho.clone();
    let mut batch = rollout_per_agent(&assignment, config, episodes, rng)?;
    for ep in &mut batch.episodes {
        ep.focal = Some(focal);
    }
    Ok(batch)
}

/// Sample episodes where agent `i` follows `policies[i]`.
pub fn rollout_per_agent(
    policies: &[PolicyParams],
    config: &MarketConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryBatch> {
    if policies.len() != config.n_agents {
        return Err(Error::ShapeMismatch {
            expected: config.n_agents,
            got: policies.len(),
            context: "per-agent policies",
        });
    }
    batch_from(config, episodes, rng, |r| run_episode(&PolicyAssignment::PerAgent(policies), config, r))
}

pub(crate) fn validate_simplex(kappa: &[f64], n: usize) -> Result<()> {
    if kappa.len() != n {
        return Err(Error::ShapeMismatch { expected: n, got: kappa.len(), context: "kappa" });
    }
    if kappa.iter().any(|&k| !k.is_finite() || k < 0.0) {
        return Err(Error::BadSimplex("negative or non-finite entry".into()));
    }
    let total: f64 = kappa.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::BadSimplex(format!("entries sum to {total}")));
    }
    Ok(())
}
