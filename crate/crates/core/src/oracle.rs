//! Exact brute-force evaluation of tiny market instances.
//!
//! Instead of sampling, every stochastic branch (value draws, action draws,
//! focal draws) is enumerated with its exact probability, which gives
//! ground-truth expected returns, best responses, and gradient targets via
//! finite differences. Every Monte-Carlo estimator in this crate is
//! validated against these routines.

use std::collections::BTreeMap;

use crate::market::{
    impression_from_multipliers, sample_initial_state, step_with_impressions, AgentLocalState,
    GlobalState, MarketConfig, ValueAtom, ValueModel,
};
use crate::policy::{distribution, PolicyParams};
use crate::rollout::{validate_simplex, StepRecord, Trajectory};
use crate::{Error, Result};

/// Hard cap on enumerated trajectories per evaluation.
pub const MAX_PATHS: u64 = 10_000_000;
/// Hard cap on candidate deterministic policies in best-response search.
pub const MAX_BR_MAPS: u64 = 1_000_000;

/// A market small enough to enumerate: at most 3 agents, 3 steps, 1
/// impression per step, 3 bid levels, and a discrete value support.
#[derive(Debug, Clone)]
pub struct TinyConfig {
    pub market: MarketConfig,
}

impl TinyConfig {
    pub fn new(market: MarketConfig) -> Result<Self> {
        market.validate()?;
        if market.n_agents > 3 {
            return Err(Error::InvalidConfig("tiny instance: n_agents must be <= 3".into()));
        }
        if market.horizon > 3 {
            return Err(Error::InvalidConfig("tiny instance: horizon must be <= 3".into()));
        }
        if market.impressions_per_step != 1 {
            return Err(Error::InvalidConfig(
                "tiny instance: impressions_per_step must be 1".into(),
            ));
        }
        if market.n_actions() > 3 {
            return Err(Error::InvalidConfig("tiny instance: at most 3 bid levels".into()));
        }
        let atoms = match &market.value_model {
            ValueModel::Discrete { atoms, .. } => atoms.len(),
            ValueModel::Uniform { .. } => {
                return Err(Error::InvalidConfig(
                    "tiny instance: value model must be discrete".into(),
                ));
            }
        };
        if atoms > 3 {
            return Err(Error::InvalidConfig("tiny instance: at most 3 value atoms".into()));
        }
        let cfg = TinyConfig { market };
        let estimated = cfg.worst_case_paths(cfg.market.n_actions() as u64);
        if estimated > MAX_PATHS {
            return Err(Error::EnumerationBound { estimated, limit: MAX_PATHS });
        }
        Ok(cfg)
    }

    fn atoms(&self) -> &[crate::market::ValueAtom] {
        match &self.market.value_model {
            ValueModel::Discrete { atoms, .. } => atoms,
            ValueModel::Uniform { .. } => unreachable!("validated discrete"),
        }
    }

    fn exchangeable(&self) -> bool {
        matches!(&self.market.value_model, ValueModel::Discrete { exchangeable: true, .. })
    }

    fn worst_case_paths(&self, support: u64) -> u64 {
        let n = self.market.n_agents as u32;
        let per_step = support
            .saturating_pow(n)
            .saturating_mul((self.atoms().len() as u64).saturating_pow(n));
        let initial: u64 = if self.exchangeable() {
            (1..=self.market.n_agents as u64).product()
        } else {
            1
        };
        per_step.saturating_pow(self.market.horizon as u32).saturating_mul(initial)
    }

    /// The initial-state distribution: a single deterministic state for a
    /// fixed base assignment, or one state per base permutation under the
    /// exchangeable model.
    pub fn initial_states(&self) -> Vec<(GlobalState, f64)> {
        let template = {
            // the rng is unused on the fixed discrete path
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
            let mut fixed = self.market.clone();
            if let ValueModel::Discrete { exchangeable, .. } = &mut fixed.value_model {
                *exchangeable = false;
            }
            sample_initial_state(&fixed, &mut rng)
        };
        if !self.exchangeable() {
            return vec![(template, 1.0)];
        }
        let bases: Vec<f64> = match &self.market.value_model {
            ValueModel::Discrete { bases, .. } => bases.clone(),
            ValueModel::Uniform { .. } => unreachable!("validated discrete"),
        };
        let perms = permutations(bases.len());
        let weight = 1.0 / perms.len() as f64;
        perms
            .into_iter()
            .map(|perm| {
                let mut state = template.clone();
                for (i, &src) in perm.iter().enumerate() {
                    state.locals[i].context[0] = bases[src];
                }
                (state, weight)
            })
            .collect()
    }

    /// Two heterogeneous agents with budgets that bind under high bids.
    /// N = 2, T = 2, M = 1, K = 3.
    pub fn two_agent() -> Self {
        TinyConfig::new(MarketConfig {
            n_agents: 2,
            horizon: 2,
            impressions_per_step: 1,
            budgets: vec![1.2, 1.5],
            value_model: ValueModel::Discrete {
                bases: vec![1.0, 1.3],
                atoms: vec![
                    crate::market::ValueAtom { prob: 0.5, multiplier: 0.8 },
                    crate::market::ValueAtom { prob: 0.5, multiplier: 1.2 },
                ],
                exchangeable: false,
            },
            reserve_price: 0.1,
            bid_levels: vec![0.0, 0.6, 1.2],
            seed: 0,
        })
        .expect("valid tiny config")
    }

    /// Same structure as [`TinyConfig::two_agent`] but with slack budgets,
    /// so bidding the top multiplier is dominant.
    pub fn two_agent_slack() -> Self {
        let mut tiny = TinyConfig::two_agent();
        tiny.market.budgets = vec![50.0, 50.0];
        TinyConfig::new(tiny.market).expect("valid tiny config")
    }

    /// Symmetric pair of agents: equal budgets, bases assigned by a fair
    /// per-episode permutation, and bid levels chosen so bids never tie
    /// within an episode.
    pub fn symmetric_two_agent() -> Self {
        let mut tiny = TinyConfig::two_agent();
        tiny.market.budgets = vec![1.4, 1.4];
        tiny.market.value_model = ValueModel::Discrete {
            bases: vec![1.0, 1.3],
            atoms: vec![
                crate::market::ValueAtom { prob: 0.5, multiplier: 0.8 },
                crate::market::ValueAtom { prob: 0.5, multiplier: 1.2 },
            ],
            exchangeable: true,
        };
        TinyConfig::new(tiny.market).expect("valid tiny config")
    }

    /// One agent, one step, one impression: a two-armed bandit.
    pub fn single_agent_bandit() -> Self {
        TinyConfig::new(MarketConfig {
            n_agents: 1,
            horizon: 1,
            impressions_per_step: 1,
            budgets: vec![5.0],
            value_model: ValueModel::Discrete {
                bases: vec![1.0],
                atoms: vec![crate::market::ValueAtom { prob: 1.0, multiplier: 1.0 }],
                exchangeable: false,
            },
            reserve_price: 0.1,
            bid_levels: vec![0.0, 1.0],
            seed: 0,
        })
        .expect("valid tiny config")
    }
}

/// Observation key for deterministic best-response policies: everything an
/// agent can condition on that varies across an episode — the time step,
/// the remaining budget, and the episode's base-value context.
pub type ObsKey = (usize, u64, u64);

pub fn obs_key(local: &AgentLocalState) -> ObsKey {
    (local.step, local.budget_remaining.to_bits(), local.context[0].to_bits())
}

/// A deterministic map from local observations to actions.
#[derive(Debug, Clone)]
pub struct ObsPolicy {
    pub actions: BTreeMap<ObsKey, usize>,
    pub fallback: usize,
}

impl ObsPolicy {
    pub fn action_for(&self, local: &AgentLocalState) -> usize {
        *self.actions.get(&obs_key(local)).unwrap_or(&self.fallback)
    }
}

/// Per-agent policy as seen by the enumerator.
#[derive(Clone, Copy)]
pub enum OraclePolicy<'a> {
    Params(&'a PolicyParams),
    Table(&'a ObsPolicy),
}

impl<'a> OraclePolicy<'a> {
    fn support(&self, local: &AgentLocalState, n_actions: usize) -> Vec<(usize, f64)> {
        match self {
            OraclePolicy::Params(p) => {
                let dist = distribution(p, local);
                (0..n_actions).map(|a| (a, dist.probs[a])).collect()
            }
            OraclePolicy::Table(t) => vec![(t.action_for(local), 1.0)],
        }
    }

    fn max_support(&self, n_actions: u64) -> u64 {
        match self {
            OraclePolicy::Params(_) => n_actions,
            OraclePolicy::Table(_) => 1,
        }
    }
}

/// Compensated (Neumaier) accumulator; enumeration sums thousands of tiny
/// probability-weighted terms and the oracle tolerances are 1e-12.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    sum: f64,
    compensation: f64,
}

impl Accumulator {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

fn check_bound(tiny: &TinyConfig, policies: &[OraclePolicy]) -> Result<()> {
    let k = tiny.market.n_actions() as u64;
    let atom_branches =
        (tiny.atoms().len() as u64).saturating_pow(tiny.market.n_agents as u32);
    let per_step: u64 = policies
        .iter()
        .map(|p| p.max_support(k))
        .try_fold(atom_branches, |acc, s| acc.checked_mul(s))
        .unwrap_or(u64::MAX);
    let estimated = per_step.saturating_pow(tiny.market.horizon as u32);
    if estimated > MAX_PATHS {
        return Err(Error::EnumerationBound { estimated, limit: MAX_PATHS });
    }
    Ok(())
}

/// Enumerate every trajectory under the joint policy and hand each one to
/// `visit` together with its exact probability.
pub fn for_each_trajectory<V>(
    policies: &[OraclePolicy],
    tiny: &TinyConfig,
    mut visit: V,
) -> Result<()>
where
    V: FnMut(&Trajectory, f64),
{
    for_each_trajectory_focal(policies, tiny, None, &mut visit)
}

/// As [`for_each_trajectory`], annotating every trajectory with a focal
/// agent so the weighted-regime estimators can consume them.
pub fn for_each_trajectory_with_focal<V>(
    policies: &[OraclePolicy],
    tiny: &TinyConfig,
    focal: usize,
    mut visit: V,
) -> Result<()>
where
    V: FnMut(&Trajectory, f64),
{
    for_each_trajectory_focal(policies, tiny, Some(focal), &mut visit)
}

fn for_each_trajectory_focal<V>(
    policies: &[OraclePolicy],
    tiny: &TinyConfig,
    focal: Option<usize>,
    visit: &mut V,
) -> Result<()>
where
    V: FnMut(&Trajectory, f64),
{
    let n = tiny.market.n_agents;
    if policies.len() != n {
        return Err(Error::ShapeMismatch { expected: n, got: policies.len(), context: "policies" });
    }
    check_bound(tiny, policies)?;

    let mut steps: Vec<StepRecord> = Vec::with_capacity(tiny.market.horizon);
    for (state, weight) in tiny.initial_states() {
        walk(tiny, policies, focal, state, weight, &mut steps, visit)?;
    }
    Ok(())
}

/// Enumerate every per-agent atom assignment with its joint probability.
fn for_each_atom_assignment(atoms: &[ValueAtom], n: usize, f: &mut dyn FnMut(&[f64], f64)) {
    let mut idx = vec![0usize; n];
    let mut us = vec![0.0; n];
    loop {
        let mut prob = 1.0;
        for (slot, &choice) in idx.iter().enumerate() {
            us[slot] = atoms[choice].multiplier;
            prob *= atoms[choice].prob;
        }
        if prob > 0.0 {
            f(&us, prob);
        }
        let mut pos = 0;
        loop {
            if pos == n {
                return;
            }
            idx[pos] += 1;
            if idx[pos] < atoms.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// All permutations of `0..n` in a deterministic order.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for slot in 0..=rest.len() {
            let mut perm = rest.clone();
            perm.insert(slot, n - 1);
            out.push(perm);
        }
    }
    out
}

fn walk<V>(
    tiny: &TinyConfig,
    policies: &[OraclePolicy],
    focal: Option<usize>,
    state: GlobalState,
    prob: f64,
    steps: &mut Vec<StepRecord>,
    visit: &mut V,
) -> Result<()>
where
    V: FnMut(&Trajectory, f64),
{
    let market = &tiny.market;
    let n = market.n_agents;
    if state.step() >= market.horizon {
        let mut total_rewards = vec![0.0; n];
        let mut total_costs = vec![0.0; n];
        for record in steps.iter() {
            for i in 0..n {
                total_rewards[i] += record.rewards[i];
                total_costs[i] += record.costs[i];
            }
        }
        let traj = Trajectory { steps: steps.clone(), focal, total_rewards, total_costs };
        visit(&traj, prob);
        return Ok(());
    }

    let supports: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            if state.locals[i].active {
                policies[i].support(&state.locals[i], market.n_actions())
            } else {
                vec![(0, 1.0)]
            }
        })
        .collect();

    // odometer over the per-agent supports
    let mut idx = vec![0usize; n];
    loop {
        let mut action_prob = 1.0;
        let mut joint = vec![0usize; n];
        let mut actions: Vec<Option<usize>> = vec![None; n];
        for i in 0..n {
            let (a, p) = supports[i][idx[i]];
            joint[i] = a;
            action_prob *= p;
            if state.locals[i].active {
                actions[i] = Some(a);
            }
        }
        if action_prob > 0.0 {
            let mut result = Ok(());
            for_each_atom_assignment(tiny.atoms(), n, &mut |us, atom_prob| {
                if result.is_err() {
                    return;
                }
                let imp = impression_from_multipliers(&state, us);
                let stepped = step_with_impressions(&state, &joint, &[imp], market);
                let (next, rewards, costs) = match stepped {
                    Ok(v) => v,
                    Err(e) => {
                        result = Err(e);
                        return;
                    }
                };
                steps.push(StepRecord {
                    states: state.locals.clone(),
                    actions: actions.clone(),
                    rewards,
                    costs,
                });
                result =
                    walk(tiny, policies, focal, next, prob * action_prob * atom_prob, steps, visit);
                steps.pop();
            });
            result?;
        }
        // advance odometer
        let mut pos = 0;
        loop {
            if pos == n {
                return Ok(());
            }
            idx[pos] += 1;
            if idx[pos] < supports[pos].len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Exact expected return of every agent under the joint policy.
pub fn exact_returns(policies: &[OraclePolicy], tiny: &TinyConfig) -> Result<Vec<f64>> {
    let n = tiny.market.n_agents;
    let mut acc = vec![Accumulator::default(); n];
    for_each_trajectory(policies, tiny, |traj, prob| {
        for (a, &r) in acc.iter_mut().zip(&traj.total_rewards) {
            a.add(prob * r);
        }
    })?;
    Ok(acc.iter().map(|a| a.value()).collect())
}

/// Joint policy where `focal` plays `rho` and everyone else plays `theta`.
pub fn focal_assignment<'a>(
    rho: &'a PolicyParams,
    theta: &'a PolicyParams,
    focal: usize,
    n: usize,
) -> Vec<OraclePolicy<'a>> {
    (0..n)
        .map(|i| if i == focal { OraclePolicy::Params(rho) } else { OraclePolicy::Params(theta) })
        .collect()
}

/// Exact `G_focal(rho; theta)`.
pub fn exact_focal_return(
    rho: &PolicyParams,
    theta: &PolicyParams,
    focal: usize,
    tiny: &TinyConfig,
) -> Result<f64> {
    let n = tiny.market.n_agents;
    if focal >= n {
        return Err(Error::Precondition(format!("focal {focal} out of range")));
    }
    Ok(exact_returns(&focal_assignment(rho, theta, focal, n), tiny)?[focal])
}

/// Exact weighted return: the focal index is enumerated as the outermost
/// stochastic branch with probability `kappa[i]`, and only the focal agent's
/// rewards are accumulated along each branch.
pub fn exact_weighted_return(
    rho: &PolicyParams,
    theta: &PolicyParams,
    kappa: &[f64],
    tiny: &TinyConfig,
) -> Result<f64> {
    let n = tiny.market.n_agents;
    validate_simplex(kappa, n)?;
    let mut acc = Accumulator::default();
    for (focal, &weight) in kappa.iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let policies = focal_assignment(rho, theta, focal, n);
        for_each_trajectory_focal(&policies, tiny, Some(focal), &mut |traj: &Trajectory, prob| {
            acc.add(weight * prob * traj.total_rewards[focal]);
        })?;
    }
    Ok(acc.value())
}

/// Collect every local observation agent `i` can reach when it is free to
/// play any action while the others follow `theta`.
fn reachable_observations(
    agent: usize,
    theta: &PolicyParams,
    tiny: &TinyConfig,
) -> Result<Vec<ObsKey>> {
    let mut seen = std::collections::BTreeSet::new();

    // Walk the tree with full branching for `agent` (uniform probabilities;
    // only reachability matters) and policy-support branching for others.
    struct Ctx<'a> {
        tiny: &'a TinyConfig,
        theta: &'a PolicyParams,
        agent: usize,
    }
    fn recurse(
        ctx: &Ctx,
        state: &GlobalState,
        seen: &mut std::collections::BTreeSet<ObsKey>,
    ) -> Result<()> {
        let market = &ctx.tiny.market;
        if state.step() >= market.horizon {
            return Ok(());
        }
        if state.locals[ctx.agent].active {
            seen.insert(obs_key(&state.locals[ctx.agent]));
        }
        let n = market.n_agents;
        let supports: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                if !state.locals[i].active {
                    vec![0]
                } else if i == ctx.agent {
                    (0..market.n_actions()).collect()
                } else {
                    let dist = distribution(ctx.theta, &state.locals[i]);
                    (0..market.n_actions()).filter(|&a| dist.probs[a] > 0.0).collect()
                }
            })
            .collect();
        let mut idx = vec![0usize; n];
        loop {
            let joint: Vec<usize> = (0..n).map(|i| supports[i][idx[i]]).collect();
            let mut result = Ok(());
            for_each_atom_assignment(ctx.tiny.atoms(), n, &mut |us, _| {
                if result.is_err() {
                    return;
                }
                let imp = impression_from_multipliers(state, us);
                result = step_with_impressions(state, &joint, &[imp], market)
                    .and_then(|(next, _, _)| recurse(ctx, &next, seen));
            });
            result?;
            let mut pos = 0;
            loop {
                if pos == n {
                    return Ok(());
                }
                idx[pos] += 1;
                if idx[pos] < supports[pos].len() {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
        }
    }

    let ctx = Ctx { tiny, theta, agent };
    for (state, _) in tiny.initial_states() {
        recurse(&ctx, &state, &mut seen)?;
    }
    Ok(seen.into_iter().collect())
}

/// Exhaustive best response for one agent: search every deterministic map
/// from reachable local observations to actions, scoring each by exact
/// evaluation with the opponents frozen at `theta`.
pub fn exact_best_response(
    agent: usize,
    theta: &PolicyParams,
    tiny: &TinyConfig,
) -> Result<(ObsPolicy, f64)> {
    let n = tiny.market.n_agents;
    if agent >= n {
        return Err(Error::Precondition(format!("agent {agent} out of range")));
    }
    let observations = reachable_observations(agent, theta, tiny)?;
    let k = tiny.market.n_actions() as u64;
    let n_maps = k
        .checked_pow(observations.len() as u32)
        .ok_or(Error::EnumerationBound { estimated: u64::MAX, limit: MAX_BR_MAPS })?;
    if n_maps > MAX_BR_MAPS {
        return Err(Error::EnumerationBound { estimated: n_maps, limit: MAX_BR_MAPS });
    }

    let mut best: Option<(ObsPolicy, f64)> = None;
    for code in 0..n_maps {
        let mut actions = BTreeMap::new();
        let mut rest = code;
        for &obs in &observations {
            actions.insert(obs, (rest % k) as usize);
            rest /= k;
        }
        let table = ObsPolicy { actions, fallback: 0 };
        let mut policies: Vec<OraclePolicy> =
            (0..n).map(|_| OraclePolicy::Params(theta)).collect();
        policies[agent] = OraclePolicy::Table(&table);
        let value = exact_returns(&policies, tiny)?[agent];
        match &best {
            Some((_, best_value)) if value <= *best_value => {}
            _ => best = Some((table, value)),
        }
    }
    Ok(best.expect("at least one candidate map"))
}

/// Central-difference gradient of a scalar function of the parameters.
pub fn central_difference<F>(params: &PolicyParams, h: f64, mut eval: F) -> Result<Vec<f64>>
where
    F: FnMut(&PolicyParams) -> Result<f64>,
{
    let mut grad = vec![0.0; params.values.len()];
    let mut work = params.clone();
    for idx in 0..params.values.len() {
        let original = params.values[idx];
        work.values[idx] = original + h;
        let hi = eval(&work)?;
        work.values[idx] = original - h;
        let lo = eval(&work)?;
        work.values[idx] = original;
        grad[idx] = (hi - lo) / (2.0 * h);
    }
    Ok(grad)
}
