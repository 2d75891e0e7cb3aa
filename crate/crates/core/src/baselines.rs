//! Ablation and comparison trainers. All of them emit the same iteration
//! records as the main trainer so reports and plots are uniform.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpg::{
    clip_norm, converged, dual_state_from_lambdas, l2_norm, DualState, IterationRecord,
    TrainConfig,
};
use crate::gradients::{grad_focal_return, grad_l1, grad_ls};
use crate::market::MarketConfig;
use crate::policy::PolicyParams;
use crate::rollout::{rollout_focal, rollout_per_agent, rollout_shared};
use crate::Result;

/// Which comparison method to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Original bi-level gradient with the implicit term zeroed and no
    /// unified optimizer; deviation policies are approximated per agent by
    /// budgeted best-response training.
    BpgZero,
    /// Pure social-welfare ascent with no constraint machinery.
    FullyCooperative,
    /// Round-robin independent best-response training, one policy per agent.
    Independent,
}

/// Final policy (or policies) and history of a baseline run.
#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub policies: Vec<PolicyParams>,
    pub history: Vec<IterationRecord>,
}

impl BaselineResult {
    /// The shared policy for single-policy baselines.
    pub fn shared_policy(&self) -> &PolicyParams {
        &self.policies[0]
    }
}

/// Train with the original-gradient ablation: the primal direction is
/// `-L1 + Ls(theta, nu)`, where each `nu_i` is a per-agent best response
/// trained for a fixed small budget each iteration (warm-started), and the
/// multipliers accumulate the measured violations.
pub fn train_bpg_zero(env: &MarketConfig, cfg: &TrainConfig) -> Result<BaselineResult> {
    train_bpg_zero_with(env, cfg, |_| {})
}

pub fn train_bpg_zero_with<F>(
    env: &MarketConfig,
    cfg: &TrainConfig,
    mut on_iter: F,
) -> Result<BaselineResult>
where
    F: FnMut(&IterationRecord),
{
    env.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arch = cfg.arch_for(env);
    let mut theta = PolicyParams::random_init(arch, &mut rng);
    let n = env.n_agents;
    let mut nus: Vec<PolicyParams> = vec![theta.clone(); n];
    let mut lambdas = vec![0.0; n];
    let mut history = Vec::new();

    for iter in 0..cfg.max_outer_iters {
        let start = Instant::now();

        // budgeted per-agent deviation policies, warm-started
        let mut g_nu = vec![0.0; n];
        for (i, nu) in nus.iter_mut().enumerate() {
            for _ in 0..cfg.inner_br_steps {
                let batch = rollout_focal(nu, &theta, i, env, cfg.br_episodes, &mut rng)?;
                let grad = grad_focal_return(&batch, nu, cfg.use_baseline)?;
                nu.add_scaled(&grad, cfg.br_lr)?;
                nu.decay(cfg.weight_decay);
            }
            let eval = rollout_focal(nu, &theta, i, env, cfg.episodes_per_estimate, &mut rng)?;
            g_nu[i] = eval.mean_returns()[i];
        }

        let shared_eval = rollout_shared(&theta, env, cfg.eval_episodes, &mut rng)?;
        let g_theta = shared_eval.mean_returns();
        let social_welfare: f64 = g_theta.iter().sum();

        // accumulating dual update on the measured violations
        let epsilon_raw = if cfg.epsilon_is_raw {
            cfg.epsilon_norm
        } else {
            cfg.epsilon_norm * social_welfare
        };
        for i in 0..n {
            lambdas[i] =
                (lambdas[i] + cfg.dual_alpha * (g_nu[i] - g_theta[i] - epsilon_raw)).max(0.0);
        }
        let dual: DualState = dual_state_from_lambdas(lambdas.clone(), cfg.epsilon_norm);

        // primal direction: -L1 + Ls with the implicit term zeroed
        let grad_batch = rollout_shared(&theta, env, cfg.episodes_per_estimate, &mut rng)?;
        let l1 = grad_l1(&grad_batch, &dual.lambdas, &theta, cfg.use_baseline)?;
        let mut delta_theta: Vec<f64> = l1.iter().map(|&g| -g).collect();
        if dual.lambda_bar > 0.0 {
            // each agent deviates to its own policy, so the competitive term
            // is sampled per agent
            let mut ls_total = vec![0.0; theta.values.len()];
            for (i, nu) in nus.iter().enumerate() {
                if dual.lambdas[i] == 0.0 {
                    continue;
                }
                let batch =
                    rollout_focal(nu, &theta, i, env, cfg.episodes_per_estimate, &mut rng)?;
                let term = grad_ls(&batch, dual.lambdas[i], &theta, cfg.use_baseline)?;
                for (acc, g) in ls_total.iter_mut().zip(&term) {
                    *acc += g;
                }
            }
            for (d, g) in delta_theta.iter_mut().zip(&ls_total) {
                *d += g;
            }
        }
        clip_norm(&mut delta_theta, cfg.grad_clip);
        theta.add_scaled(&delta_theta, -cfg.alpha1)?;
        theta.decay(cfg.weight_decay);

        let record = IterationRecord {
            iter,
            sw: social_welfare,
            lambda_bar: dual.lambda_bar,
            lambdas: dual.lambdas.clone(),
            g_theta,
            g_xstar: g_nu,
            grad_norm_theta: l2_norm(&delta_theta),
            grad_norm_nu: 0.0,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_iter(&record);
        history.push(record);
        if converged(&history, cfg) {
            break;
        }
    }
    Ok(BaselineResult { policies: vec![theta], history })
}

/// Pure social-welfare ascent: the cooperative gradient with all
/// multipliers at zero.
pub fn train_fully_cooperative(env: &MarketConfig, cfg: &TrainConfig) -> Result<BaselineResult> {
    train_fully_cooperative_with(env, cfg, |_| {})
}

pub fn train_fully_cooperative_with<F>(
    env: &MarketConfig,
    cfg: &TrainConfig,
    mut on_iter: F,
) -> Result<BaselineResult>
where
    F: FnMut(&IterationRecord),
{
    env.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arch = cfg.arch_for(env);
    let mut theta = PolicyParams::random_init(arch, &mut rng);
    let n = env.n_agents;
    let zeros_lambda = vec![0.0; n];
    let mut history = Vec::new();

    for iter in 0..cfg.max_outer_iters {
        let start = Instant::now();
        let shared_eval = rollout_shared(&theta, env, cfg.eval_episodes, &mut rng)?;
        let g_theta = shared_eval.mean_returns();
        let social_welfare: f64 = g_theta.iter().sum();

        let grad_batch = rollout_shared(&theta, env, cfg.episodes_per_estimate, &mut rng)?;
        let l1 = grad_l1(&grad_batch, &zeros_lambda, &theta, cfg.use_baseline)?;
        let mut delta_theta: Vec<f64> = l1.iter().map(|&g| -g).collect();
        clip_norm(&mut delta_theta, cfg.grad_clip);
        theta.add_scaled(&delta_theta, -cfg.alpha1)?;
        theta.decay(cfg.weight_decay);

        let record = IterationRecord {
            iter,
            sw: social_welfare,
            lambda_bar: 0.0,
            lambdas: zeros_lambda.clone(),
            g_theta,
            g_xstar: vec![0.0; n],
            grad_norm_theta: l2_norm(&delta_theta),
            grad_norm_nu: 0.0,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_iter(&record);
        history.push(record);
        if converged(&history, cfg) {
            break;
        }
    }
    Ok(BaselineResult { policies: vec![theta], history })
}

/// Round-robin independent training: each agent keeps its own policy and is
/// repeatedly improved against the others, a self-play stand-in for
/// single-advertiser bidding methods.
pub fn train_independent(env: &MarketConfig, cfg: &TrainConfig) -> Result<BaselineResult> {
    train_independent_with(env, cfg, |_| {})
}

pub fn train_independent_with<F>(
    env: &MarketConfig,
    cfg: &TrainConfig,
    mut on_iter: F,
) -> Result<BaselineResult>
where
    F: FnMut(&IterationRecord),
{
    env.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arch = cfg.arch_for(env);
    let n = env.n_agents;
    let init = PolicyParams::random_init(arch, &mut rng);
    let mut policies: Vec<PolicyParams> = vec![init; n];
    let mut history = Vec::new();

    for iter in 0..cfg.max_outer_iters {
        let start = Instant::now();
        for agent in 0..n {
            for _ in 0..cfg.inner_br_steps {
                let mut batch = rollout_per_agent(&policies, env, cfg.br_episodes, &mut rng)?;
                for ep in &mut batch.episodes {
                    ep.focal = Some(agent);
                }
                let grad = grad_focal_return(&batch, &policies[agent], cfg.use_baseline)?;
                policies[agent].add_scaled(&grad, cfg.br_lr)?;
                policies[agent].decay(cfg.weight_decay);
            }
        }
        let eval = rollout_per_agent(&policies, env, cfg.eval_episodes, &mut rng)?;
        let g_theta = eval.mean_returns();
        let social_welfare: f64 = g_theta.iter().sum();

        let record = IterationRecord {
            iter,
            sw: social_welfare,
            lambda_bar: 0.0,
            lambdas: vec![0.0; n],
            g_theta,
            g_xstar: vec![0.0; n],
            grad_norm_theta: 0.0,
            grad_norm_nu: 0.0,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_iter(&record);
        history.push(record);
        if converged(&history, cfg) {
            break;
        }
    }
    Ok(BaselineResult { policies, history })
}

/// Direction check used by tests: with every multiplier at zero, the
/// ablation's primal direction collapses to the cooperative direction.
pub fn zero_lambda_direction(
    batch: &crate::rollout::TrajectoryBatch,
    theta: &PolicyParams,
    use_baseline: bool,
) -> Result<Vec<f64>> {
    let l1 = grad_l1(batch, &vec![0.0; batch.n_agents], theta, use_baseline)?;
    Ok(l1.iter().map(|&g| -g).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{ValueAtom, ValueModel};

    fn small_env(n: usize) -> MarketConfig {
        MarketConfig {
            n_agents: n,
            horizon: 2,
            impressions_per_step: 2,
            budgets: vec![2.0; n],
            value_model: ValueModel::Discrete {
                bases: vec![1.0; n],
                atoms: vec![
                    ValueAtom { prob: 0.5, multiplier: 0.8 },
                    ValueAtom { prob: 0.5, multiplier: 1.2 },
                ],
                exchangeable: false,
            },
            reserve_price: 0.1,
            bid_levels: vec![0.0, 0.5, 1.0],
            seed: 0,
        }
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            unified_train_iters: 2,
            episodes_per_estimate: 32,
            eval_episodes: 64,
            max_outer_iters: 3,
            br_train_steps: 4,
            br_episodes: 8,
            inner_br_steps: 4,
            embed_dim: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn bpg_zero_runs_with_zero_br_budget() {
        let env = small_env(2);
        let cfg = TrainConfig { inner_br_steps: 0, max_outer_iters: 1, ..fast_cfg() };
        let result = train_bpg_zero(&env, &cfg).unwrap();
        assert_eq!(result.history.len(), 1);
    }

    #[test]
    fn fully_cooperative_zero_iterations_returns_initial_policy() {
        let env = small_env(2);
        let cfg = TrainConfig { max_outer_iters: 0, ..fast_cfg() };
        let result = train_fully_cooperative(&env, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let expected = PolicyParams::random_init(cfg.arch_for(&env), &mut rng);
        assert_eq!(result.shared_policy(), &expected);
        assert!(result.history.is_empty());
    }

    #[test]
    fn independent_symmetric_agents_earn_similar_returns() {
        let env = small_env(2);
        let cfg = TrainConfig {
            max_outer_iters: 4,
            inner_br_steps: 12,
            br_episodes: 32,
            eval_episodes: 2048,
            ..fast_cfg()
        };
        let result = train_independent(&env, &cfg).unwrap();
        let last = result.history.last().unwrap();
        let diff = (last.g_theta[0] - last.g_theta[1]).abs();
        let scale = last.g_theta[0].abs().max(last.g_theta[1].abs()).max(1e-9);
        assert!(diff / scale < 0.35, "returns {:?} too asymmetric", last.g_theta);
    }

    #[test]
    fn independent_single_agent_improves_return() {
        let env = MarketConfig { budgets: vec![5.0], ..small_env(1) };
        let cfg = TrainConfig {
            max_outer_iters: 3,
            inner_br_steps: 30,
            br_episodes: 32,
            eval_episodes: 512,
            ..fast_cfg()
        };
        let result = train_independent(&env, &cfg).unwrap();
        let first = result.history.first().unwrap().sw;
        let last = result.history.last().unwrap().sw;
        assert!(last >= first - 0.05, "single-agent training regressed: {first} -> {last}");
    }

    #[test]
    fn all_baselines_share_the_record_schema() {
        let env = small_env(2);
        let cfg = TrainConfig { max_outer_iters: 1, ..fast_cfg() };
        let zero = train_bpg_zero(&env, &cfg).unwrap();
        let coop = train_fully_cooperative(&env, &cfg).unwrap();
        let indep = train_independent(&env, &cfg).unwrap();
        for h in [&zero.history, &coop.history, &indep.history] {
            assert_eq!(h[0].lambdas.len(), 2);
            assert_eq!(h[0].g_theta.len(), 2);
            assert_eq!(h[0].g_xstar.len(), 2);
        }
    }
}
