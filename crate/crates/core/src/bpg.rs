//! The outer training loop: alternate between learning a unified solution in
//! the weighted game, refreshing the Lagrange multipliers from the measured
//! constraint violations, and taking one primal gradient step on the shared
//! policy and the unified optimizer.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gradients::{assemble, grad_focal_return, grad_l1, grad_lg_prime, grad_ls, grad_lw_star, GradientBundle};
use crate::market::MarketConfig;
use crate::policy::{Arch, PolicyParams};
use crate::rollout::{rollout_focal, rollout_shared, rollout_weighted};
use crate::{Error, Result};

/// Lagrange multipliers and the sample ratios derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub lambdas: Vec<f64>,
    /// Sum of the multipliers.
    pub lambda_bar: f64,
    /// `lambda_i / lambda_bar` when the sum is positive; `None` marks the
    /// degenerate all-zero case.
    pub kappas: Option<Vec<f64>>,
    pub epsilon_norm: f64,
}

impl DualState {
    /// Uniform ratios before the first dual update or when every
    /// multiplier is zero.
    pub fn uniform(n: usize, epsilon_norm: f64) -> Self {
        DualState {
            lambdas: vec![0.0; n],
            lambda_bar: 0.0,
            kappas: None,
            epsilon_norm,
        }
    }

    /// Sample ratios, falling back to uniform in the degenerate case.
    pub fn effective_kappas(&self) -> Vec<f64> {
        match &self.kappas {
            Some(k) => k.clone(),
            None => vec![1.0 / self.lambdas.len() as f64; self.lambdas.len()],
        }
    }
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Penalty weight on the unified-optimizer gap.
    pub xi: f64,
    /// Primal step size for the shared policy.
    pub alpha1: f64,
    /// Primal step size for the unified optimizer.
    pub alpha2: f64,
    /// Step size of the inner unified-solution training.
    pub unified_lr: f64,
    pub unified_train_iters: usize,
    /// Episodes per gradient estimate.
    pub episodes_per_estimate: usize,
    /// Episodes per return evaluation.
    pub eval_episodes: usize,
    pub max_outer_iters: usize,
    pub convergence_window: usize,
    pub convergence_tol: f64,
    /// Constraint tolerance as a fraction of social welfare (or raw units
    /// when `epsilon_is_raw` is set).
    pub epsilon_norm: f64,
    pub epsilon_is_raw: bool,
    /// Subtract per-(agent, step) mean reward-to-go baselines.
    pub use_baseline: bool,
    /// Floor the competitive factor `(1 - xi/lambda_bar)` at zero.
    pub clamp_competitive_factor: bool,
    /// Re-initialize the unified solution every outer iteration instead of
    /// warm-starting it.
    pub cold_start_unified: bool,
    /// Dual step size of the accumulating multiplier update used by the
    /// zeroed-implicit-term ablation.
    pub dual_alpha: f64,
    /// Best-response training budget for exploitability evaluation.
    pub br_train_steps: usize,
    pub br_episodes: usize,
    pub br_lr: f64,
    /// Per-iteration deviation-policy budget inside the ablation and
    /// independent trainers.
    pub inner_br_steps: usize,
    /// Cap on the l2 norm of each applied primal update; large multipliers
    /// otherwise scale the gradients enough to saturate the softmax in a
    /// single step, after which score gradients vanish. Zero disables.
    pub grad_clip: f64,
    /// Per-update multiplicative pull of the trained policies toward the
    /// uniform policy. Keeps a persistent exploration floor; without it the
    /// softmax saturates and training freezes wherever it first converges.
    pub weight_decay: f64,
    /// Agent-embedding width of every policy in the run.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            xi: 1.0,
            alpha1: 0.02,
            alpha2: 0.05,
            unified_lr: 0.2,
            unified_train_iters: 20,
            episodes_per_estimate: 256,
            eval_episodes: 1024,
            max_outer_iters: 150,
            convergence_window: 10,
            convergence_tol: 1e-3,
            epsilon_norm: 0.08,
            epsilon_is_raw: false,
            use_baseline: true,
            clamp_competitive_factor: false,
            cold_start_unified: false,
            dual_alpha: 1.0,
            br_train_steps: 2000,
            br_episodes: 64,
            br_lr: 0.2,
            inner_br_steps: 200,
            grad_clip: 10.0,
            weight_decay: 0.01,
            embed_dim: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("train.xi", self.xi),
            ("train.alpha1", self.alpha1),
            ("train.alpha2", self.alpha2),
            ("train.unified_lr", self.unified_lr),
            ("train.br_lr", self.br_lr),
            ("train.dual_alpha", self.dual_alpha),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidConfig(format!("{name}: must be positive")));
            }
        }
        if !self.epsilon_norm.is_finite() || self.epsilon_norm < 0.0 {
            return Err(Error::InvalidConfig("train.epsilon_norm: must be >= 0".into()));
        }
        if !self.grad_clip.is_finite() || self.grad_clip < 0.0 {
            return Err(Error::InvalidConfig("train.grad_clip: must be >= 0 (0 disables)".into()));
        }
        if !self.weight_decay.is_finite() || !(0.0..1.0).contains(&self.weight_decay) {
            return Err(Error::InvalidConfig("train.weight_decay: must be in [0, 1)".into()));
        }
        if self.episodes_per_estimate == 0 || self.eval_episodes == 0 {
            return Err(Error::InvalidConfig("train: episode counts must be >= 1".into()));
        }
        if self.convergence_window == 0 {
            return Err(Error::InvalidConfig("train.convergence_window: must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("train.embed_dim: must be >= 1".into()));
        }
        Ok(())
    }

    pub fn arch_for(&self, market: &MarketConfig) -> Arch {
        Arch::new(market.n_actions(), market.n_agents, self.embed_dim)
    }
}

/// Telemetry of one outer iteration; serialized as one JSONL object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Social welfare under the current shared policy.
    pub sw: f64,
    pub lambda_bar: f64,
    pub lambdas: Vec<f64>,
    /// Per-agent return estimates under the shared policy.
    pub g_theta: Vec<f64>,
    /// Per-agent return estimates of the unified solution (or its ablation
    /// stand-in) played unilaterally.
    pub g_xstar: Vec<f64>,
    pub grad_norm_theta: f64,
    pub grad_norm_nu: f64,
    pub wall_ms: u64,
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub theta: PolicyParams,
    pub nu_bar: PolicyParams,
    pub x_star: PolicyParams,
    pub history: Vec<IterationRecord>,
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescale `v` in place so its l2 norm is at most `cap`; `cap = 0` disables.
pub(crate) fn clip_norm(v: &mut [f64], cap: f64) {
    if cap <= 0.0 {
        return;
    }
    let norm = l2_norm(v);
    if norm > cap {
        let scale = cap / norm;
        for x in v.iter_mut() {
            *x *= scale;
        }
    }
}

/// Train the unified solution: plain policy-gradient ascent on the weighted
/// return, warm-started from `warm_start` when given; a cold start draws a
/// fresh near-uniform initialization.
pub fn train_unified_solution(
    theta: &PolicyParams,
    warm_start: Option<&PolicyParams>,
    kappa: &[f64],
    env: &MarketConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PolicyParams, f64)> {
    let mut x = warm_start.cloned().unwrap_or_else(|| PolicyParams::random_init(theta.arch, rng));
    for _ in 0..cfg.unified_train_iters {
        let batch = rollout_weighted(&x, theta, kappa, env, cfg.episodes_per_estimate, rng)?;
        let grad = grad_focal_return(&batch, &x, cfg.use_baseline)?;
        x.add_scaled(&grad, cfg.unified_lr)?;
        x.decay(cfg.weight_decay);
    }
    let eval = rollout_weighted(&x, theta, kappa, env, cfg.episodes_per_estimate, rng)?;
    let g_w_star = eval.mean_focal_return();
    Ok((x, g_w_star))
}

/// Dual update: each multiplier becomes the clamped constraint violation
/// `[G_i(x*; theta) - G_i(theta) - eps]_+`, and the sample ratios are
/// refreshed proportionally.
pub fn dual_update(
    g_xstar: &[f64],
    g_theta: &[f64],
    epsilon_norm: f64,
    social_welfare: f64,
) -> Result<DualState> {
    if g_xstar.len() != g_theta.len() {
        return Err(Error::ShapeMismatch {
            expected: g_theta.len(),
            got: g_xstar.len(),
            context: "dual update returns",
        });
    }
    if g_xstar.iter().chain(g_theta).any(|v| !v.is_finite())
        || !social_welfare.is_finite()
        || !epsilon_norm.is_finite()
    {
        return Err(Error::NonFinite("dual update inputs".into()));
    }
    if social_welfare <= 0.0 {
        return Err(Error::Precondition(format!(
            "social welfare must be positive, got {social_welfare}"
        )));
    }
    let epsilon_raw = epsilon_norm * social_welfare;
    let lambdas: Vec<f64> =
        g_xstar.iter().zip(g_theta).map(|(xs, th)| (xs - th - epsilon_raw).max(0.0)).collect();
    Ok(dual_state_from_lambdas(lambdas, epsilon_norm))
}

pub(crate) fn dual_state_from_lambdas(lambdas: Vec<f64>, epsilon_norm: f64) -> DualState {
    let lambda_bar: f64 = lambdas.iter().sum();
    let kappas =
        (lambda_bar > 0.0).then(|| lambdas.iter().map(|l| l / lambda_bar).collect());
    DualState { lambdas, lambda_bar, kappas, epsilon_norm }
}

/// One primal gradient step on both optimization variables.
pub fn primal_update(
    theta: &PolicyParams,
    nu_bar: &PolicyParams,
    bundle: &GradientBundle,
    alpha1: f64,
    alpha2: f64,
) -> Result<(PolicyParams, PolicyParams)> {
    if bundle.delta_theta.iter().chain(&bundle.delta_nu).any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("primal update gradients".into()));
    }
    let mut new_theta = theta.clone();
    new_theta.add_scaled(&bundle.delta_theta, -alpha1)?;
    let mut new_nu = nu_bar.clone();
    new_nu.add_scaled(&bundle.delta_nu, -alpha2)?;
    Ok((new_theta, new_nu))
}

/// Relative spread of the trailing window; small means converged.
fn window_spread(values: &[f64], window: usize) -> f64 {
    if values.len() < window + 1 {
        return f64::INFINITY;
    }
    let tail = &values[values.len() - (window + 1)..];
    let max = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = tail.iter().map(|v| v.abs()).fold(0.0_f64, f64::max).max(1e-9);
    (max - min) / scale
}

pub(crate) fn converged(history: &[IterationRecord], cfg: &TrainConfig) -> bool {
    let sw: Vec<f64> = history.iter().map(|r| r.sw).collect();
    let lb: Vec<f64> = history.iter().map(|r| r.lambda_bar).collect();
    window_spread(&sw, cfg.convergence_window) < cfg.convergence_tol
        && window_spread(&lb, cfg.convergence_window) < cfg.convergence_tol
}

/// Estimate each agent's return when it unilaterally deviates to `rho`.
pub fn estimate_unilateral_returns(
    rho: &PolicyParams,
    theta: &PolicyParams,
    env: &MarketConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    (0..env.n_agents)
        .map(|i| {
            let batch = rollout_focal(rho, theta, i, env, episodes, rng)?;
            Ok(batch.mean_returns()[i])
        })
        .collect()
}

/// Run the full training loop and return the final parameters and history.
pub fn bpg_train(env: &MarketConfig, cfg: &TrainConfig) -> Result<TrainResult> {
    bpg_train_with(env, cfg, |_| {})
}

/// Run the loop, handing each fresh record to `on_iter` (streaming sinks).
pub fn bpg_train_with<F>(env: &MarketConfig, cfg: &TrainConfig, mut on_iter: F) -> Result<TrainResult>
where
    F: FnMut(&IterationRecord),
{
    env.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arch = cfg.arch_for(env);
    let mut theta = PolicyParams::random_init(arch, &mut rng);
    let mut nu_bar = theta.clone();
    let mut x_star: Option<PolicyParams> = None;
    let mut dual = DualState::uniform(env.n_agents, cfg.epsilon_norm);
    let mut history: Vec<IterationRecord> = Vec::new();

    for iter in 0..cfg.max_outer_iters {
        let start = Instant::now();

        // Weighted game under the ratios of the previous dual state.
        let kappa = dual.effective_kappas();

        // Learn the unified solution in the weighted game.
        let warm = if cfg.cold_start_unified { None } else { x_star.as_ref() };
        let (x, _g_w_star) = train_unified_solution(&theta, warm, &kappa, env, cfg, &mut rng)?;

        // Return estimates for the dual update.
        let shared_eval = rollout_shared(&theta, env, cfg.eval_episodes, &mut rng)?;
        let g_theta = shared_eval.mean_returns();
        let social_welfare: f64 = g_theta.iter().sum();
        let g_xstar =
            estimate_unilateral_returns(&x, &theta, env, cfg.episodes_per_estimate, &mut rng)?;

        // Dual update before the primal step.
        let (eps, sw_for_eps) = if cfg.epsilon_is_raw {
            (cfg.epsilon_norm, 1.0)
        } else {
            (cfg.epsilon_norm, social_welfare)
        };
        dual = dual_update(&g_xstar, &g_theta, eps, sw_for_eps)?;

        // Gradient bundle under the fresh multipliers.
        let grad_batch = rollout_shared(&theta, env, cfg.episodes_per_estimate, &mut rng)?;
        let l1 = grad_l1(&grad_batch, &dual.lambdas, &theta, cfg.use_baseline)?;
        let (ls, lg_prime, lw_star) = if dual.lambda_bar > 0.0 {
            let nu_batch = rollout_weighted(
                &nu_bar,
                &theta,
                &kappa,
                env,
                cfg.episodes_per_estimate,
                &mut rng,
            )?;
            let xs_batch =
                rollout_weighted(&x, &theta, &kappa, env, cfg.episodes_per_estimate, &mut rng)?;
            (
                grad_ls(&nu_batch, dual.lambda_bar, &theta, cfg.use_baseline)?,
                grad_lg_prime(&nu_batch, dual.lambda_bar, &nu_bar, cfg.use_baseline)?,
                grad_lw_star(&xs_batch, &theta, cfg.use_baseline)?,
            )
        } else {
            let zeros = vec![0.0; theta.values.len()];
            (zeros.clone(), zeros.clone(), zeros)
        };
        let (mut delta_theta, mut delta_nu) = assemble(
            &l1,
            &ls,
            &lg_prime,
            &lw_star,
            cfg.xi,
            dual.lambda_bar,
            cfg.clamp_competitive_factor,
        )?;
        clip_norm(&mut delta_theta, cfg.grad_clip);
        clip_norm(&mut delta_nu, cfg.grad_clip);
        let bundle = GradientBundle {
            l1,
            ls,
            lg_prime,
            lw_star,
            delta_theta,
            delta_nu,
            xi: cfg.xi,
            lambda_bar: dual.lambda_bar,
        };
        let (mut new_theta, mut new_nu) =
            primal_update(&theta, &nu_bar, &bundle, cfg.alpha1, cfg.alpha2)?;
        new_theta.decay(cfg.weight_decay);
        new_nu.decay(cfg.weight_decay);
        theta = new_theta;
        nu_bar = new_nu;
        x_star = Some(x);

        let record = IterationRecord {
            iter,
            sw: social_welfare,
            lambda_bar: dual.lambda_bar,
            lambdas: dual.lambdas.clone(),
            g_theta,
            g_xstar,
            grad_norm_theta: l2_norm(&bundle.delta_theta),
            grad_norm_nu: l2_norm(&bundle.delta_nu),
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_iter(&record);
        history.push(record);

        if converged(&history, cfg) {
            break;
        }
    }

    Ok(TrainResult {
        theta,
        nu_bar,
        x_star: x_star.expect("at least one iteration"),
        history,
    })
}

/// Shared-batch social welfare and revenue of a trained policy.
pub fn evaluate_policy(
    theta: &PolicyParams,
    env: &MarketConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64, f64)> {
    let batch = rollout_shared(theta, env, episodes, rng)?;
    let g = batch.mean_returns();
    let sw = g.iter().sum();
    let revenue = batch.mean_revenue();
    Ok((g, sw, revenue))
}


/// Test-only export of the update clipping.
pub fn test_clip(v: &mut [f64], cap: f64) {
    clip_norm(v, cap);
}
