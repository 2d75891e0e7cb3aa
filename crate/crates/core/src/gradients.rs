//! Monte-Carlo estimators for the four policy-gradient terms and their
//! assembly into the primal update directions.
//!
//! All estimators are plain score-function gradients over trajectory
//! batches. The two competitive terms and the weighted-optimum term are
//! estimated from weighted rollouts: with the focal agent drawn
//! proportionally to the Lagrange multipliers, a single batch estimates the
//! multiplier-weighted sum over all agents at once, so the cost does not
//! grow with the number of agents.

use crate::policy::{accumulate_log_prob_grad, PolicyParams};
use crate::rollout::{Trajectory, TrajectoryBatch};
use crate::{Error, Result};

/// The estimated gradient terms of one outer iteration and the assembled
/// update directions.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    /// Cooperative term: gradient of the (1 + lambda)-weighted welfare.
    pub l1: Vec<f64>,
    /// Competitive term through the shared policy's influence on deviators.
    pub ls: Vec<f64>,
    /// Competitive term with respect to the unified optimizer.
    pub lg_prime: Vec<f64>,
    /// Gradient of the weighted return at the unified solution.
    pub lw_star: Vec<f64>,
    pub delta_theta: Vec<f64>,
    pub delta_nu: Vec<f64>,
    pub xi: f64,
    pub lambda_bar: f64,
}

/// Per-(agent, step) mean reward-to-go of a shared batch.
pub fn shared_baselines(batch: &TrajectoryBatch) -> Vec<Vec<f64>> {
    let n = batch.n_agents;
    let horizon = batch.horizon;
    let mut sums = vec![vec![0.0; horizon]; n];
    for ep in &batch.episodes {
        let rtg = ep.reward_to_go();
        for i in 0..n {
            for t in 0..ep.steps.len() {
                sums[i][t] += rtg[i][t];
            }
        }
    }
    let count = batch.episodes.len().max(1) as f64;
    for row in &mut sums {
        for v in row.iter_mut() {
            *v /= count;
        }
    }
    sums
}

/// Per-(focal agent, step) mean reward-to-go of a weighted batch, averaged
/// within each focal group.
pub fn focal_baselines(batch: &TrajectoryBatch) -> Vec<Vec<f64>> {
    let n = batch.n_agents;
    let horizon = batch.horizon;
    let mut sums = vec![vec![0.0; horizon]; n];
    let mut counts = vec![0usize; n];
    for ep in &batch.episodes {
        let focal = match ep.focal {
            Some(f) => f,
            None => continue,
        };
        let rtg = ep.reward_to_go();
        counts[focal] += 1;
        for t in 0..ep.steps.len() {
            sums[focal][t] += rtg[focal][t];
        }
    }
    for (row, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for v in row.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    sums
}

/// One episode's contribution to the cooperative gradient:
/// `sum_t sum_i score_theta(a_it | s_it, i) * q_t` with
/// `q_t = sum_i (1 + lambda_i) * (rtg_i[t] - baseline_i[t])`, scaled by
/// `weight` and accumulated into `acc`.
pub fn l1_contribution(
    traj: &Trajectory,
    lambda: &[f64],
    theta: &PolicyParams,
    baselines: Option<&[Vec<f64>]>,
    weight: f64,
    acc: &mut [f64],
) {
    let n = lambda.len();
    let rtg = traj.reward_to_go();
    for (t, record) in traj.steps.iter().enumerate() {
        let mut q = 0.0;
        for i in 0..n {
            let base = baselines.map(|b| b[i][t]).unwrap_or(0.0);
            q += (1.0 + lambda[i]) * (rtg[i][t] - base);
        }
        if q == 0.0 {
            continue;
        }
        for i in 0..n {
            if let Some(a) = record.actions[i] {
                accumulate_log_prob_grad(theta, &record.states[i], a, weight * q, acc);
            }
        }
    }
}

/// One weighted episode's contribution through the non-focal agents:
/// `sum_t sum_{j != focal} score_theta(a_jt | s_jt, j) * adv_focal[t]`.
pub fn nonfocal_score_contribution(
    traj: &Trajectory,
    theta: &PolicyParams,
    baselines: Option<&[Vec<f64>]>,
    weight: f64,
    acc: &mut [f64],
) -> Result<()> {
    let focal = traj.focal.ok_or_else(|| {
        Error::Precondition("weighted estimator needs focal annotations".into())
    })?;
    let rtg = traj.reward_to_go();
    for (t, record) in traj.steps.iter().enumerate() {
        let base = baselines.map(|b| b[focal][t]).unwrap_or(0.0);
        let adv = rtg[focal][t] - base;
        if adv == 0.0 {
            continue;
        }
        for (j, action) in record.actions.iter().enumerate() {
            if j == focal {
                continue;
            }
            if let Some(a) = *action {
                accumulate_log_prob_grad(theta, &record.states[j], a, weight * adv, acc);
            }
        }
    }
    Ok(())
}

/// One weighted episode's contribution through the focal agent:
/// `sum_t score_params(a_ft | s_ft, f) * adv_focal[t]`.
pub fn focal_score_contribution(
    traj: &Trajectory,
    params: &PolicyParams,
    baselines: Option<&[Vec<f64>]>,
    weight: f64,
    acc: &mut [f64],
) -> Result<()> {
    let focal = traj.focal.ok_or_else(|| {
        Error::Precondition("weighted estimator needs focal annotations".into())
    })?;
    let rtg = traj.reward_to_go();
    for (t, record) in traj.steps.iter().enumerate() {
        let base = baselines.map(|b| b[focal][t]).unwrap_or(0.0);
        let adv = rtg[focal][t] - base;
        if adv == 0.0 {
            continue;
        }
        if let Some(a) = record.actions[focal] {
            accumulate_log_prob_grad(params, &record.states[focal], a, weight * adv, acc)
        }
    }
    Ok(())
}

/// Cooperative gradient estimate from a shared batch.
pub fn grad_l1(
    batch: &TrajectoryBatch,
    lambda: &[f64],
    theta: &PolicyParams,
    use_baseline: bool,
) -> Result<Vec<f64>> {
    if lambda.len() != batch.n_agents {
        return Err(Error::ShapeMismatch {
            expected: batch.n_agents,
            got: lambda.len(),
            context: "lambda",
        });
    }
    if lambda.iter().any(|&l| !l.is_finite() || l < 0.0) {
        return Err(Error::Precondition("lambda entries must be finite and >= 0".into()));
    }
    let baselines = use_baseline.then(|| shared_baselines(batch));
    let mut acc = vec![0.0; theta.values.len()];
    let weight = 1.0 / batch.episodes.len().max(1) as f64;
    for ep in &batch.episodes {
        l1_contribution(ep, lambda, theta, baselines.as_deref(), weight, &mut acc);
    }
    Ok(acc)
}

/// Competitive gradient with respect to the shared policy, scaled by the
/// multiplier sum: `lambda_bar * grad_theta G_w(nu_bar; theta)`.
///
/// With `lambda_bar = 0` the weighted game is empty and the term is zero by
/// contract; the batch is not touched.
pub fn grad_ls(
    batch: &TrajectoryBatch,
    lambda_bar: f64,
    theta: &PolicyParams,
    use_baseline: bool,
) -> Result<Vec<f64>> {
    if lambda_bar == 0.0 {
        return Ok(vec![0.0; theta.values.len()]);
    }
    let baselines = use_baseline.then(|| focal_baselines(batch));
    let mut acc = vec![0.0; theta.values.len()];
    let weight = lambda_bar / batch.episodes.len().max(1) as f64;
    for ep in &batch.episodes {
        nonfocal_score_contribution(ep, theta, baselines.as_deref(), weight, &mut acc)?;
    }
    Ok(acc)
}

/// Competitive gradient with respect to the unified optimizer:
/// `lambda_bar * grad_nu G_w(nu_bar; theta)`.
pub fn grad_lg_prime(
    batch: &TrajectoryBatch,
    lambda_bar: f64,
    nu_bar: &PolicyParams,
    use_baseline: bool,
) -> Result<Vec<f64>> {
    if lambda_bar == 0.0 {
        return Ok(vec![0.0; nu_bar.values.len()]);
    }
    let baselines = use_baseline.then(|| focal_baselines(batch));
    let mut acc = vec![0.0; nu_bar.values.len()];
    let weight = lambda_bar / batch.episodes.len().max(1) as f64;
    for ep in &batch.episodes {
        focal_score_contribution(ep, nu_bar, baselines.as_deref(), weight, &mut acc)?;
    }
    Ok(acc)
}

/// Gradient of the weighted return at the unified solution:
/// `grad_theta G_w(x; theta)` at `x = x*`, from a weighted batch whose focal
/// agents follow the unified solution.
pub fn grad_lw_star(
    batch: &TrajectoryBatch,
    theta: &PolicyParams,
    use_baseline: bool,
) -> Result<Vec<f64>> {
    let baselines = use_baseline.then(|| focal_baselines(batch));
    let mut acc = vec![0.0; theta.values.len()];
    let weight = 1.0 / batch.episodes.len().max(1) as f64;
    for ep in &batch.episodes {
        nonfocal_score_contribution(ep, theta, baselines.as_deref(), weight, &mut acc)?;
    }
    Ok(acc)
}

/// Gradient of the focal return with respect to the focal policy itself:
/// `grad_x G_w(x; theta)` (or `grad_rho G_i(rho; theta)` when every episode
/// shares the same focal agent). Used by unified-solution and best-response
/// training.
pub fn grad_focal_return(
    batch: &TrajectoryBatch,
    focal_params: &PolicyParams,
    use_baseline: bool,
) -> Result<Vec<f64>> {
    let baselines = use_baseline.then(|| focal_baselines(batch));
    let mut acc = vec![0.0; focal_params.values.len()];
    let weight = 1.0 / batch.episodes.len().max(1) as f64;
    for ep in &batch.episodes {
        focal_score_contribution(ep, focal_params, baselines.as_deref(), weight, &mut acc)?;
    }
    Ok(acc)
}

/// Assemble the primal update directions.
///
/// Descent directions for the penalized single-level objective:
/// `delta_theta = xi * lw_star + (1 - xi/lambda_bar) * ls - l1` and
/// `delta_nu = (1 - xi/lambda_bar) * lg_prime`; with `lambda_bar = 0` the
/// whole competitive side vanishes and the update degenerates to
/// `(-l1, 0)`. The `(1 - xi/lambda_bar)` factor is applied literally even
/// when negative unless `clamp_competitive_factor` is set.
pub fn assemble(
    l1: &[f64],
    ls: &[f64],
    lg_prime: &[f64],
    lw_star: &[f64],
    xi: f64,
    lambda_bar: f64,
    clamp_competitive_factor: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if xi <= 0.0 || !xi.is_finite() {
        return Err(Error::Precondition(format!("xi must be positive, got {xi}")));
    }
    if lambda_bar < 0.0 || !lambda_bar.is_finite() {
        return Err(Error::Precondition(format!("lambda_bar must be >= 0, got {lambda_bar}")));
    }
    let len = l1.len();
    for (name, v) in [("ls", ls), ("lg_prime", lg_prime), ("lw_star", lw_star)] {
        if v.len() != len {
            return Err(Error::ShapeMismatch { expected: len, got: v.len(), context: name });
        }
    }
    if lambda_bar == 0.0 {
        let delta_theta = l1.iter().map(|&g| -g).collect();
        return Ok((delta_theta, vec![0.0; len]));
    }
    let mut factor = 1.0 - xi / lambda_bar;
    if clamp_competitive_factor {
        factor = factor.max(0.0);
    }
    let delta_theta = (0..len).map(|i| xi * lw_star[i] + factor * ls[i] - l1[i]).collect();
    let delta_nu = lg_prime.iter().map(|&g| factor * g).collect();
    Ok((delta_theta, delta_nu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{MarketConfig, ValueAtom, ValueModel};
    use crate::policy::{Arch, PolicyParams};
    use crate::rollout::{rollout_shared, rollout_weighted};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_market() -> MarketConfig {
        MarketConfig {
            n_agents: 2,
            horizon: 2,
            impressions_per_step: 1,
            budgets: vec![1.2, 1.5],
            value_model: ValueModel::Discrete {
                bases: vec![1.0, 1.3],
                atoms: vec![
                    ValueAtom { prob: 0.5, multiplier: 0.8 },
                    ValueAtom { prob: 0.5, multiplier: 1.2 },
                ],
                exchangeable: false,
            },
            reserve_price: 0.1,
            bid_levels: vec![0.0, 0.6, 1.2],
            seed: 0,
        }
    }

    fn random_params(arch: Arch, seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..arch.param_len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        PolicyParams { arch, values }
    }

    #[test]
    fn assemble_degenerate_path() {
        let (dt, dn) = assemble(&[3.0], &[9.0], &[9.0], &[9.0], 1.0, 0.0, false).unwrap();
        assert_eq!(dt, vec![-3.0]);
        assert_eq!(dn, vec![0.0]);
    }

    #[test]
    fn assemble_factor_zero_when_xi_equals_lambda_bar() {
        let (dt, dn) = assemble(&[3.0], &[2.0], &[4.0], &[1.0], 2.0, 2.0, false).unwrap();
        assert_eq!(dt, vec![2.0 * 1.0 - 3.0]);
        assert_eq!(dn, vec![0.0]);
    }

    #[test]
    fn assemble_direct_evaluation() {
        let (dt, dn) = assemble(&[3.0], &[2.0], &[4.0], &[1.0], 2.0, 4.0, false).unwrap();
        assert!((dt[0] - 0.0).abs() < 1e-15);
        assert!((dn[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn assemble_rejects_mismatched_lengths() {
        assert!(assemble(&[1.0], &[1.0, 2.0], &[1.0], &[1.0], 1.0, 1.0, false).is_err());
    }

    #[test]
    fn assemble_clamp_flag() {
        // xi > lambda_bar makes the factor negative; the flag floors it at 0
        let (dt, dn) = assemble(&[0.0], &[10.0], &[10.0], &[0.0], 4.0, 2.0, true).unwrap();
        assert_eq!(dt, vec![0.0]);
        assert_eq!(dn, vec![0.0]);
    }

    #[test]
    fn l1_zero_rewards_zero_gradient() {
        let cfg = tiny_market();
        let arch = Arch::new(3, 2, 2);
        // everyone always bids level 0: nothing is ever won
        let mut never_bid = PolicyParams::zeros(arch);
        let d = 4 + 2;
        never_bid.values[2] = 100.0;
        let _ = d;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = rollout_shared(&never_bid, &cfg, 64, &mut rng).unwrap();
        let grad = grad_l1(&batch, &[0.0, 0.0], &never_bid, false).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn l1_linear_in_q_weights() {
        let cfg = tiny_market();
        let arch = Arch::new(3, 2, 2);
        let theta = random_params(arch, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = rollout_shared(&theta, &cfg, 128, &mut rng).unwrap();
        let g0 = grad_l1(&batch, &[0.0, 0.0], &theta, true).unwrap();
        let g1 = grad_l1(&batch, &[1.0, 1.0], &theta, true).unwrap();
        for (a, b) in g0.iter().zip(&g1) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l1_rejects_negative_lambda() {
        let cfg = tiny_market();
        let theta = random_params(Arch::new(3, 2, 2), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = rollout_shared(&theta, &cfg, 8, &mut rng).unwrap();
        assert!(grad_l1(&batch, &[-0.1, 0.0], &theta, false).is_err());
    }

    #[test]
    fn weighted_estimators_zero_when_lambda_bar_zero() {
        let cfg = tiny_market();
        let theta = random_params(Arch::new(3, 2, 2), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = rollout_weighted(&theta, &theta, &[0.5, 0.5], &cfg, 16, &mut rng).unwrap();
        assert!(grad_ls(&batch, 0.0, &theta, true).unwrap().iter().all(|&g| g == 0.0));
        assert!(grad_lg_prime(&batch, 0.0, &theta, true).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ls_zero_for_single_agent() {
        let cfg = MarketConfig {
            n_agents: 1,
            budgets: vec![5.0],
            value_model: ValueModel::Discrete {
                bases: vec![1.0],
                atoms: vec![ValueAtom { prob: 1.0, multiplier: 1.0 }],
                exchangeable: false,
            },
            ..tiny_market()
        };
        let theta = random_params(Arch::new(3, 1, 2), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = rollout_weighted(&theta, &theta, &[1.0], &cfg, 32, &mut rng).unwrap();
        let grad = grad_ls(&batch, 1.0, &theta, false).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn weighted_estimators_demand_focal_annotations() {
        let cfg = tiny_market();
        let theta = random_params(Arch::new(3, 2, 2), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = rollout_shared(&theta, &cfg, 8, &mut rng).unwrap();
        assert!(grad_ls(&batch, 1.0, &theta, false).is_err());
        assert!(grad_lg_prime(&batch, 1.0, &theta, false).is_err());
        assert!(grad_lw_star(&batch, &theta, false).is_err());
    }

    #[test]
    fn assemble_matches_recomputation_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let len = rng.gen_range(1..6);
            let vec = |rng: &mut ChaCha8Rng| {
                (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>()
            };
            let l1 = vec(&mut rng);
            let ls = vec(&mut rng);
            let lg = vec(&mut rng);
            let lw = vec(&mut rng);
            let xi = rng.gen_range(0.01..3.0);
            let lambda_bar = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.01..4.0) };
            let (dt, dn) = assemble(&l1, &ls, &lg, &lw, xi, lambda_bar, false).unwrap();
            for i in 0..len {
                let (et, en) = if lambda_bar == 0.0 {
                    (-l1[i], 0.0)
                } else {
                    let f = 1.0 - xi / lambda_bar;
                    (xi * lw[i] + f * ls[i] - l1[i], f * lg[i])
                };
                assert!((dt[i] - et).abs() <= 1e-15 * et.abs().max(1.0));
                assert!((dn[i] - en).abs() <= 1e-15 * en.abs().max(1.0));
            }
        }
    }
}
