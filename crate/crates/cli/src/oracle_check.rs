//! The `oracle-check` subcommand: runs the exact-enumeration validation
//! suite on the shipped tiny instances and reports one pass/fail line per
//! check. A failure means the sampling or estimation machinery disagrees
//! with ground truth and nothing downstream should be trusted.

use ncb_core::gradients::{
    focal_score_contribution, grad_l1, l1_contribution, nonfocal_score_contribution,
};
use ncb_core::market::{
    auction, generate_impressions, sample_initial_state, step_with_impressions, Impression,
};
use ncb_core::oracle::{
    central_difference, exact_best_response, exact_focal_return, exact_returns,
    exact_weighted_return, focal_assignment, for_each_trajectory, for_each_trajectory_with_focal,
    OraclePolicy, TinyConfig,
};
use ncb_core::policy::{
    accumulate_log_prob_grad, checkpoint_bytes, checkpoint_from_bytes, distribution, Arch,
    PolicyParams,
};
use ncb_core::rollout::rollout_shared;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

fn random_params(arch: Arch, seed: u64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..arch.param_len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    PolicyParams::from_values(arch, values).unwrap()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Run the whole suite.
pub fn run_suite() -> Vec<CheckOutcome> {
    let mut results = Vec::new();
    results.push(auction_permutation_check());
    results.push(step_permutation_check());
    results.push(exact_return_permutation_check());
    results.push(enumeration_probability_check());
    results.push(weighted_decomposition_check());
    results.push(score_identity_check());
    results.push(estimator_expectation_check());
    results.push(monte_carlo_agreement_check());
    results.push(best_response_check());
    results.push(checkpoint_roundtrip_check());
    results
}

fn auction_permutation_check() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.gen_range(2..5);
        let bids: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let imp = Impression { feature: vec![1.0], values: values.clone() };
        let reserve = rng.gen_range(0.0..0.5);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let base = auction(&bids, &imp, reserve);
        let pbids: Vec<f64> = perm.iter().map(|&s| bids[s]).collect();
        let pvalues: Vec<f64> = perm.iter().map(|&s| values[s]).collect();
        let pimp = Impression { feature: vec![1.0], values: pvalues };
        let permuted = auction(&pbids, &pimp, reserve);
        let expected_winner = base.winner.map(|w| perm.iter().position(|&s| s == w).unwrap());
        if permuted.winner != expected_winner || permuted.price != base.price {
            return check("auction permutation equivariance", false, "winner or price moved".into());
        }
        for (slot, &src) in perm.iter().enumerate() {
            if permuted.per_agent_cost[slot] != base.per_agent_cost[src]
                || permuted.per_agent_reward[slot] != base.per_agent_reward[src]
            {
                return check("auction permutation equivariance", false, "vectors differ".into());
            }
        }
    }
    check("auction permutation equivariance", true, "100 random triples".into())
}

fn step_permutation_check() -> CheckOutcome {
    let tiny = TinyConfig::two_agent();
    let cfg = tiny.market.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100u64 {
        let mut state_rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let state = sample_initial_state(&cfg, &mut state_rng);
        let impressions = generate_impressions(&state, &cfg, &mut state_rng);
        let bids: Vec<usize> = (0..2).map(|_| rng.gen_range(0..3)).collect();
        let perm = [1usize, 0usize];
        let pstate = state.permuted(&perm);
        let pbids: Vec<usize> = perm.iter().map(|&s| bids[s]).collect();
        let pimpressions: Vec<Impression> = impressions
            .iter()
            .map(|imp| Impression {
                feature: imp.feature.clone(),
                values: perm.iter().map(|&s| imp.values[s]).collect(),
            })
            .collect();
        let mut pcfg = cfg.clone();
        pcfg.budgets = perm.iter().map(|&s| cfg.budgets[s]).collect();

        let (next, rewards, costs) =
            step_with_impressions(&state, &bids, &impressions, &cfg).unwrap();
        let (pnext, prewards, pcosts) =
            step_with_impressions(&pstate, &pbids, &pimpressions, &pcfg).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            if prewards[slot] != rewards[src]
                || pcosts[slot] != costs[src]
                || pnext.locals[slot].budget_remaining != next.locals[src].budget_remaining
            {
                return check("step permutation equivariance", false, format!("trial {trial}"));
            }
        }
    }
    check("step permutation equivariance", true, "100 permuted steps".into())
}

fn exact_return_permutation_check() -> CheckOutcome {
    let tiny = TinyConfig::two_agent();
    let arch = Arch::new(3, 2, 2);
    for seed in 0..10u64 {
        let theta = random_params(arch, seed);
        let rho = random_params(arch, 1000 + seed);
        let policies = [OraclePolicy::Params(&theta), OraclePolicy::Params(&rho)];
        let g = exact_returns(&policies, &tiny).unwrap();
        let perm = [1usize, 0usize];
        let mut market = tiny.market.clone();
        market.budgets = perm.iter().map(|&s| tiny.market.budgets[s]).collect();
        if let ncb_core::market::ValueModel::Discrete { bases, .. } = &mut market.value_model {
            let orig = bases.clone();
            *bases = perm.iter().map(|&s| orig[s]).collect();
        }
        let ptiny = TinyConfig::new(market).unwrap();
        let theta_p = theta.permuted_agents(&perm);
        let rho_p = rho.permuted_agents(&perm);
        let ppolicies = [OraclePolicy::Params(&rho_p), OraclePolicy::Params(&theta_p)];
        let pg = exact_returns(&ppolicies, &ptiny).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            if (pg[slot] - g[src]).abs() > 1e-12 {
                return check(
                    "exact returns permute",
                    false,
                    format!("seed {seed}: {} vs {}", pg[slot], g[src]),
                );
            }
        }
    }
    check("exact returns permute", true, "10 random policy pairs, 1e-12".into())
}

fn enumeration_probability_check() -> CheckOutcome {
    let tiny = TinyConfig::two_agent();
    let theta = random_params(Arch::new(3, 2, 2), 7);
    let policies = [OraclePolicy::Params(&theta), OraclePolicy::Params(&theta)];
    let mut total = 0.0;
    for_each_trajectory(&policies, &tiny, |_, prob| total += prob).unwrap();
    let ok = (total - 1.0).abs() < 1e-12;
    check("enumeration probabilities sum to 1", ok, format!("total = {total:.15}"))
}

fn weighted_decomposition_check() -> CheckOutcome {
    let tiny = TinyConfig::two_agent();
    let arch = Arch::new(3, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20u64 {
        let theta = random_params(arch, 2000 + trial);
        let rho = random_params(arch, 3000 + trial);
        let k0: f64 = rng.gen_range(0.0..1.0);
        let kappa = [k0, 1.0 - k0];
        let direct = exact_weighted_return(&rho, &theta, &kappa, &tiny).unwrap();
        let combined: f64 = (0..2)
            .map(|i| kappa[i] * exact_focal_return(&rho, &theta, i, &tiny).unwrap())
            .sum();
        if (direct - combined).abs() > 1e-12 {
            return check(
                "weighted return decomposition",
                false,
                format!("trial {trial}: {direct} vs {combined}"),
            );
        }
    }
    check("weighted return decomposition", true, "20 random mixtures, 1e-12".into())
}

fn score_identity_check() -> CheckOutcome {
    let tiny = TinyConfig::two_agent();
    let arch = Arch::new(3, 2, 2);
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let p = random_params(arch, 4000 + seed);
        let state = &tiny.initial_states()[0].0.locals[(seed % 2) as usize];
        let dist = distribution(&p, state);
        let mut expectation = vec![0.0; p.values.len()];
        for (a, &prob) in dist.probs.iter().enumerate() {
            accumulate_log_prob_grad(&p, state, a, prob, &mut expectation);
        }
        worst = worst.max(expectation.iter().fold(0.0_f64, |m, g| m.max(g.abs())));
    }
    check("score-function identity", worst < 1e-10, format!("max |E[score]| = {worst:.2e}"))
}

fn estimator_expectation_check() -> CheckOutcome {
    let tiny = TinyConfig::two_agent();
    let arch = Arch::new(3, 2, 2);
    let theta = random_params(arch, 21);
    let nu_bar = random_params(arch, 22);
    let lambda = [0.4, 0.6];
    let lambda_bar = 1.0;
    let kappa = [0.4, 0.6];
    let h = 1e-4;

    // cooperative term
    let mut l1_exact = vec![0.0; theta.values.len()];
    let shared: Vec<OraclePolicy> = (0..2).map(|_| OraclePolicy::Params(&theta)).collect();
    for_each_trajectory(&shared, &tiny, |traj, prob| {
        l1_contribution(traj, &lambda, &theta, None, prob, &mut l1_exact);
    })
    .unwrap();
    let l1_target = central_difference(&theta, h, |p| {
        let policies: Vec<OraclePolicy> = (0..2).map(|_| OraclePolicy::Params(p)).collect();
        let g = exact_returns(&policies, &tiny)?;
        Ok(g.iter().zip(&lambda).map(|(gi, li)| (1.0 + li) * gi).sum())
    })
    .unwrap();
    let e1 = rel_l2(&l1_exact, &l1_target);

    // competitive terms
    let mut ls_exact = vec![0.0; theta.values.len()];
    let mut lg_exact = vec![0.0; theta.values.len()];
    for (focal, &k) in kappa.iter().enumerate() {
        let policies = focal_assignment(&nu_bar, &theta, focal, 2);
        for_each_trajectory_with_focal(&policies, &tiny, focal, |traj, prob| {
            nonfocal_score_contribution(traj, &theta, None, lambda_bar * k * prob, &mut ls_exact)
                .unwrap();
            focal_score_contribution(traj, &nu_bar, None, lambda_bar * k * prob, &mut lg_exact)
                .unwrap();
        })
        .unwrap();
    }
    let ls_target: Vec<f64> =
        central_difference(&theta, h, |p| exact_weighted_return(&nu_bar, p, &kappa, &tiny))
            .unwrap()
            .iter()
            .map(|g| lambda_bar * g)
            .collect();
    let lg_target: Vec<f64> =
        central_difference(&nu_bar, h, |p| exact_weighted_return(p, &theta, &kappa, &tiny))
            .unwrap()
            .iter()
            .map(|g| lambda_bar * g)
            .collect();
    let e2 = rel_l2(&ls_exact, &ls_target);
    let e3 = rel_l2(&lg_exact, &lg_target);

    let worst = e1.max(e2).max(e3);
    check(
        "estimator expectations match finite differences",
        worst < 1e-5,
        format!("rel errors: L1 {e1:.2e}, Ls {e2:.2e}, Lg' {e3:.2e}"),
    )
}

fn monte_carlo_agreement_check() -> CheckOutcome {
    let tiny = TinyConfig::two_agent();
    let arch = Arch::new(3, 2, 2);
    let theta = random_params(arch, 31);
    let policies: Vec<OraclePolicy> = (0..2).map(|_| OraclePolicy::Params(&theta)).collect();
    let exact = exact_returns(&policies, &tiny).unwrap();
    let episodes = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let batch = rollout_shared(&theta, &tiny.market, episodes, &mut rng).unwrap();
    let estimate = batch.mean_returns();
    let sigma = 5.0 / (episodes as f64).sqrt();
    for i in 0..2 {
        if (estimate[i] - exact[i]).abs() > 3.0 * sigma {
            return check(
                "monte-carlo returns converge to exact",
                false,
                format!("agent {i}: {} vs {}", estimate[i], exact[i]),
            );
        }
    }

    // gradient estimate against the exact gradient target
    let lambda = [0.3, 0.7];
    let target = central_difference(&theta, 1e-4, |p| {
        let policies: Vec<OraclePolicy> = (0..2).map(|_| OraclePolicy::Params(p)).collect();
        let g = exact_returns(&policies, &tiny)?;
        Ok(g.iter().zip(&lambda).map(|(gi, li)| (1.0 + li) * gi).sum())
    })
    .unwrap();
    let grad = grad_l1(&batch, &lambda, &theta, true).unwrap();
    let err = rel_l2(&grad, &target);
    check(
        "monte-carlo returns converge to exact",
        err < 0.05,
        format!("gradient rel error {err:.3} at {episodes} episodes"),
    )
}

fn best_response_check() -> CheckOutcome {
    let tiny = TinyConfig::two_agent_slack();
    // opponents that never bid leave the whole prize to the best response
    let mut theta = PolicyParams::zeros(Arch::new(3, 2, 2));
    theta.values[2] = 100.0;
    let (_, value) = exact_best_response(0, &theta, &tiny).unwrap();
    if (value - 2.0).abs() > 1e-12 {
        return check("exact best response", false, format!("dominant value {value} != 2"));
    }
    // a dominant policy is its own best response
    let mut top = PolicyParams::zeros(Arch::new(3, 2, 2));
    let d = 4 + 2;
    top.values[2 * d + 2] = 100.0;
    let g = exact_returns(&[OraclePolicy::Params(&top), OraclePolicy::Params(&top)], &tiny)
        .unwrap();
    let (_, br) = exact_best_response(0, &top, &tiny).unwrap();
    let ok = (br - g[0]).abs() < 1e-12;
    check("exact best response", ok, format!("fixed point gap {:.2e}", (br - g[0]).abs()))
}

fn checkpoint_roundtrip_check() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let p = PolicyParams::random_init(Arch::new(5, 10, 4), &mut rng);
    let bytes = checkpoint_bytes(&p);
    match checkpoint_from_bytes(&bytes) {
        Ok(restored) if checkpoint_bytes(&restored) == bytes => {
            check("checkpoint round trip", true, format!("{} bytes", bytes.len()))
        }
        Ok(_) => check("checkpoint round trip", false, "bytes differ".into()),
        Err(e) => check("checkpoint round trip", false, e.to_string()),
    }
}

/// Sanity use of `generate_impressions` so value generation is exercised
/// through the public path as well.
pub fn impression_values_nonnegative() -> bool {
    let tiny = TinyConfig::two_agent();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let state = sample_initial_state(&tiny.market, &mut rng);
    let imps = generate_impressions(&state, &tiny.market, &mut rng);
    imps.iter().all(|imp| imp.values.iter().all(|&v| v >= 0.0))
}
