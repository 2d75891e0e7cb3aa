use ncb_core::bpg::{dual_update, test_clip, train_unified_solution, DualState, TrainConfig};
use ncb_core::gradients::{assemble, grad_l1, grad_lg_prime, grad_ls, grad_lw_star};
use ncb_core::policy::load_checkpoint;
use ncb_core::rollout::{rollout_shared, rollout_weighted};
use ncb_core::bpg::estimate_unilateral_returns;
use ncb_cli::config::load_config;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = load_config(Path::new(&args[1])).unwrap();
    let theta0 = load_checkpoint(Path::new(&args[2])).unwrap();
    let mode = args[3].as_str(); // full | no_ls | no_lw | l1_only
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let tc = TrainConfig { xi: 1.0, ..TrainConfig::default() };
    let mut theta = theta0.clone();
    let mut nu = theta0.clone();
    let mut x_star: Option<ncb_core::policy::PolicyParams> = None;
    let mut dual = DualState::uniform(cfg.market.n_agents, 0.0);

    for iter in 0..40 {
        let kappa = dual.effective_kappas();
        let (x, _) =
            train_unified_solution(&theta, x_star.as_ref(), &kappa, &cfg.market, &tc, &mut rng)
                .unwrap();
        let eval = rollout_shared(&theta, &cfg.market, 1024, &mut rng).unwrap();
        let g_theta = eval.mean_returns();
        let sw: f64 = g_theta.iter().sum();
        let g_x = estimate_unilateral_returns(&x, &theta, &cfg.market, 256, &mut rng).unwrap();
        dual = dual_update(&g_x, &g_theta, 0.0, sw).unwrap();

        let batch = rollout_shared(&theta, &cfg.market, 256, &mut rng).unwrap();
        let l1 = grad_l1(&batch, &dual.lambdas, &theta, true).unwrap();
        let (ls, lg, lw) = if dual.lambda_bar > 0.0 {
            let nb = rollout_weighted(&nu, &theta, &kappa, &cfg.market, 256, &mut rng).unwrap();
            let xb = rollout_weighted(&x, &theta, &kappa, &cfg.market, 256, &mut rng).unwrap();
            (
                grad_ls(&nb, dual.lambda_bar, &theta, true).unwrap(),
                grad_lg_prime(&nb, dual.lambda_bar, &nu, true).unwrap(),
                grad_lw_star(&xb, &theta, true).unwrap(),
            )
        } else {
            (vec![0.0; theta.values.len()], vec![0.0; theta.values.len()], vec![0.0; theta.values.len()])
        };
        let zeros = vec![0.0; theta.values.len()];
        let (mut dt, mut dn) = match mode {
            "full" => assemble(&l1, &ls, &lg, &lw, tc.xi, dual.lambda_bar, false).unwrap(),
            "no_ls" => assemble(&l1, &zeros, &lg, &lw, tc.xi, dual.lambda_bar, false).unwrap(),
            "no_lw" => assemble(&l1, &ls, &lg, &zeros, tc.xi, dual.lambda_bar, false).unwrap(),
            "l1_only" => assemble(&l1, &zeros, &lg, &zeros, tc.xi, dual.lambda_bar, false).unwrap(),
            _ => panic!(),
        };
        test_clip(&mut dt, 5.0);
        test_clip(&mut dn, 5.0);
        theta.add_scaled(&dt, -0.05).unwrap();
        theta.decay(tc.weight_decay);
        nu.add_scaled(&dn, -0.08).unwrap();
        nu.decay(tc.weight_decay);
        x_star = Some(x);

        if iter % 8 == 0 || iter == 39 {
            println!(
                "iter {iter}: sw {:.1} lb {:.1} g9 {:.2} gap9 {:.2}",
                sw, dual.lambda_bar, g_theta[9], g_x[9] - g_theta[9]
            );
        }
    }
}
