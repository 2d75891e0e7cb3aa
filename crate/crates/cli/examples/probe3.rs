use ncb_core::bpg::TrainConfig;
use ncb_core::gradients::grad_l1;
use ncb_core::policy::load_checkpoint;
use ncb_core::rollout::rollout_shared;
use ncb_cli::config::load_config;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = load_config(Path::new(&args[1])).unwrap();
    let mut theta = load_checkpoint(Path::new(&args[2])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let tc = TrainConfig::default();
    let mut lambda = vec![0.0; cfg.market.n_agents];
    lambda[9] = 10.0;

    for step in 0..60 {
        if step % 10 == 0 {
            let eval = rollout_shared(&theta, &cfg.market, 2000, &mut rng).unwrap();
            let g = eval.mean_returns();
            println!(
                "step {step}: g9 = {:.2}, sw = {:.1}",
                g[9],
                g.iter().sum::<f64>()
            );
        }
        let batch = rollout_shared(&theta, &cfg.market, 256, &mut rng).unwrap();
        let l1 = grad_l1(&batch, &lambda, &theta, true).unwrap();
        let mut delta: Vec<f64> = l1.iter().map(|&g| -g).collect();
        ncb_core::bpg::test_clip(&mut delta, 5.0);
        theta.add_scaled(&delta, -0.05).unwrap();
        theta.decay(tc.weight_decay);
    }
    let eval = rollout_shared(&theta, &cfg.market, 2000, &mut rng).unwrap();
    let g = eval.mean_returns();
    println!("final: g9 = {:.2}, sw = {:.1}", g[9], g.iter().sum::<f64>());
}
