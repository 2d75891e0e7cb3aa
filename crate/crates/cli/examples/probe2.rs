use ncb_core::policy::{load_checkpoint, PolicyParams};
use ncb_core::rollout::rollout_focal;
use ncb_cli::config::load_config;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = load_config(Path::new(&args[1])).unwrap();
    let theta = load_checkpoint(Path::new(&args[2])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let arch = theta.arch;
    let d = arch.feature_dim + arch.embed_dim;
    // force one action via the constant context feature (index 2 is base,
    // index 3 normalized budget: use a big weight on feature 3)
    for forced in 0..arch.n_actions {
        let mut pol = PolicyParams::zeros(arch);
        for k in 0..arch.n_actions {
            pol.values[k * d + 3] = if k == forced { 80.0 } else { -80.0 };
        }
        let mut line = format!("forced level {:.2}:", cfg.market.bid_levels[forced]);
        for agent in [0usize, 5, 9] {
            let b = rollout_focal(&pol, &theta, agent, &cfg.market, 3000, &mut rng).unwrap();
            line += &format!("  a{agent} {:.2}", b.mean_returns()[agent]);
        }
        println!("{line}");
    }
}
