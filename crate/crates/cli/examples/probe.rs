use ncb_core::policy::load_checkpoint;
use ncb_core::rollout::{rollout_shared, PolicyAssignment};
use ncb_cli::config::load_config;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = load_config(Path::new(&args[1])).unwrap();
    let theta = load_checkpoint(Path::new(&args[2])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = cfg.market.n_agents;
    let horizon = cfg.market.horizon;

    let batch = rollout_shared(&theta, &cfg.market, 3000, &mut rng).unwrap();
    let g = batch.mean_returns();
    let sw: f64 = g.iter().sum();
    println!("sw {:.2}  revenue {:.2}", sw, batch.mean_revenue());

    // mean bid level index per agent per step + activity rate
    let mut level_sum = vec![vec![0.0; horizon]; n];
    let mut level_cnt = vec![vec![0usize; horizon]; n];
    for ep in &batch.episodes {
        for (t, st) in ep.steps.iter().enumerate() {
            for i in 0..n {
                if let Some(a) = st.actions[i] {
                    level_sum[i][t] += cfg.market.bid_levels[a];
                    level_cnt[i][t] += 1;
                }
            }
        }
    }
    println!("mean bid multiplier per (agent, step); '-' = inactive");
    for i in 0..n {
        let row: Vec<String> = (0..horizon)
            .map(|t| {
                if level_cnt[i][t] == 0 {
                    "  -  ".into()
                } else {
                    format!("{:.2}({:>3.0}%)", level_sum[i][t] / level_cnt[i][t] as f64,
                        100.0 * level_cnt[i][t] as f64 / batch.episodes.len() as f64)
                }
            })
            .collect();
        println!("agent {i} (B={:>5.1}): {}", cfg.market.budgets[i], row.join(" "));
    }
    let _ = PolicyAssignment::Shared(&theta);
}
