//! Orchestration of the subcommands: output directories, JSONL histories,
//! checkpoints, exploitability reports, sweep summaries, and plots.
//!
//! Every run writes into a fresh `output_dir/<timestamp>-<label>/`
//! directory; reruns never overwrite. With `--deterministic` the wall-clock
//! field of each record is zeroed so two runs of the same configuration
//! produce byte-identical histories.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use ncb_core::baselines::{
    train_bpg_zero_with, train_fully_cooperative_with, train_independent_with,
};
use ncb_core::bpg::{bpg_train_with, evaluate_policy, IterationRecord, TrainConfig};
use ncb_core::exploitability::{max_exploitability, max_exploitability_profile, ExploitReport};
use ncb_core::market::MarketConfig;
use ncb_core::policy::{load_checkpoint, save_checkpoint, PolicyParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Method, ResolvedConfig};
use crate::plot::{line_chart, Series};

/// Create `parent/<label>` or the first `parent/<label>-k` that does not
/// exist yet.
pub fn unique_dir(parent: &Path, label: &str) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(parent)
        .with_context(|| format!("creating output root {}", parent.display()))?;
    for k in 0..1000 {
        let name = if k == 0 { label.to_string() } else { format!("{label}-{}", k + 1) };
        let dir = parent.join(&name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    bail!("could not find a free directory name under {}", parent.display())
}

fn timestamp() -> String {
    chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string()
}

/// Aggregatable outcome of one (epsilon, seed) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub epsilon: f64,
    pub seed: u64,
    pub social_welfare: f64,
    pub max_exploitability: f64,
    pub compliant: bool,
    pub revenue: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FinalEval {
    social_welfare: f64,
    revenue: f64,
    g_theta: Vec<f64>,
    episodes: usize,
}

fn write_jsonl_line(file: &mut File, record: &IterationRecord) -> anyhow::Result<()> {
    let line = serde_json::to_string(record)?;
    writeln!(file, "{line}")?;
    Ok(())
}

/// Train one method on one (epsilon, seed) cell, writing the history,
/// checkpoints, final evaluation, and exploitability report into `dir`.
pub fn train_cell(
    market: &MarketConfig,
    train: &TrainConfig,
    method: Method,
    dir: &Path,
    deterministic: bool,
) -> anyhow::Result<CellSummary> {
    let mut history_file = File::create(dir.join("history.jsonl"))?;
    let mut write_record = |r: &IterationRecord| {
        let out = if deterministic { IterationRecord { wall_ms: 0, ..r.clone() } } else { r.clone() };
        write_jsonl_line(&mut history_file, &out).expect("history write");
    };

    let (policies, history): (Vec<PolicyParams>, Vec<IterationRecord>) = match method {
        Method::Bpg => {
            let result = bpg_train_with(market, train, &mut write_record)?;
            save_checkpoint(&result.nu_bar, &dir.join("nu_bar.ncbp"))?;
            save_checkpoint(&result.x_star, &dir.join("x_star.ncbp"))?;
            (vec![result.theta], result.history)
        }
        Method::BpgZero => {
            let result = train_bpg_zero_with(market, train, &mut write_record)?;
            (result.policies, result.history)
        }
        Method::FullyCooperative => {
            let result = train_fully_cooperative_with(market, train, &mut write_record)?;
            (result.policies, result.history)
        }
        Method::Independent => {
            let result = train_independent_with(market, train, &mut write_record)?;
            (result.policies, result.history)
        }
    };
    drop(history_file);
    save_checkpoint(&policies[0], &dir.join("theta.ncbp"))?;

    let last_sw = history.last().map(|r| r.sw).unwrap_or(0.0);

    // final evaluation and exploitability, on streams derived from the seed
    let mut eval_rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(0x5eed_0001));
    let (g_theta, social_welfare, revenue) = if method == Method::Independent {
        let batch = ncb_core::rollout::rollout_per_agent(
            &policies,
            market,
            train.eval_episodes,
            &mut eval_rng,
        )?;
        let g = batch.mean_returns();
        let sw = g.iter().sum();
        let rev = batch.mean_revenue();
        (g, sw, rev)
    } else {
        evaluate_policy(&policies[0], market, train.eval_episodes, &mut eval_rng)?
    };
    let final_eval = FinalEval {
        social_welfare,
        revenue,
        g_theta,
        episodes: train.eval_episodes,
    };
    std::fs::write(dir.join("final_eval.json"), serde_json::to_string_pretty(&final_eval)?)?;

    let mut exploit_rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(0x5eed_0002));
    let report = if method == Method::Independent {
        max_exploitability_profile(&policies, market, train, &mut exploit_rng)?
    } else {
        max_exploitability(&policies[0], market, train, &mut exploit_rng)?
    };
    std::fs::write(dir.join("exploit.json"), serde_json::to_string_pretty(&report)?)?;

    Ok(CellSummary {
        epsilon: train.epsilon_norm,
        seed: train.seed,
        social_welfare: last_sw,
        max_exploitability: report.max_exploitability,
        compliant: report.compliant,
        revenue,
    })
}

/// `train`: one method, one epsilon, one seed.
pub fn run_train(
    cfg: &ResolvedConfig,
    method: Method,
    seed: u64,
    epsilon: f64,
    deterministic: bool,
) -> anyhow::Result<PathBuf> {
    let label = format!("{}-train-{}-e{:.3}-s{}", timestamp(), method.as_str(), epsilon, seed);
    let dir = unique_dir(&cfg.experiment.output_dir, &label)?;
    std::fs::write(dir.join("resolved.toml"), crate::config::to_toml(&cfg.experiment))?;
    let train = cfg.experiment.train_for(&cfg.train, seed, epsilon);
    let summary = train_cell(&cfg.market, &train, method, &dir, deterministic)?;
    println!(
        "run complete: sw = {:.3}, max exploitability = {:.4}, compliant = {}",
        summary.social_welfare, summary.max_exploitability, summary.compliant
    );
    println!("outputs in {}", dir.display());
    Ok(dir)
}

/// One aggregated row of the sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub epsilon: f64,
    pub social_welfare_mean: f64,
    pub social_welfare_std: f64,
    pub max_exploitability_mean: f64,
    pub max_exploitability_std: f64,
    pub compliance_rate: f64,
    pub revenue_mean: f64,
    pub revenue_std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(cells: &[CellSummary], epsilon_list: &[f64]) -> Vec<SummaryRow> {
    epsilon_list
        .iter()
        .map(|&eps| {
            let group: Vec<&CellSummary> =
                cells.iter().filter(|c| c.epsilon == eps).collect();
            let sw: Vec<f64> = group.iter().map(|c| c.social_welfare).collect();
            let me: Vec<f64> = group.iter().map(|c| c.max_exploitability).collect();
            let rev: Vec<f64> = group.iter().map(|c| c.revenue).collect();
            let compliant = group.iter().filter(|c| c.compliant).count();
            let (sw_mean, sw_std) = mean_std(&sw);
            let (me_mean, me_std) = mean_std(&me);
            let (rev_mean, rev_std) = mean_std(&rev);
            SummaryRow {
                epsilon: eps,
                social_welfare_mean: sw_mean,
                social_welfare_std: sw_std,
                max_exploitability_mean: me_mean,
                max_exploitability_std: me_std,
                compliance_rate: if group.is_empty() {
                    0.0
                } else {
                    compliant as f64 / group.len() as f64
                },
                revenue_mean: rev_mean,
                revenue_std: rev_std,
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "epsilon,social_welfare_mean,social_welfare_std,max_exploitability_mean,max_exploitability_std,compliance_rate,revenue_mean,revenue_std";

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> anyhow::Result<()> {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epsilon,
            r.social_welfare_mean,
            r.social_welfare_std,
            r.max_exploitability_mean,
            r.max_exploitability_std,
            r.compliance_rate,
            r.revenue_mean,
            r.revenue_std
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn cell_dir_name(epsilon: f64, seed: u64) -> String {
    format!("e{epsilon:.3}-s{seed}")
}

/// `sweep`: the epsilon x seed grid, cells in parallel, one summary CSV.
pub fn run_sweep(cfg: &ResolvedConfig, deterministic: bool) -> anyhow::Result<PathBuf> {
    let label = format!("{}-sweep-{}", timestamp(), cfg.experiment.method.as_str());
    let dir = unique_dir(&cfg.experiment.output_dir, &label)?;
    std::fs::write(dir.join("resolved.toml"), crate::config::to_toml(&cfg.experiment))?;

    let grid: Vec<(f64, u64)> = cfg
        .experiment
        .epsilon_list
        .iter()
        .flat_map(|&e| cfg.experiment.seeds.iter().map(move |&s| (e, s)))
        .collect();

    let cells: anyhow::Result<Vec<CellSummary>> = grid
        .par_iter()
        .map(|&(epsilon, seed)| {
            let cell_dir = dir.join(cell_dir_name(epsilon, seed));
            std::fs::create_dir(&cell_dir)?;
            let train = cfg.experiment.train_for(&cfg.train, seed, epsilon);
            train_cell(&cfg.market, &train, cfg.experiment.method, &cell_dir, deterministic)
        })
        .collect();
    let cells = cells?;

    let rows = summarize(&cells, &cfg.experiment.epsilon_list);
    write_summary_csv(&rows, &dir.join("summary.csv"))?;
    println!("{SUMMARY_HEADER}");
    for r in &rows {
        println!(
            "{},{:.4},{:.4},{:.5},{:.5},{:.2},{:.4},{:.4}",
            r.epsilon,
            r.social_welfare_mean,
            r.social_welfare_std,
            r.max_exploitability_mean,
            r.max_exploitability_std,
            r.compliance_rate,
            r.revenue_mean,
            r.revenue_std
        );
    }
    println!("outputs in {}", dir.display());
    Ok(dir)
}

/// `exploit`: evaluate a checkpoint against the configured market.
pub fn run_exploit(cfg: &ResolvedConfig, checkpoint: &Path) -> anyhow::Result<PathBuf> {
    let theta = load_checkpoint(checkpoint)
        .map_err(|e| anyhow!("loading checkpoint {}: {e}", checkpoint.display()))?;
    let label = format!("{}-exploit", timestamp());
    let dir = unique_dir(&cfg.experiment.output_dir, &label)?;
    std::fs::write(dir.join("resolved.toml"), crate::config::to_toml(&cfg.experiment))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(0x5eed_0002));
    let report: ExploitReport = max_exploitability(&theta, &cfg.market, &cfg.train, &mut rng)?;
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(dir.join("exploit.json"), &json)?;
    println!("{json}");
    Ok(dir)
}

/// Rehydrate cell summaries from the files a sweep wrote.
pub fn read_cells(sweep_dir: &Path) -> anyhow::Result<Vec<CellSummary>> {
    let mut cells = Vec::new();
    for entry in std::fs::read_dir(sweep_dir)? {
        let entry = entry?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_string();
        let Some(rest) = name.strip_prefix('e') else { continue };
        let Some((eps_str, seed_str)) = rest.split_once("-s") else { continue };
        let (Ok(epsilon), Ok(seed)) = (eps_str.parse::<f64>(), seed_str.parse::<u64>()) else {
            continue;
        };
        let history_path = path.join("history.jsonl");
        if !history_path.exists() {
            continue;
        }
        let history = read_history(&history_path)?;
        let last_sw = history.last().map(|r| r.sw).unwrap_or(0.0);
        let exploit: ExploitReport =
            serde_json::from_str(&std::fs::read_to_string(path.join("exploit.json"))?)?;
        let final_eval: FinalEval =
            serde_json::from_str(&std::fs::read_to_string(path.join("final_eval.json"))?)?;
        cells.push(CellSummary {
            epsilon,
            seed,
            social_welfare: last_sw,
            max_exploitability: exploit.max_exploitability,
            compliant: exploit.compliant,
            revenue: final_eval.revenue,
        });
    }
    cells.sort_by(|a, b| (a.epsilon, a.seed).partial_cmp(&(b.epsilon, b.seed)).unwrap());
    Ok(cells)
}

pub fn read_history(path: &Path) -> anyhow::Result<Vec<IterationRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

/// `report`: render the sweep's plots.
pub fn run_report(sweep_dir: &Path) -> anyhow::Result<PathBuf> {
    let cells = read_cells(sweep_dir)?;
    if cells.is_empty() {
        bail!("no completed cells found under {}", sweep_dir.display());
    }
    let mut epsilons: Vec<f64> = cells.iter().map(|c| c.epsilon).collect();
    epsilons.sort_by(|a, b| a.partial_cmp(b).unwrap());
    epsilons.dedup();
    let rows = summarize(&cells, &epsilons);

    let dir = unique_dir(sweep_dir, "report")?;

    let sw_series = Series {
        name: "social welfare".into(),
        points: rows.iter().map(|r| (r.epsilon, r.social_welfare_mean)).collect(),
    };
    std::fs::write(
        dir.join("social_welfare_vs_epsilon.svg"),
        line_chart("Social welfare vs tolerance", "epsilon", "social welfare", &[sw_series]),
    )?;

    let me_series = Series {
        name: "max exploitability".into(),
        points: rows.iter().map(|r| (r.epsilon, r.max_exploitability_mean)).collect(),
    };
    std::fs::write(
        dir.join("max_exploitability_vs_epsilon.svg"),
        line_chart(
            "Max exploitability vs tolerance",
            "epsilon",
            "max exploitability",
            &[me_series],
        ),
    )?;

    // training curves: social welfare per iteration for the first seed of
    // each epsilon
    let mut curve_series = Vec::new();
    for &eps in &epsilons {
        let Some(cell) = cells.iter().find(|c| c.epsilon == eps) else { continue };
        let history =
            read_history(&sweep_dir.join(cell_dir_name(eps, cell.seed)).join("history.jsonl"))?;
        curve_series.push(Series {
            name: format!("eps = {eps}"),
            points: history.iter().map(|r| (r.iter as f64, r.sw)).collect(),
        });
    }
    std::fs::write(
        dir.join("training_curves.svg"),
        line_chart("Training curves", "iteration", "social welfare", &curve_series),
    )?;

    println!("report written to {}", dir.display());
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15);
        assert!((s - 1.0).abs() < 1e-15);
        let (m1, s1) = mean_std(&[5.0]);
        assert_eq!((m1, s1), (5.0, 0.0));
    }

    #[test]
    fn unique_dirs_never_collide() {
        let tmp = std::env::temp_dir().join(format!("ncb-test-{}", std::process::id()));
        let a = unique_dir(&tmp, "x").unwrap();
        let b = unique_dir(&tmp, "x").unwrap();
        let c = unique_dir(&tmp, "x").unwrap();
        assert_ne!(a, b);
        assert_ne!(b, c);
        std::fs::remove_dir_all(&tmp).unwrap();
    }

    #[test]
    fn summary_groups_by_epsilon() {
        let cells = vec![
            CellSummary {
                epsilon: 0.0,
                seed: 1,
                social_welfare: 10.0,
                max_exploitability: 0.05,
                compliant: false,
                revenue: 4.0,
            },
            CellSummary {
                epsilon: 0.0,
                seed: 2,
                social_welfare: 12.0,
                max_exploitability: 0.03,
                compliant: false,
                revenue: 6.0,
            },
            CellSummary {
                epsilon: 0.1,
                seed: 1,
                social_welfare: 20.0,
                max_exploitability: 0.08,
                compliant: true,
                revenue: 5.0,
            },
        ];
        let rows = summarize(&cells, &[0.0, 0.1]);
        assert_eq!(rows.len(), 2);
        assert!((rows[0].social_welfare_mean - 11.0).abs() < 1e-12);
        assert_eq!(rows[0].compliance_rate, 0.0);
        assert_eq!(rows[1].compliance_rate, 1.0);
    }
}
