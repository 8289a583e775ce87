//! The (β, seed) experiment grid and its on-disk artifacts.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{aggregate_metrics, write_summary, CellStats, RewardRow, SummaryRow};
use crate::config::ExperimentConfig;
use crate::env::{run_episode, SolarModel, Station};
use crate::error::{Error, Result};
use crate::mpc::{MpcPolicy, MpcSettings};
use crate::nn::Learner;
use crate::ood::{write_trust_log, Beta, OodPolicy, TRUST_LOG_HEADER};
use crate::rng::{derive_seed, stream, stream_rng};
use crate::session::{generate_sessions, load_sessions, GeneratorParams, Profile, SessionSet};

pub const REWARD_HEADER: [&str; 5] = ["beta", "seed", "episode", "reward_raw", "reward_norm"];
pub const TD_LOG_HEADER: [&str; 5] = ["episode", "steps", "avg_abs_td", "final_cum_td", "avg_lambda"];
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPaths {
    pub beta: Beta,
    pub seed: u64,
    pub rewards: String,
    pub trust: String,
    pub td: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub beta: Beta,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub beta_grid: Vec<Beta>,
    pub sessions_pre: String,
    pub sessions_post: String,
    pub reference: String,
    /// Paths are relative to the output directory.
    pub cells: Vec<CellPaths>,
    pub failures: Vec<CellFailure>,
    pub complete: bool,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// Everything a finished run produced, also kept in memory.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    pub rewards: Vec<RewardRow>,
    pub cells: Vec<CellStats>,
    pub summary: Vec<SummaryRow>,
}

/// Pre- and post-shift inputs shared by every cell.
#[derive(Debug, Clone)]
pub struct Regimes {
    pub sessions: [SessionSet; 2],
    pub solar: [SolarModel; 2],
    pub shift: usize,
}

impl Regimes {
    pub fn for_episode(&self, episode: usize) -> (&SessionSet, &SolarModel) {
        let k = usize::from(episode >= self.shift);
        (&self.sessions[k], &self.solar[k])
    }
}

fn cell_dir(beta: Beta, seed: u64) -> String {
    format!("cells/beta-{beta}_seed-{seed}")
}

/// Loads the configured session files, or generates fixtures when a path
/// is empty.
pub fn prepare_sessions(cfg: &ExperimentConfig) -> Result<[SessionSet; 2]> {
    let one = |path: &str, profile: Profile, id: u64| -> Result<SessionSet> {
        if path.is_empty() {
            let seed = derive_seed(cfg.master_seed, 0, id, 0);
            let params = GeneratorParams::new(profile, cfg.sessions_count, cfg.m, cfg.horizon, seed);
            Ok(generate_sessions(&params)?.0)
        } else {
            load_sessions(Path::new(path), cfg.horizon, cfg.m)
        }
    };
    Ok([
        one(&cfg.sessions_pre, Profile::Pre, stream::SESSIONS_PRE)?,
        one(&cfg.sessions_post, Profile::Post, stream::SESSIONS_POST)?,
    ])
}

pub fn prepare_regimes(cfg: &ExperimentConfig) -> Result<Regimes> {
    Ok(Regimes {
        sessions: prepare_sessions(cfg)?,
        solar: [
            SolarModel::new(cfg.solar_pre_mean, cfg.solar_pre_sd)?,
            SolarModel::new(cfg.solar_post_mean, cfg.solar_post_sd)?,
        ],
        shift: cfg.shift_episode,
    })
}

/// Baseline episode cost for every (seed, episode).
pub fn mpc_reference(
    cfg: &ExperimentConfig,
    station: &Station,
    mpc: &MpcSettings,
    regimes: &Regimes,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut policy = MpcPolicy::new(station.clone(), mpc.clone());
    (0..cfg.episodes)
        .map(|ep| {
            let (sessions, solar) = regimes.for_episode(ep);
            let mut rng = stream_rng(cfg.master_seed, seed, stream::SOLAR, ep as u64);
            Ok(run_episode(station, sessions, solar, &mut policy, &mut rng)?.total_cost())
        })
        .collect()
}

/// The meta-policy for one cell. `β = ∞` never trains: its actions are
/// the baseline's regardless of the learner.
pub fn cell_policy(cfg: &ExperimentConfig, station: &Station, mpc: &MpcSettings, beta: Beta, seed: u64) -> Result<OodPolicy> {
    let learner_seed = derive_seed(cfg.master_seed, seed, stream::LEARNER, 0);
    let learner = Learner::new(&station.space, cfg.horizon, cfg.ddpg_params(), learner_seed)?;
    let mut policy = OodPolicy::new(station.clone(), mpc.clone(), learner, beta);
    policy.radius.mode = cfg.td_mode;
    policy.radius.decay = cfg.td_decay;
    policy.agent.learning = !beta.is_infinite();
    Ok(policy)
}

struct CellResult {
    rewards: Vec<RewardRow>,
    stats: CellStats,
}

fn reward_norm(cost: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if cost == 0.0 {
            -1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        -cost / reference
    }
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    station: &Station,
    mpc: &MpcSettings,
    regimes: &Regimes,
    reference: &[f64],
    beta: Beta,
    seed: u64,
    dir: &Path,
) -> Result<CellResult> {
    fs::create_dir_all(dir)?;
    let mut rewards_w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("rewards.csv"))?));
    let mut trust_w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("trust.csv"))?));
    let mut td_w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("td.csv"))?));
    rewards_w.write_record(REWARD_HEADER)?;
    trust_w.write_record(TRUST_LOG_HEADER)?;
    td_w.write_record(TD_LOG_HEADER)?;

    let mut policy = cell_policy(cfg, station, mpc, beta, seed)?;
    let mut rewards = Vec::with_capacity(cfg.episodes);
    let mut stats = CellStats {
        beta,
        seed,
        lambda_sum: 0.0,
        td_abs_sum: 0.0,
        steps: 0,
    };
    for ep in 0..cfg.episodes {
        let (sessions, solar) = regimes.for_episode(ep);
        let mut rng = stream_rng(cfg.master_seed, seed, stream::SOLAR, ep as u64);
        let cost = run_episode(station, sessions, solar, &mut policy, &mut rng)?.total_cost();
        if !cost.is_finite() {
            return Err(Error::Validation(format!("episode {ep} cost is not finite")));
        }
        let row = RewardRow {
            beta,
            seed,
            episode: ep,
            reward_raw: -cost,
            reward_norm: reward_norm(cost, reference[ep]),
        };
        rewards_w.write_record([
            beta.to_string(),
            seed.to_string(),
            ep.to_string(),
            row.reward_raw.to_string(),
            row.reward_norm.to_string(),
        ])?;
        rewards.push(row);

        let recs = &policy.records;
        write_trust_log(&mut trust_w, ep, recs)?;
        let lam: f64 = recs.iter().map(|r| r.lambda).sum();
        let td: f64 = recs.iter().map(|r| r.td.abs()).sum();
        let n = recs.len().max(1) as f64;
        td_w.write_record([
            ep.to_string(),
            recs.len().to_string(),
            (td / n).to_string(),
            recs.last().map_or(0.0, |r| r.cumulative).to_string(),
            (lam / n).to_string(),
        ])?;
        // Step by step, as `analyze_run` re-reads them from the trust log.
        for r in recs {
            stats.lambda_sum += r.lambda;
            stats.td_abs_sum += r.td.abs();
        }
        stats.steps += recs.len();
        if (ep + 1) % 100 == 0 {
            info!("cell β={beta} seed={seed}: episode {} done", ep + 1);
        }
    }
    rewards_w.flush()?;
    trust_w.flush()?;
    td_w.flush()?;
    Ok(CellResult { rewards, stats })
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

fn write_rewards(path: &Path, rows: &[RewardRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(REWARD_HEADER)?;
    for r in rows {
        w.write_record([
            r.beta.to_string(),
            r.seed.to_string(),
            r.episode.to_string(),
            r.reward_raw.to_string(),
            r.reward_norm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every (β, seed) cell. Cell failures are recorded in the manifest
/// and do not stop the other cells.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out = cfg.out_path();
    fs::create_dir_all(&out)?;
    let station = cfg.station()?;
    let mpc = cfg.mpc_settings()?;
    let regimes = prepare_regimes(cfg)?;
    regimes.sessions[0].save(&out.join("sessions_pre.csv"))?;
    regimes.sessions[1].save(&out.join("sessions_post.csv"))?;

    let mut manifest = RunManifest {
        version: VERSION.into(),
        config_hash: cfg.hash(),
        seeds: cfg.seeds.clone(),
        beta_grid: cfg.beta_ood_grid.clone(),
        sessions_pre: "sessions_pre.csv".into(),
        sessions_post: "sessions_post.csv".into(),
        reference: "mpc_reference.csv".into(),
        cells: Vec::new(),
        failures: Vec::new(),
        complete: false,
    };
    for &beta in &cfg.beta_ood_grid {
        for &seed in &cfg.seeds {
            let dir = cell_dir(beta, seed);
            manifest.cells.push(CellPaths {
                beta,
                seed,
                rewards: format!("{dir}/rewards.csv"),
                trust: format!("{dir}/trust.csv"),
                td: format!("{dir}/td.csv"),
            });
        }
    }
    let manifest_path = out.join("manifest.json");
    manifest.save(&manifest_path)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg).expect("config serializes") + "\n")?;

    info!("baseline reference for {} seeds", cfg.seeds.len());
    let references: Vec<Vec<f64>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| mpc_reference(cfg, &station, &mpc, &regimes, seed))
        .collect::<Result<_>>()?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out.join("mpc_reference.csv"))?));
    w.write_record(["seed", "episode", "cost"])?;
    for (seed, costs) in cfg.seeds.iter().zip(&references) {
        for (ep, c) in costs.iter().enumerate() {
            w.write_record([seed.to_string(), ep.to_string(), c.to_string()])?;
        }
    }
    w.flush()?;
    let reference: BTreeMap<u64, &[f64]> = cfg.seeds.iter().copied().zip(references.iter().map(Vec::as_slice)).collect();

    let results: Vec<(CellPaths, std::result::Result<CellResult, String>)> = manifest
        .cells
        .par_iter()
        .map(|cell| {
            let dir = out.join(cell_dir(cell.beta, cell.seed));
            let reference = reference[&cell.seed];
            let run = catch_unwind(AssertUnwindSafe(|| {
                run_cell(cfg, &station, &mpc, &regimes, reference, cell.beta, cell.seed, &dir)
            }));
            let res = match run {
                Ok(Ok(r)) => Ok(r),
                Ok(Err(e)) => Err(e.to_string()),
                Err(p) => Err(panic_message(p)),
            };
            (cell.clone(), res)
        })
        .collect();

    let mut rewards = Vec::new();
    let mut cells = Vec::new();
    for (cell, res) in results {
        match res {
            Ok(r) => {
                rewards.extend(r.rewards);
                cells.push(r.stats);
            }
            Err(message) => {
                warn!("cell β={} seed={} failed: {message}", cell.beta, cell.seed);
                manifest.failures.push(CellFailure {
                    beta: cell.beta,
                    seed: cell.seed,
                    message,
                });
            }
        }
    }
    write_rewards(&out.join("rewards.csv"), &rewards)?;
    let (pre, post) = cfg.windows();
    let summary = if rewards.is_empty() {
        Vec::new()
    } else {
        aggregate_metrics(&rewards, &cells, pre, post, cfg.normalize_rewards)?
    };
    write_summary(&summary, BufWriter::new(File::create(out.join("summary.csv"))?))?;
    manifest.complete = true;
    manifest.save(&manifest_path)?;
    Ok(ExperimentOutcome {
        out_dir: out,
        manifest,
        rewards,
        cells,
        summary,
    })
}

/// Rebuilds the summary from the CSVs of a finished run.
pub fn analyze_run(out: &Path, pre: (usize, usize), post: (usize, usize), normalized: bool) -> Result<Vec<SummaryRow>> {
    let manifest = RunManifest::load(&out.join("manifest.json"))?;
    let failed = |c: &CellPaths| manifest.failures.iter().any(|f| f.beta == c.beta && f.seed == c.seed);
    let mut rewards = Vec::new();
    let mut cells = Vec::new();
    for cell in manifest.cells.iter().filter(|c| !failed(c)) {
        let path = out.join(&cell.rewards);
        let mut rdr = csv::Reader::from_path(&path)?;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |k: usize| -> Result<f64> {
                rec.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
                    path: path.clone(),
                    row: i + 2,
                    msg: format!("bad field {}", REWARD_HEADER[k]),
                })
            };
            rewards.push(RewardRow {
                beta: cell.beta,
                seed: cell.seed,
                episode: field(2)? as usize,
                reward_raw: field(3)?,
                reward_norm: field(4)?,
            });
        }
        let path = out.join(&cell.trust);
        let mut rdr = csv::Reader::from_path(&path)?;
        let mut stats = CellStats {
            beta: cell.beta,
            seed: cell.seed,
            lambda_sum: 0.0,
            td_abs_sum: 0.0,
            steps: 0,
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
                    path: path.clone(),
                    row: i + 2,
                    msg: format!("bad field {}", TRUST_LOG_HEADER[k]),
                })
            };
            stats.lambda_sum += parse(4)?;
            stats.td_abs_sum += parse(5)?;
            stats.steps += 1;
        }
        cells.push(stats);
    }
    if rewards.is_empty() {
        return Err(Error::Validation(format!("no completed cells under {}", out.display())));
    }
    let summary = aggregate_metrics(&rewards, &cells, pre, post, normalized)?;
    let mut file = BufWriter::new(File::create(out.join("summary.csv"))?);
    write_summary(&summary, &mut file)?;
    file.flush()?;
    Ok(summary)
}
