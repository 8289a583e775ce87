use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ood_charging::analysis::{roe_mpc_bound, verify_stabilizability, BoundInputs};
use ood_charging::config::ExperimentConfig;
use ood_charging::env::{run_episode, Policy, ZeroPolicy};
use ood_charging::experiment::{analyze_run, cell_policy, prepare_regimes, run_experiment};
use ood_charging::model::assemble_dynamics;
use ood_charging::mpc::{write_mpc_log, MpcPolicy};
use ood_charging::nn::{LearnedPolicy, Learner};
use ood_charging::ood::{write_trust_log, Beta, TRUST_LOG_HEADER};
use ood_charging::rng::{derive_seed, stream, stream_rng};
use ood_charging::session::{generate_sessions, GeneratorParams, Profile};
use ood_charging::Error;

#[derive(Parser)]
#[command(name = "ood-charging", version, about = "OOD-aware EV charging experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Mpc,
    Learned,
    Ood,
    Zero,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode with one policy and write its trajectory.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "mpc")]
        policy: PolicyKind,
        #[arg(long, default_value = "1")]
        beta: Beta,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Episode index; selects the regime and the solar stream.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        /// Trajectory CSV (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step planner or trust log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the (β, seed) grid.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated β values, `inf` allowed.
        #[arg(long, value_delimiter = ',')]
        beta: Option<Vec<Beta>>,
        /// Number of seeds, numbered from 0.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        shift: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute summary.csv from a finished run directory.
    Analyze {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Singular-value floor over sliding windows and the baseline bound constants.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        window: usize,
        #[arg(long, default_value_t = 0.01)]
        floor: f64,
    },
    /// Write a synthetic session fixture.
    GenSessions {
        #[arg(long, default_value = "pre")]
        profile: Profile,
        #[arg(long, default_value_t = 6)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long = "T", default_value_t = 144)]
        horizon: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Cells(usize),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Validation(_) | Error::Parse { .. } => Failure::Config(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn simulate(
    cfg: &ExperimentConfig,
    kind: PolicyKind,
    beta: Beta,
    seed: u64,
    episode: usize,
    out: Option<&Path>,
    log: Option<&Path>,
) -> Result<(), Failure> {
    let station = cfg.station()?;
    let mpc = cfg.mpc_settings()?;
    let regimes = prepare_regimes(cfg)?;
    let (sessions, solar) = regimes.for_episode(episode);
    let mut rng = stream_rng(cfg.master_seed, seed, stream::SOLAR, episode as u64);
    let traj = match kind {
        PolicyKind::Mpc => {
            let mut p = MpcPolicy::new(station.clone(), mpc).with_log();
            let traj = run_episode(&station, sessions, solar, &mut p, &mut rng)?;
            if let Some(path) = log {
                write_mpc_log(p.log.as_deref().unwrap_or_default(), BufWriter::new(File::create(path)?))?;
            }
            traj
        }
        PolicyKind::Ood => {
            let mut p = cell_policy(cfg, &station, &mpc, beta, seed)?;
            let traj = run_episode(&station, sessions, solar, &mut p, &mut rng)?;
            if let Some(path) = log {
                let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
                w.write_record(TRUST_LOG_HEADER).map_err(Error::from)?;
                write_trust_log(&mut w, episode, &p.records)?;
                w.flush()?;
            }
            traj
        }
        PolicyKind::Learned => {
            let learner_seed = derive_seed(cfg.master_seed, seed, stream::LEARNER, 0);
            let learner = Learner::new(&station.space, cfg.horizon, cfg.ddpg_params(), learner_seed)?;
            let mut p = LearnedPolicy::new(station.clone(), cfg.estimator_clip, learner);
            run_episode(&station, sessions, solar, &mut p as &mut dyn Policy, &mut rng)?
        }
        PolicyKind::Zero => run_episode(&station, sessions, solar, &mut ZeroPolicy(cfg.m), &mut rng)?,
    };
    traj.write_csv(episode, true, output(out)?)?;
    eprintln!("episode cost {}", traj.total_cost());
    Ok(())
}

fn verify(cfg: &ExperimentConfig, window: usize, floor: f64) -> Result<(), Failure> {
    if window == 0 || window >= cfg.horizon {
        return Err(Failure::Config(format!("window must be in 1..{}", cfg.horizon)));
    }
    let station = cfg.station()?;
    let spec = &station.dynamics;
    let windows: Vec<(usize, usize)> = (0..cfg.horizon - window).step_by(window).map(|t| (t, t + window)).collect();
    let report = verify_stabilizability(spec, &windows, floor)?;
    println!("t,t_end,sigma_min");
    for (t, e, s) in &report.entries {
        println!("{t},{e},{s}");
    }
    println!("min sigma_min {} vs floor {}: {}", report.min, floor, if report.pass { "pass" } else { "fail" });

    let (a, b) = assemble_dynamics(spec, 0);
    let a_bar = a.singular_values().max();
    let b_bar = b.singular_values().max();
    let solar = cfg.solar_pre_mean.abs().max(cfg.solar_post_mean.abs()) + 6.0 * cfg.solar_pre_sd.max(cfg.solar_post_sd);
    let m = cfg.m as f64;
    let w_bar = (m * cfg.soc_limit.powi(2) + m * (cfg.delta_hours * solar).powi(2)).sqrt();
    let (mu, xi) = station.costs.eigen_bounds();
    let inputs = BoundInputs {
        a_bar,
        b_bar,
        w_bar,
        mu,
        xi,
        sigma: report.min,
    };
    println!("A_bar {a_bar}\nB_bar {b_bar}\nW_bar {w_bar}\nmu {mu}\nxi {xi}\nsigma {}", report.min);
    match roe_mpc_bound(&inputs, None) {
        Ok(c) => println!(
            "lambda_bar {}\nC {}\nsigma_upper {}\nsigma_lower {}\nbound {}",
            c.lambda_bar, c.c, c.sigma_upper, c.sigma_lower, c.bound
        ),
        Err(e) => println!("bound undefined: {e}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            config,
            policy,
            beta,
            seed,
            episode,
            out,
            log,
        } => {
            let cfg = load_config(config.as_deref())?;
            simulate(&cfg, policy, beta, seed, episode, out.as_deref(), log.as_deref())
        }
        Command::Experiment {
            config,
            beta,
            seeds,
            episodes,
            shift,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(b) = beta {
                cfg.beta_ood_grid = b;
            }
            if let Some(n) = seeds {
                cfg.seeds = (0..n).collect();
            }
            if let Some(e) = episodes {
                // Keep the shift at the same fraction of the run unless given.
                cfg.shift_episode = shift.unwrap_or(cfg.shift_episode * e / cfg.episodes);
                cfg.episodes = e;
            } else if let Some(s) = shift {
                cfg.shift_episode = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o.to_string_lossy().into_owned();
            }
            cfg.validate()?;
            let outcome = run_experiment(&cfg)?;
            let mut summary = Vec::new();
            ood_charging::analysis::write_summary(&outcome.summary, &mut summary)?;
            print!("{}", String::from_utf8_lossy(&summary));
            match outcome.manifest.failures.len() {
                0 => Ok(()),
                n => Err(Failure::Cells(n)),
            }
        }
        Command::Analyze { dir } => {
            let cfg = ExperimentConfig::from_json_file(&dir.join("config.json"))?;
            let (pre, post) = cfg.windows();
            let summary = analyze_run(&dir, pre, post, cfg.normalize_rewards)?;
            ood_charging::analysis::write_summary(&summary, io::stdout().lock())?;
            Ok(())
        }
        Command::Verify { config, window, floor } => verify(&load_config(config.as_deref())?, window, floor),
        Command::GenSessions {
            profile,
            count,
            seed,
            m,
            horizon,
            out,
        } => {
            let (set, log) = generate_sessions(&GeneratorParams::new(profile, count, m, horizon, seed))?;
            set.write_csv(output(out.as_deref())?)?;
            eprintln!("drawn {} kept {} omitted {}", log.drawn, log.kept, log.omitted);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Cells(n)) => {
            eprintln!("{n} cell(s) failed; see manifest.json");
            ExitCode::from(2)
        }
    }
}
