//! Flat experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::Station;
use crate::error::{Error, Result};
use crate::model::{CostSpec, DynamicsSpec, SpaceSpec};
use crate::mpc::{EstimatorClip, HorizonMode, MpcSettings, SolarForecast, StateConstraints};
use crate::nn::{DdpgParams, OptimizerKind};
use crate::ood::{Beta, TdAccumulation};
use crate::qp::AdmmSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForecastRule {
    /// Constant at the pre-shift solar mean.
    PreMean,
    LastObserved,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub episodes: usize,
    pub shift_episode: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub m: usize,
    pub delta_hours: f64,
    pub mu_eff: f64,
    pub beta_ctrl: f64,
    pub alpha_cost: f64,
    pub beta_ood_grid: Vec<Beta>,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub solar_pre_mean: f64,
    pub solar_pre_sd: f64,
    pub solar_post_mean: f64,
    pub solar_post_sd: f64,
    /// Session files; empty paths generate a fixture from the profile.
    pub sessions_pre: String,
    pub sessions_post: String,
    pub sessions_count: usize,
    pub soc_limit: f64,
    pub rate_limit: f64,
    pub action_limit: f64,
    pub horizon_mode: String,
    pub solar_forecast: ForecastRule,
    pub estimator_clip: EstimatorClip,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    pub lr: f64,
    pub batch: usize,
    pub buffer: usize,
    pub tau_soft: f64,
    pub hidden: Vec<usize>,
    pub cost_scale: f64,
    pub noise_start: f64,
    pub noise_end: f64,
    pub updates_per_step: usize,
    pub td_mode: TdAccumulation,
    pub td_decay: f64,
    pub normalize_rewards: bool,
    /// Episode windows `[start, end)` for the summary; derived from the
    /// shift when absent.
    pub pre_window: Option<(usize, usize)>,
    pub post_window: Option<(usize, usize)>,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            episodes: 1200,
            shift_episode: 800,
            horizon: 144,
            m: 2,
            delta_hours: 1.0 / 6.0,
            mu_eff: 0.8,
            beta_ctrl: 0.2,
            alpha_cost: 0.1,
            beta_ood_grid: vec![
                Beta::Finite(0.0),
                Beta::Finite(0.1),
                Beta::Finite(1.0),
                Beta::Finite(10.0),
                Beta::Infinite,
            ],
            seeds: (0..10).collect(),
            master_seed: 0,
            solar_pre_mean: 10.0,
            solar_pre_sd: 0.05,
            solar_post_mean: 0.0,
            solar_post_sd: 0.05,
            sessions_pre: String::new(),
            sessions_post: String::new(),
            sessions_count: 6,
            soc_limit: 100.0,
            rate_limit: 6.6,
            action_limit: 2.0,
            horizon_mode: "departures".into(),
            solar_forecast: ForecastRule::PreMean,
            estimator_clip: EstimatorClip::Project,
            qp_tol: 1e-8,
            qp_max_iter: 50_000,
            lr: 1e-3,
            batch: 128,
            buffer: 1_000_000,
            tau_soft: 0.005,
            hidden: vec![64, 64],
            cost_scale: 1e-3,
            noise_start: 0.1,
            noise_end: 0.01,
            updates_per_step: 1,
            td_mode: TdAccumulation::Absolute,
            td_decay: 1.0,
            normalize_rewards: true,
            pre_window: None,
            post_window: None,
            out_dir: "runs/default".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative session and output paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.sessions_pre, &mut cfg.sessions_post, &mut cfg.out_dir] {
            if !p.is_empty() && Path::new(p.as_str()).is_relative() {
                *p = base.join(p.as_str()).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    /// Reads the JSON copy a run leaves next to its outputs.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.episodes == 0 || self.shift_episode > self.episodes {
            return fail(format!(
                "need 0 < episodes and shift_episode ≤ episodes (got {} and {})",
                self.episodes, self.shift_episode
            ));
        }
        if self.horizon < 2 || self.m == 0 {
            return fail("T must be at least 2 and m positive".into());
        }
        if self.beta_ood_grid.is_empty() || self.seeds.is_empty() {
            return fail("beta_ood_grid and seeds must be nonempty".into());
        }
        if !(self.solar_pre_sd >= 0.0 && self.solar_post_sd >= 0.0) {
            return fail("solar standard deviations must be nonnegative".into());
        }
        if !(self.qp_tol > 0.0) || self.qp_max_iter == 0 {
            return fail("QP tolerance and iteration cap must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.td_decay) {
            return fail(format!("td_decay {} is outside [0, 1]", self.td_decay));
        }
        self.horizon_mode()?;
        self.ddpg_params().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.station().map_err(|e| Error::Config(e.to_string()))?;
        let (pre, post) = self.windows();
        for (name, (a, b)) in [("pre_window", pre), ("post_window", post)] {
            if a >= b || b > self.episodes {
                return fail(format!("{name} [{a}, {b}) is empty or exceeds {} episodes", self.episodes));
            }
        }
        Ok(())
    }

    pub fn horizon_mode(&self) -> Result<HorizonMode> {
        self.horizon_mode.parse()
    }

    pub fn station(&self) -> Result<Station> {
        Station::new(
            DynamicsSpec::constant(self.m, self.delta_hours, self.mu_eff, self.beta_ctrl),
            CostSpec::experiment(self.m, self.alpha_cost)?,
            SpaceSpec::boxed(self.m, self.soc_limit, self.rate_limit, self.action_limit),
        )
    }

    pub fn mpc_settings(&self) -> Result<MpcSettings> {
        Ok(MpcSettings {
            horizon: self.horizon_mode()?,
            solar: match self.solar_forecast {
                ForecastRule::PreMean => SolarForecast::Constant(self.solar_pre_mean),
                ForecastRule::LastObserved => SolarForecast::LastObserved,
                ForecastRule::Zero => SolarForecast::Zero,
            },
            clip: self.estimator_clip,
            state_constraints: StateConstraints::None,
            qp: AdmmSettings {
                tol: self.qp_tol,
                max_iter: self.qp_max_iter,
                ..AdmmSettings::default()
            },
            warm_start: true,
        })
    }

    pub fn ddpg_params(&self) -> DdpgParams {
        DdpgParams {
            hidden: self.hidden.clone(),
            lr_actor: self.lr,
            lr_critic: self.lr,
            batch: self.batch,
            buffer: self.buffer,
            tau_soft: self.tau_soft,
            noise_start: self.noise_start,
            noise_end: self.noise_end,
            noise_decay_steps: self.episodes * self.horizon,
            cost_scale: self.cost_scale,
            optimizer: OptimizerKind::Adam,
            updates_per_step: self.updates_per_step,
        }
    }

    /// Summary windows; by default the last quarter before the shift and
    /// the second half after it.
    pub fn windows(&self) -> ((usize, usize), (usize, usize)) {
        let (s, e) = (self.shift_episode, self.episodes);
        let pre_len = (s / 4).max(1).min(s);
        let post_len = ((e - s) / 2).max(1).min(e - s);
        let pre = self.pre_window.unwrap_or((s - pre_len, s));
        let post = self.post_window.unwrap_or((e - post_len, e));
        (pre, post)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut keyed = self.clone();
        keyed.out_dir.clear();
        let json = serde_json::to_string(&keyed).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn out_path(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }
}
