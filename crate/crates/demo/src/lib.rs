//! Browser front end for a few toolkit operations. Each operation has a
//! plain Rust form returning JSON and a thin `wasm_bindgen` wrapper.

use nalgebra::DVector;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use ood_charging::config::ExperimentConfig;
use ood_charging::env::{run_episode, SolarModel};
use ood_charging::model::SpaceSpec;
use ood_charging::mpc::MpcPolicy;
use ood_charging::ood::{awareness_radius, project_to_ball, trust_coefficient, Beta};
use ood_charging::rng::{stream, stream_rng};
use ood_charging::session::{generate_sessions, GeneratorParams, Profile};

#[derive(Serialize)]
pub struct Episode {
    pub sessions: usize,
    pub total_cost: f64,
    pub soc: Vec<Vec<f64>>,
    pub rates: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
    pub solar: Vec<f64>,
}

/// One MPC episode on generated sessions. Per-charger series are indexed
/// `[charger][t]`.
pub fn mpc_episode(post_shift: bool, seed: u64) -> Result<Episode, String> {
    let cfg = ExperimentConfig::default();
    let station = cfg.station().map_err(|e| e.to_string())?;
    let settings = cfg.mpc_settings().map_err(|e| e.to_string())?;
    let profile = if post_shift { Profile::Post } else { Profile::Pre };
    let params = GeneratorParams::new(profile, cfg.sessions_count, cfg.m, cfg.horizon, seed);
    let (sessions, _) = generate_sessions(&params).map_err(|e| e.to_string())?;
    let solar = if post_shift {
        SolarModel::new(cfg.solar_post_mean, cfg.solar_post_sd)
    } else {
        SolarModel::new(cfg.solar_pre_mean, cfg.solar_pre_sd)
    }
    .map_err(|e| e.to_string())?;

    let mut policy = MpcPolicy::new(station.clone(), settings);
    let mut rng = stream_rng(cfg.master_seed, seed, stream::SOLAR, 0);
    let traj = run_episode(&station, &sessions, &solar, &mut policy, &mut rng).map_err(|e| e.to_string())?;

    let m = cfg.m;
    let column = |rows: &[DVector<f64>], off: usize| -> Vec<Vec<f64>> {
        (0..m).map(|i| rows.iter().map(|v| v[off + i]).collect()).collect()
    };
    Ok(Episode {
        sessions: sessions.len(),
        total_cost: traj.total_cost(),
        soc: column(&traj.states, 0),
        rates: column(&traj.states, m),
        actions: column(&traj.actions, 0),
        costs: traj.costs.clone(),
        solar: traj.observations.iter().map(|o| o.solar).collect(),
    })
}

#[derive(Serialize)]
pub struct Projection {
    pub action: [f64; 2],
    pub gap: f64,
    pub lambda: f64,
}

/// Projects a 2-D learned action onto the ball of radius `radius` around the
/// baseline action, intersected with the action box `[-limit, limit]²`.
pub fn project(a_bar: [f64; 2], a_tilde: [f64; 2], radius: f64, limit: f64) -> Result<Projection, String> {
    if !(radius >= 0.0 && limit > 0.0) {
        return Err("radius must be non-negative and limit positive".into());
    }
    let space = SpaceSpec::boxed(2, 100.0, 6.6, limit);
    let bar = DVector::from_row_slice(&a_bar);
    let tilde = DVector::from_row_slice(&a_tilde);
    let a = project_to_ball(&tilde, &bar, radius, &space);
    let gap = (&tilde - &bar).norm();
    Ok(Projection {
        action: [a[0], a[1]],
        gap,
        lambda: trust_coefficient(Beta::Finite(1.0), radius, gap),
    })
}

#[derive(Serialize)]
pub struct TrustPoint {
    pub beta: f64,
    pub radius: f64,
    pub lambda: f64,
}

/// Radius and trust coefficient on a log grid of `β` for a fixed action
/// gap and accumulated TD error. The last point is `β = ∞`.
pub fn trust_curve(gap: f64, cumulative_td: f64, points: usize) -> Result<Vec<TrustPoint>, String> {
    if !(gap >= 0.0 && cumulative_td >= 0.0) || points < 2 {
        return Err("gap and TD must be non-negative, with at least two points".into());
    }
    let mut out: Vec<TrustPoint> = (0..points)
        .map(|k| {
            let beta = 10f64.powf(-3.0 + 5.0 * k as f64 / (points - 1) as f64);
            let b = Beta::Finite(beta);
            let radius = awareness_radius(b, cumulative_td, gap);
            TrustPoint {
                beta,
                radius,
                lambda: trust_coefficient(b, radius, gap),
            }
        })
        .collect();
    out.push(TrustPoint {
        beta: f64::INFINITY,
        radius: 0.0,
        lambda: trust_coefficient(Beta::Infinite, 0.0, gap),
    });
    Ok(out)
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = mpcEpisode)]
pub fn mpc_episode_js(post_shift: bool, seed: u32) -> Result<String, JsError> {
    json(mpc_episode(post_shift, seed as u64))
}

#[wasm_bindgen(js_name = projectAction)]
pub fn project_js(bar_x: f64, bar_y: f64, tilde_x: f64, tilde_y: f64, radius: f64, limit: f64) -> Result<String, JsError> {
    json(project([bar_x, bar_y], [tilde_x, tilde_y], radius, limit))
}

#[wasm_bindgen(js_name = trustCurve)]
pub fn trust_curve_js(gap: f64, cumulative_td: f64, points: u32) -> Result<String, JsError> {
    // JSON has no infinity; the last point carries beta = null.
    json(trust_curve(gap, cumulative_td, points as usize))
}
