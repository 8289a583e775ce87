//! Receding-horizon baseline.
//!
//! The estimator rolls the dynamics forward with user-declared energies and
//! departures and the observed solar scalar. The planner condenses the
//! horizon problem over actions only: predicted departures enter as masks on
//! the demand coordinates, `s_{τ+1} = M_τ(A_τ s_τ + B_τ a_τ) + w̃_τ`, so the
//! problem stays a convex QP with the action box as its only hard constraint.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::{project_action, project_state, Announcement, Policy, PolicyView, Station};
use crate::error::{Error, Result};
use crate::model::{assemble_dynamics, SpaceMode};
use crate::qp::{solve_box_qp_with, AdmmSettings, BoxQp, LinearRow, QpStatus, WarmStart};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HorizonMode {
    /// Plan until the latest declared departure of an arrived session.
    Departures,
    Fixed(usize),
}

impl std::str::FromStr for HorizonMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "departures" => Ok(Self::Departures),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|k| k.parse().ok())
                .filter(|&k: &usize| k > 0)
                .map(Self::Fixed)
                .ok_or_else(|| Error::Config(format!("unknown horizon mode {s:?}; use departures or fixed:K"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolarForecast {
    Constant(f64),
    LastObserved,
    Zero,
}

/// How the estimator treats the state-space projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorClip {
    /// Departure resets followed by projection onto the state space.
    Project,
    /// Departure resets only; the estimate is affine between resets.
    ResetsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateConstraints {
    None,
    /// Predicted states must stay inside the state space.
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSettings {
    pub horizon: HorizonMode,
    pub solar: SolarForecast,
    pub clip: EstimatorClip,
    pub state_constraints: StateConstraints,
    pub qp: AdmmSettings,
    pub warm_start: bool,
}

impl Default for MpcSettings {
    fn default() -> Self {
        Self {
            horizon: HorizonMode::Departures,
            solar: SolarForecast::Zero,
            clip: EstimatorClip::Project,
            state_constraints: StateConstraints::None,
            qp: AdmmSettings::default(),
            warm_start: true,
        }
    }
}

/// Predicted perturbations and departure masks over `[t, t + k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub t: usize,
    /// Episode length `T`; the horizon ends at `t + k ≤ T − 1`.
    pub episode_len: usize,
    /// `w̃_τ`, added after the mask.
    pub w: Vec<DVector<f64>>,
    /// Demand coordinates zeroed in `s_{τ+1}`.
    pub reset: Vec<Vec<bool>>,
}

impl PredictionSet {
    pub fn horizon(&self) -> usize {
        self.w.len()
    }

    pub fn end(&self) -> usize {
        self.t + self.horizon()
    }

    /// Predictions from declared sessions: no unannounced arrivals, solar
    /// constant at `solar`, and demand cleared once the declared departure
    /// has passed.
    pub fn from_announcements(
        station: &Station,
        t: usize,
        episode_len: usize,
        k: usize,
        announced: &[Announcement],
        solar: f64,
    ) -> Self {
        let m = station.m();
        let t_end = (t + k).min(episode_len.saturating_sub(1)).max(t);
        let steps = t_end - t;
        let dh = station.dynamics.delta * solar;
        let w = (0..steps)
            .map(|_| DVector::from_fn(2 * m, |i, _| if i < m { 0.0 } else { -dh }))
            .collect();
        let reset = (t..t_end)
            .map(|tau| predicted_idle(m, announced, tau + 1))
            .collect();
        Self {
            t,
            episode_len,
            w,
            reset,
        }
    }
}

fn predicted_idle(m: usize, announced: &[Announcement], step: usize) -> Vec<bool> {
    let mut idle = vec![true; m];
    for a in announced {
        if a.predicted_active_at(step) {
            idle[a.charger] = false;
        }
    }
    idle
}

/// Horizon length `k` at step `t`.
pub fn horizon_length(mode: HorizonMode, t: usize, announced: &[Announcement]) -> usize {
    match mode {
        HorizonMode::Fixed(k) => k,
        HorizonMode::Departures => announced
            .iter()
            .map(|a| a.user_departure_step().saturating_sub(t))
            .max()
            .unwrap_or(0)
            .max(1),
    }
}

/// One estimator step `s̃_t = g̃(A s̃_{t−1} + B a_{t−1}) + w̃_{t−1}`.
pub fn estimate_state(
    station: &Station,
    t_prev: usize,
    prev: &DVector<f64>,
    applied: &DVector<f64>,
    w: &DVector<f64>,
    reset: &[bool],
    clip: EstimatorClip,
) -> DVector<f64> {
    let m = station.m();
    let mut y = station.dynamics.apply_a(t_prev, prev) + station.dynamics.apply_b(t_prev, applied);
    for i in 0..m {
        if reset[i] {
            y[i] = 0.0;
        }
    }
    y += w;
    match clip {
        EstimatorClip::Project => project_state(&y, &station.space, &vec![false; m]),
        EstimatorClip::ResetsOnly => y,
    }
}

/// Estimated perturbation of the last transition and its reset mask, from
/// the observed solar scalar, observed departures, and declared sessions.
pub fn observed_perturbation(
    station: &Station,
    t: usize,
    observed_departed: &[bool],
    solar: f64,
    announced: &[Announcement],
) -> (DVector<f64>, Vec<bool>) {
    let m = station.m();
    let dh = station.dynamics.delta * solar;
    let mut w = DVector::from_fn(2 * m, |i, _| if i < m { 0.0 } else { -dh });
    for a in announced {
        if a.arrival_step() == t {
            w[a.charger] += a.user_energy;
        }
    }
    let mut reset = predicted_idle(m, announced, t);
    for (r, &d) in reset.iter_mut().zip(observed_departed) {
        *r |= d;
    }
    (w, reset)
}

/// Estimator state carried across one episode.
#[derive(Debug, Clone)]
pub struct StateEstimator {
    pub clip: EstimatorClip,
    estimate: DVector<f64>,
    last_action: DVector<f64>,
    t: usize,
}

impl StateEstimator {
    pub fn new(m: usize, clip: EstimatorClip) -> Self {
        Self {
            clip,
            estimate: DVector::zeros(2 * m),
            last_action: DVector::zeros(m),
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.estimate.fill(0.0);
        self.last_action.fill(0.0);
        self.t = 0;
    }

    pub fn estimate(&self) -> &DVector<f64> {
        &self.estimate
    }

    /// Brings the estimate to `view.t`. Episodes start from the idle state.
    pub fn observe(&mut self, station: &Station, view: &PolicyView<'_>) -> &DVector<f64> {
        if view.t == 0 {
            self.reset();
        } else if view.t == self.t + 1 {
            if let Some(obs) = view.last {
                let (w, reset) = observed_perturbation(station, view.t, &obs.departed, obs.solar, view.announced);
                self.estimate = estimate_state(
                    station,
                    self.t,
                    &self.estimate,
                    &self.last_action,
                    &w,
                    &reset,
                    self.clip,
                );
                self.t = view.t;
            }
        }
        &self.estimate
    }

    /// Records the action the environment applied at the current step.
    pub fn record_action(&mut self, applied: &DVector<f64>) {
        self.last_action.copy_from(applied);
    }
}

/// Condensed horizon problem over the stacked actions `(a_t, …, a_{t'−1})`.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub qp: BoxQp,
    pub t: usize,
    pub steps: usize,
    /// Objective terms that do not depend on the actions.
    pub constant: f64,
    /// Free response `d_j` of the predicted states (actions zero).
    pub free_states: Vec<DVector<f64>>,
    /// `E_j` with `s_{t+j} = E_j x + d_j`.
    pub sensitivities: Vec<DMatrix<f64>>,
}

impl MpcProblem {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.qp.objective(x) + self.constant
    }

    pub fn predicted_states(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        self.sensitivities
            .iter()
            .zip(&self.free_states)
            .map(|(e, d)| e * x + d)
            .collect()
    }
}

pub fn build_mpc_problem(
    station: &Station,
    s0: &DVector<f64>,
    preds: &PredictionSet,
    state_constraints: StateConstraints,
) -> Result<MpcProblem> {
    let steps = preds.horizon();
    if steps == 0 {
        return Err(Error::Validation("MPC horizon must be at least one step".into()));
    }
    let m = station.m();
    let n = 2 * m;
    if s0.len() != n || preds.reset.len() != steps || preds.w.iter().any(|w| w.len() != n) {
        return Err(Error::Dimension(format!("MPC inputs do not match a {n}-dimensional state")));
    }
    let t = preds.t;
    let t_end = preds.end();
    let costs = &station.costs;
    let terminal = if t_end + 1 >= preds.episode_len {
        costs.q_at(t_end).clone()
    } else {
        costs.p_term.clone()
    };
    let weight = |j: usize| if j == steps { &terminal } else { costs.q_at(t + j) };

    let mut abar = Vec::with_capacity(steps);
    let mut bbar = Vec::with_capacity(steps);
    for (j, reset) in preds.reset.iter().enumerate() {
        let (mut a, mut b) = assemble_dynamics(&station.dynamics, t + j);
        for (i, &r) in reset.iter().enumerate() {
            if r {
                a.row_mut(i).fill(0.0);
                b.row_mut(i).fill(0.0);
            }
        }
        abar.push(a);
        bbar.push(b);
    }

    let mut free = Vec::with_capacity(steps + 1);
    free.push(s0.clone());
    for j in 0..steps {
        let next = &abar[j] * &free[j] + &preds.w[j];
        free.push(next);
    }
    let mut constant = 0.5 * s0.dot(&(costs.q_at(t) * s0));
    for j in 1..=steps {
        constant += 0.5 * free[j].dot(&(weight(j) * &free[j]));
    }

    let d = steps * m;
    let mut g = DVector::zeros(d);
    let mut mu = weight(steps) * &free[steps];
    for j in (0..steps).rev() {
        g.rows_mut(j * m, m).copy_from(&(bbar[j].transpose() * &mu));
        if j > 0 {
            mu = weight(j) * &free[j] + abar[j].transpose() * &mu;
        }
    }

    let mut h = DMatrix::zeros(d, d);
    let mut sens = vec![DMatrix::zeros(n, d); steps + 1];
    for l in 0..steps {
        let mut resp = Vec::with_capacity(steps - l);
        resp.push(bbar[l].clone());
        for j in l + 1..steps {
            let next = &abar[j] * &resp[j - l - 1];
            resp.push(next);
        }
        for (off, r) in resp.iter().enumerate() {
            sens[l + 1 + off].view_mut((0, l * m), (n, m)).copy_from(r);
        }
        let mut lam = weight(steps) * &resp[steps - l - 1];
        for i in (l..steps).rev() {
            let block = bbar[i].transpose() * &lam;
            h.view_mut((i * m, l * m), (m, m)).copy_from(&block);
            if i != l {
                h.view_mut((l * m, i * m), (m, m)).copy_from(&block.transpose());
            }
            if i > l {
                lam = weight(i) * &resp[i - l - 1] + abar[i].transpose() * &lam;
            }
        }
        let r = costs.r_at(t + l);
        let mut diag = h.view_mut((l * m, l * m), (m, m));
        diag += r;
    }
    // Exact symmetry for the factorization.
    let h = (&h + h.transpose()) * 0.5;

    let space = &station.space;
    let lo = DVector::from_element(d, space.action_lo);
    let hi = DVector::from_element(d, space.action_hi);
    let mut qp = BoxQp::bounded(h, g, lo, hi);
    if state_constraints == StateConstraints::Hard {
        qp.rows = state_rows(station, &sens, &free)?;
    }
    Ok(MpcProblem {
        qp,
        t,
        steps,
        constant,
        free_states: free,
        sensitivities: sens,
    })
}

fn state_rows(station: &Station, sens: &[DMatrix<f64>], free: &[DVector<f64>]) -> Result<Vec<LinearRow>> {
    let space = &station.space;
    let m = station.m();
    let mut rows = Vec::new();
    let mut push = |coeffs: Vec<(usize, f64)>, offset: f64, lo: f64, hi: f64, j: usize| -> Result<()> {
        if coeffs.is_empty() {
            if offset < lo - 1e-9 || offset > hi + 1e-9 {
                return Err(Error::Infeasible(format!("predicted state at offset {j} leaves the state space")));
            }
            return Ok(());
        }
        rows.push(LinearRow {
            coeffs,
            lo: lo - offset,
            hi: hi - offset,
        });
        Ok(())
    };
    let coeffs_of = |e: &DMatrix<f64>, i: usize| -> Vec<(usize, f64)> {
        e.row(i)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(k, &v)| (k, v))
            .collect()
    };
    for j in 1..sens.len() {
        let e = &sens[j];
        match space.mode {
            SpaceMode::Box => {
                for i in 0..2 * m {
                    push(coeffs_of(e, i), free[j][i], space.state_lo[i], space.state_hi[i], j)?;
                }
            }
            SpaceMode::NonnegSimplex => {
                for i in 0..m {
                    push(coeffs_of(e, i), free[j][i], 0.0, f64::INFINITY, j)?;
                    push(coeffs_of(e, m + i), free[j][m + i], 0.0, space.rate_limit, j)?;
                }
                let mut total = vec![0.0; e.ncols()];
                for i in m..2 * m {
                    for (k, v) in e.row(i).iter().enumerate() {
                        total[k] += v;
                    }
                }
                let coeffs = total.into_iter().enumerate().filter(|(_, v)| *v != 0.0).collect();
                let offset = (m..2 * m).map(|i| free[j][i]).sum();
                push(coeffs, offset, f64::NEG_INFINITY, space.line_limit, j)?;
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcDecision {
    /// First planned action after clamping to the action box.
    pub action: DVector<f64>,
    pub horizon: usize,
    pub iterations: usize,
    /// Horizon objective including the constant terms.
    pub objective: f64,
    pub status: QpStatus,
}

/// Solves the horizon problem and commits its first action. A zero-step
/// horizon (at `t = T − 1`) returns the zero action.
pub fn mpc_action(
    station: &Station,
    s0: &DVector<f64>,
    preds: &PredictionSet,
    settings: &MpcSettings,
    warm: Option<&WarmStart>,
) -> Result<(MpcDecision, Option<WarmStart>)> {
    let m = station.m();
    if preds.horizon() == 0 {
        let zero = DVector::zeros(m);
        let objective = station.costs.stage_cost(preds.t, s0, &zero);
        return Ok((
            MpcDecision {
                action: project_action(&zero, &station.space),
                horizon: 0,
                iterations: 0,
                objective,
                status: QpStatus::Solved,
            },
            None,
        ));
    }
    let problem = build_mpc_problem(station, s0, preds, settings.state_constraints)?;
    let sol = solve_box_qp_with(&problem.qp, &settings.qp, warm).map_err(|e| Error::Solver {
        step: preds.t,
        msg: e.to_string(),
    })?;
    let first = sol.x.rows(0, m).into_owned();
    Ok((
        MpcDecision {
            action: project_action(&first, &station.space),
            horizon: problem.steps,
            iterations: sol.iterations,
            objective: problem.objective(&sol.x),
            status: sol.status,
        },
        Some(WarmStart { x: sol.x, y: sol.y }),
    ))
}

/// Shifts a previous solution one step forward to match a new problem size.
pub fn shift_warm_start(prev: &WarmStart, m: usize, d: usize, rows: usize) -> WarmStart {
    let prev_d = prev.x.len();
    let shift = |v: &DVector<f64>, len: usize| -> DVector<f64> {
        DVector::from_fn(d, |i, _| {
            let src = i + m;
            if src < len {
                v[src]
            } else if len >= m {
                v[len - m + (i % m)]
            } else {
                0.0
            }
        })
    };
    let x = shift(&prev.x, prev_d);
    let y_bounds = shift(&prev.y.rows(0, prev_d.min(prev.y.len())).into_owned(), prev_d);
    let mut y = DVector::zeros(d + rows);
    y.rows_mut(0, d).copy_from(&y_bounds);
    WarmStart { x, y }
}

/// Planner state carried between steps: only the warm-start cache.
#[derive(Debug, Clone)]
pub struct MpcPlanner {
    pub settings: MpcSettings,
    warm: Option<WarmStart>,
}

impl MpcPlanner {
    pub fn new(settings: MpcSettings) -> Self {
        Self { settings, warm: None }
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn solar_forecast(&self, last_solar: Option<f64>) -> f64 {
        match self.settings.solar {
            SolarForecast::Constant(v) => v,
            SolarForecast::LastObserved => last_solar.unwrap_or(0.0),
            SolarForecast::Zero => 0.0,
        }
    }

    pub fn plan(&mut self, station: &Station, estimate: &DVector<f64>, view: &PolicyView<'_>) -> Result<MpcDecision> {
        let k = horizon_length(self.settings.horizon, view.t, view.announced);
        let solar = self.solar_forecast(view.last.map(|o| o.solar));
        let preds = PredictionSet::from_announcements(station, view.t, view.horizon, k, view.announced, solar);
        let m = station.m();
        let warm = match (&self.warm, self.settings.warm_start) {
            (Some(prev), true) if preds.horizon() > 0 => {
                let rows = if self.settings.state_constraints == StateConstraints::Hard {
                    // Row counts vary with the masks; the row multipliers restart at zero.
                    build_mpc_problem(station, estimate, &preds, StateConstraints::Hard)?.qp.rows.len()
                } else {
                    0
                };
                Some(shift_warm_start(prev, m, preds.horizon() * m, rows))
            }
            _ => None,
        };
        let (decision, next) = mpc_action(station, estimate, &preds, &self.settings, warm.as_ref())?;
        self.warm = next;
        Ok(decision)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcLogRow {
    pub t: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub objective: f64,
    pub action: DVector<f64>,
}

pub fn write_mpc_log<W: Write>(rows: &[MpcLogRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let m = rows.first().map_or(0, |r| r.action.len());
    let mut header: Vec<String> = ["t", "horizon", "iters", "obj"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=m).map(|i| format!("action_{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.t.to_string(),
            r.horizon.to_string(),
            r.iterations.to_string(),
            r.objective.to_string(),
        ];
        rec.extend(r.action.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// The baseline as a [`Policy`].
#[derive(Debug, Clone)]
pub struct MpcPolicy {
    pub station: Station,
    pub estimator: StateEstimator,
    pub planner: MpcPlanner,
    pub log: Option<Vec<MpcLogRow>>,
}

impl MpcPolicy {
    pub fn new(station: Station, settings: MpcSettings) -> Self {
        let estimator = StateEstimator::new(station.m(), settings.clip);
        Self {
            station,
            estimator,
            planner: MpcPlanner::new(settings),
            log: None,
        }
    }

    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }
}

impl Policy for MpcPolicy {
    fn reset(&mut self) {
        self.estimator.reset();
        self.planner.reset();
        if let Some(log) = &mut self.log {
            log.clear();
        }
    }

    fn act(&mut self, view: &PolicyView<'_>) -> Result<DVector<f64>> {
        let estimate = self.estimator.observe(&self.station, view).clone();
        let decision = self.planner.plan(&self.station, &estimate, view)?;
        if let Some(log) = &mut self.log {
            log.push(MpcLogRow {
                t: view.t,
                horizon: decision.horizon,
                iterations: decision.iterations,
                objective: decision.objective,
                action: decision.action.clone(),
            });
        }
        Ok(decision.action)
    }

    fn feedback(&mut self, applied: &DVector<f64>, _observed: &crate::env::Observation, _cost: f64, _done: bool) {
        self.estimator.record_action(applied);
    }
}
