//! Charging MDP simulator.
//!
//! One transition computes
//! `s_{t+1} = g_S[A_t s_t + B_t g_A(a_t) + ℓ'_t − Δh'_t]`, where `g_S` zeroes
//! the demand of chargers whose session has ended (or that are idle) and then
//! projects onto the state space.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CostSpec, DynamicsSpec, SpaceMode, SpaceSpec};
use crate::session::SessionSet;

#[derive(Debug, Clone, PartialEq)]
pub struct StationState {
    /// Concatenated `(e ‖ b)`.
    pub s: DVector<f64>,
    pub t: usize,
}

impl StationState {
    pub fn idle(m: usize) -> Self {
        Self {
            s: DVector::zeros(2 * m),
            t: 0,
        }
    }

    pub fn m(&self) -> usize {
        self.s.len() / 2
    }

    pub fn soc(&self) -> &[f64] {
        &self.s.as_slice()[..self.m()]
    }

    pub fn rates(&self) -> &[f64] {
        &self.s.as_slice()[self.m()..]
    }
}

/// Gaussian solar injection `h_t = h · 1_m`, `h ~ N(mean, sd²)` truncated at six
/// standard deviations so the perturbation stays bounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolarModel {
    pub mean: f64,
    pub sd: f64,
}

impl SolarModel {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !(sd >= 0.0) || !mean.is_finite() {
            return Err(Error::Validation("solar sd must be nonnegative".into()));
        }
        Ok(Self { mean, sd })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sd == 0.0 {
            return self.mean;
        }
        let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
        self.mean + self.sd * z.clamp(-6.0, 6.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.mean.abs() + 6.0 * self.sd
    }
}

/// What a policy may see after a transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Chargers whose session ended during the transition.
    pub departed: Vec<bool>,
    /// Session index arriving at each charger during the transition.
    pub arrived: Vec<Option<usize>>,
    /// Realized solar scalar of the transition.
    pub solar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observed: Observation,
    /// `c_t(s_t, a_t)` at the pre-transition state.
    pub cost: f64,
    /// Ground truth after the transition. Diagnostics only; policies must not read it.
    pub true_state: StationState,
    /// Realized `ℓ'_t − Δh'_t`.
    pub perturbation: DVector<f64>,
    pub done: bool,
}

/// Per-transition session events derived from the session set.
#[derive(Debug, Clone, PartialEq)]
pub struct Events {
    pub arrivals: DVector<f64>,
    pub arrived: Vec<Option<usize>>,
    pub departed: Vec<bool>,
    /// Chargers whose demand is zeroed before arrivals are added.
    pub reset: Vec<bool>,
}

impl Events {
    pub fn for_transition(sessions: &SessionSet, t: usize) -> Self {
        let m = sessions.m();
        let mut arrivals = DVector::zeros(m);
        let mut arrived = vec![None; m];
        let mut departed = vec![false; m];
        for (j, s) in sessions.sessions().iter().enumerate() {
            let i = s.charger_index();
            if s.arrival_step() == t + 1 {
                arrivals[i] += s.energy;
                arrived[i] = Some(j);
            }
            if s.departure_step() == t + 1 {
                departed[i] = true;
            }
        }
        let reset = (0..m)
            .map(|i| departed[i] || sessions.active(i, t + 1).is_none())
            .collect();
        Self {
            arrivals,
            arrived,
            departed,
            reset,
        }
    }
}

/// Clamps each action coordinate to `[a_lo, a_hi]`.
pub fn project_action(a: &DVector<f64>, spec: &SpaceSpec) -> DVector<f64> {
    a.map(|x| x.clamp(spec.action_lo, spec.action_hi))
}

/// Zeroes the demand of `reset` chargers, then projects onto the state space.
pub fn project_state(s: &DVector<f64>, spec: &SpaceSpec, reset: &[bool]) -> DVector<f64> {
    let mut out = s.clone();
    for (i, &r) in reset.iter().enumerate() {
        if r {
            out[i] = 0.0;
        }
    }
    project_onto_space(&mut out, spec);
    out
}

fn project_onto_space(s: &mut DVector<f64>, spec: &SpaceSpec) {
    let m = spec.m;
    match spec.mode {
        SpaceMode::Box => {
            for i in 0..2 * m {
                s[i] = s[i].clamp(spec.state_lo[i], spec.state_hi[i]);
            }
        }
        SpaceMode::NonnegSimplex => {
            for i in 0..m {
                s[i] = s[i].max(0.0);
            }
            let b: Vec<f64> = (m..2 * m).map(|i| s[i]).collect();
            let p = project_capped_simplex(&b, spec.rate_limit, spec.line_limit);
            for (k, v) in p.into_iter().enumerate() {
                s[m + k] = v;
            }
        }
    }
}

/// Euclidean projection onto `{x : 0 ≤ x_i ≤ cap, Σ x_i ≤ budget}`.
pub fn project_capped_simplex(x: &[f64], cap: f64, budget: f64) -> Vec<f64> {
    let clipped: Vec<f64> = x.iter().map(|v| v.clamp(0.0, cap)).collect();
    if clipped.iter().sum::<f64>() <= budget {
        return clipped;
    }
    // Σ clamp(x_i − θ, 0, cap) is piecewise linear and nonincreasing in θ;
    // locate the segment containing the budget from the sorted breakpoints.
    let total = |theta: f64| -> f64 { x.iter().map(|v| (v - theta).clamp(0.0, cap)).sum() };
    let mut bps: Vec<f64> = x.iter().flat_map(|&v| [v, v - cap]).filter(|b| *b > 0.0).collect();
    bps.push(0.0);
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    let mut lo = 0.0;
    let mut f_lo = total(0.0);
    for &hi in &bps[1..] {
        let f_hi = total(hi);
        if f_hi <= budget {
            let theta = if f_lo == f_hi {
                hi
            } else {
                lo + (f_lo - budget) * (hi - lo) / (f_lo - f_hi)
            };
            return x.iter().map(|v| (v - theta).clamp(0.0, cap)).collect();
        }
        lo = hi;
        f_lo = f_hi;
    }
    vec![0.0; x.len()]
}

/// Dynamics, costs, and feasible sets of one station.
#[derive(Debug, Clone)]
pub struct Station {
    pub dynamics: DynamicsSpec,
    pub costs: CostSpec,
    pub space: SpaceSpec,
}

impl Station {
    pub fn new(dynamics: DynamicsSpec, costs: CostSpec, space: SpaceSpec) -> Result<Self> {
        dynamics.validate()?;
        space.validate()?;
        if dynamics.m != space.m || costs.q_at(0).nrows() != dynamics.n() || costs.r_at(0).nrows() != dynamics.m {
            return Err(Error::Dimension("station components disagree on charger count".into()));
        }
        Ok(Self {
            dynamics,
            costs,
            space,
        })
    }

    /// Experiment station with `m` chargers and `R = α I`.
    pub fn experiment(m: usize, alpha: f64) -> Result<Self> {
        Self::new(
            DynamicsSpec::experiment(m),
            CostSpec::experiment(m, alpha)?,
            SpaceSpec::experiment(m),
        )
    }

    pub fn m(&self) -> usize {
        self.dynamics.m
    }

    /// Unprojected update `A_t s + B_t g_A(a) − Δh'` (arrivals excluded).
    fn linear_part(&self, t: usize, s: &DVector<f64>, a_feasible: &DVector<f64>, solar: f64) -> DVector<f64> {
        let m = self.m();
        let mut y = self.dynamics.apply_a(t, s) + self.dynamics.apply_b(t, a_feasible);
        let dh = self.dynamics.delta * solar;
        for i in m..2 * m {
            y[i] -= dh;
        }
        y
    }

    /// Deterministic transition given the realized events and solar scalar.
    pub fn transition(&self, t: usize, s: &DVector<f64>, a: &DVector<f64>, events: &Events, solar: f64) -> DVector<f64> {
        let a_feasible = project_action(a, &self.space);
        let mut y = self.linear_part(t, s, &a_feasible, solar);
        for i in 0..self.m() {
            if events.reset[i] {
                y[i] = 0.0;
            }
            y[i] += events.arrivals[i];
        }
        let none = vec![false; self.m()];
        project_state(&y, &self.space, &none)
    }

    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &StationState,
        a: &DVector<f64>,
        sessions: &SessionSet,
        solar: &SolarModel,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        let horizon = sessions.horizon();
        if state.t >= horizon {
            return Err(Error::EpisodeDone(state.t));
        }
        if a.len() != self.m() {
            return Err(Error::Dimension(format!("action has {} entries, expected {}", a.len(), self.m())));
        }
        let t = state.t;
        let h = solar.sample(rng);
        let events = Events::for_transition(sessions, t);
        let cost = self.costs.stage_cost(t, &state.s, &project_action(a, &self.space));
        let next = self.transition(t, &state.s, a, &events, h);
        let m = self.m();
        let perturbation = DVector::from_fn(2 * m, |i, _| {
            if i < m {
                events.arrivals[i]
            } else {
                -self.dynamics.delta * h
            }
        });
        Ok(StepOutcome {
            observed: Observation {
                departed: events.departed.clone(),
                arrived: events.arrived.clone(),
                solar: h,
            },
            cost,
            true_state: StationState { s: next, t: t + 1 },
            perturbation,
            done: t + 1 >= horizon,
        })
    }

    /// State- and action-dependent perturbation `w_t(s, a)` with
    /// `s_{t+1} = A_t s + B_t a + w_t(s, a)`.
    ///
    /// Built coordinate-wise from the arrival, departure, and saturation
    /// indicators. Rounded to one double per coordinate; see
    /// [`Station::reparameterized_offsets`] for the exact form.
    pub fn reparameterized_perturbation(
        &self,
        t: usize,
        s: &DVector<f64>,
        a: &DVector<f64>,
        events: &Events,
        solar: f64,
    ) -> DVector<f64> {
        let (hi, lo) = self.reparameterized_offsets(t, s, a, events, solar);
        hi + lo
    }

    /// The perturbation as an unevaluated sum `hi + lo`. A single double
    /// cannot always hit the next state when it carries bits below the
    /// resolution of `A s + B a`; `(A s + B a + hi) + lo` always does.
    pub fn reparameterized_offsets(
        &self,
        t: usize,
        s: &DVector<f64>,
        a: &DVector<f64>,
        events: &Events,
        solar: f64,
    ) -> (DVector<f64>, DVector<f64>) {
        let m = self.m();
        let space = &self.space;
        let base = self.dynamics.apply_a(t, s) + self.dynamics.apply_b(t, a);
        let a_feasible = project_action(a, space);
        let raw = self.linear_part(t, s, &a_feasible, solar);
        let mut target = DVector::zeros(2 * m);
        for i in 0..m {
            let kept = if events.reset[i] { 0.0 } else { raw[i] };
            let v = kept + events.arrivals[i];
            target[i] = match space.mode {
                SpaceMode::Box => saturate(v, space.state_lo[i], space.state_hi[i]),
                SpaceMode::NonnegSimplex => if v < 0.0 { 0.0 } else { v },
            };
        }
        match space.mode {
            SpaceMode::Box => {
                for i in m..2 * m {
                    target[i] = saturate(raw[i], space.state_lo[i], space.state_hi[i]);
                }
            }
            SpaceMode::NonnegSimplex => {
                let rates: Vec<f64> = (m..2 * m).map(|i| raw[i]).collect();
                for (k, v) in project_capped_simplex(&rates, space.rate_limit, space.line_limit)
                    .into_iter()
                    .enumerate()
                {
                    target[m + k] = v;
                }
            }
        }
        let hi = DVector::from_fn(2 * m, |i, _| exact_offset(base[i], target[i]));
        let lo = DVector::from_fn(2 * m, |i, _| target[i] - (base[i] + hi[i]));
        (hi, lo)
    }

    /// Steps the reparameterized form `A s + B a + w(s, a)`.
    pub fn transition_reparameterized(
        &self,
        t: usize,
        s: &DVector<f64>,
        a: &DVector<f64>,
        events: &Events,
        solar: f64,
    ) -> DVector<f64> {
        let base = self.dynamics.apply_a(t, s) + self.dynamics.apply_b(t, a);
        let (hi, lo) = self.reparameterized_offsets(t, s, a, events, solar);
        (base + hi) + lo
    }
}

fn saturate(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

/// Offset `w` with `base + w` as close to `target` as floating point allows.
fn exact_offset(base: f64, target: f64) -> f64 {
    let mut w = target - base;
    for _ in 0..64 {
        let r = base + w;
        if r == target {
            return w;
        }
        w = if r < target { w.next_up() } else { w.next_down() };
    }
    w
}

/// Information available to a policy before it acts at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Announcement {
    pub session: usize,
    /// Zero-based charger.
    pub charger: usize,
    pub arrival: f64,
    pub user_departure: f64,
    pub user_energy: f64,
}

impl Announcement {
    pub fn arrival_step(&self) -> usize {
        self.arrival.ceil() as usize
    }

    pub fn user_departure_step(&self) -> usize {
        self.user_departure.ceil() as usize
    }

    pub fn predicted_active_at(&self, step: usize) -> bool {
        self.arrival_step() <= step && step < self.user_departure_step()
    }
}

/// User-declared information of every session that has arrived by state `t`.
pub fn announcements(sessions: &SessionSet, t: usize) -> Vec<Announcement> {
    sessions
        .sessions()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.arrival_step() <= t)
        .map(|(j, s)| Announcement {
            session: j,
            charger: s.charger_index(),
            arrival: s.arrival,
            user_departure: s.user_departure,
            user_energy: s.user_energy,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PolicyView<'a> {
    pub t: usize,
    pub horizon: usize,
    /// Observation of the previous transition (`None` at `t = 0`).
    pub last: Option<&'a Observation>,
    pub announced: &'a [Announcement],
}

/// A per-step action source that only sees observable information.
pub trait Policy {
    fn reset(&mut self);

    fn act(&mut self, view: &PolicyView<'_>) -> Result<DVector<f64>>;

    /// Called after the environment applied `applied` and charged `cost`.
    fn feedback(&mut self, _applied: &DVector<f64>, _observed: &Observation, _cost: f64, _done: bool) {}
}

/// Always outputs zero.
#[derive(Debug, Clone)]
pub struct ZeroPolicy(pub usize);

impl Policy for ZeroPolicy {
    fn reset(&mut self) {}

    fn act(&mut self, _view: &PolicyView<'_>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.0))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    /// True states `s_0 … s_T`.
    pub states: Vec<DVector<f64>>,
    /// Applied (projected) actions.
    pub actions: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
    pub observations: Vec<Observation>,
}

impl Trajectory {
    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    /// Rows `episode,t,e_1..e_m,b_1..b_m,a_1..a_m,cost,h_1..h_m`.
    pub fn write_csv<W: Write>(&self, episode: usize, with_header: bool, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let m = self.states.first().map_or(0, |s| s.len() / 2);
        if with_header {
            let mut header = vec!["episode".to_string(), "t".to_string()];
            for prefix in ["e", "b", "a"] {
                header.extend((1..=m).map(|i| format!("{prefix}_{i}")));
            }
            header.push("cost".into());
            header.extend((1..=m).map(|i| format!("h_{i}")));
            w.write_record(&header)?;
        }
        for (t, ((s, a), c)) in self.states.iter().zip(&self.actions).zip(&self.costs).enumerate() {
            let mut row = vec![episode.to_string(), t.to_string()];
            row.extend(s.iter().map(|v| v.to_string()));
            row.extend(a.iter().map(|v| v.to_string()));
            row.push(c.to_string());
            let h = self.observations[t].solar;
            row.extend(std::iter::repeat(h.to_string()).take(m));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs one episode from the idle state.
pub fn run_episode<P: Policy + ?Sized, R: Rng + ?Sized>(
    station: &Station,
    sessions: &SessionSet,
    solar: &SolarModel,
    policy: &mut P,
    rng: &mut R,
) -> Result<Trajectory> {
    let horizon = sessions.horizon();
    let mut state = StationState::idle(station.m());
    let mut traj = Trajectory {
        states: vec![state.s.clone()],
        ..Default::default()
    };
    policy.reset();
    for t in 0..horizon {
        let announced = announcements(sessions, t);
        let view = PolicyView {
            t,
            horizon,
            last: traj.observations.last(),
            announced: &announced,
        };
        let a = policy.act(&view)?;
        let outcome = station.step(&state, &a, sessions, solar, rng)?;
        let applied = project_action(&a, &station.space);
        policy.feedback(&applied, &outcome.observed, outcome.cost, outcome.done);
        traj.actions.push(applied);
        traj.costs.push(outcome.cost);
        traj.observations.push(outcome.observed);
        state = outcome.true_state;
        traj.states.push(state.s.clone());
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::ChargingSession;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn session(id: &str, arrival: f64, departure: f64, energy: f64, charger: usize) -> ChargingSession {
        ChargingSession {
            id: id.into(),
            arrival,
            departure,
            energy,
            charger,
            user_departure: departure,
            user_energy: energy,
        }
    }

    #[test]
    fn box_projection_clamps_rates() {
        let spec = SpaceSpec::experiment(2);
        let out = project_state(&v(&[10.0, 5.0, 7.0, 2.0]), &spec, &[false, false]);
        assert_eq!(out, v(&[10.0, 5.0, 6.6, 2.0]));
    }

    #[test]
    fn departure_resets_demand() {
        let spec = SpaceSpec::experiment(2);
        let out = project_state(&v(&[42.0, 5.0, 1.0, 2.0]), &spec, &[true, false]);
        assert_eq!(out, v(&[0.0, 5.0, 1.0, 2.0]));
    }

    #[test]
    fn projections_are_idempotent() {
        let spec = SpaceSpec::nonneg_simplex(3, 8.0, 5.0, 2.0);
        let once = project_state(&v(&[-1.0, 3.0, 2.0, 5.0, 5.0, 4.0]), &spec, &[false, true, false]);
        let twice = project_state(&once, &spec, &[false, true, false]);
        assert_eq!(once, twice);
        let a = project_action(&v(&[3.0, -5.0]), &SpaceSpec::experiment(2));
        assert_eq!(project_action(&a, &SpaceSpec::experiment(2)), a);
    }

    #[test]
    fn action_clamp_examples() {
        let spec = SpaceSpec::experiment(2);
        assert_eq!(project_action(&v(&[3.0, -5.0]), &spec), v(&[2.0, -2.0]));
        assert_eq!(project_action(&v(&[0.5, -1.0]), &spec), v(&[0.5, -1.0]));
        assert_eq!(project_action(&v(&[2.0001, 2.0]), &spec), v(&[2.0, 2.0]));
    }

    #[test]
    fn capped_simplex_matches_grid_search() {
        // b = (5, 5), b̄ = 6, γ = 8.
        let p = project_capped_simplex(&[5.0, 5.0], 6.0, 8.0);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let steps = 1200;
        for i in 0..=steps {
            for j in 0..=steps {
                let (x, y) = (6.0 * i as f64 / steps as f64, 6.0 * j as f64 / steps as f64);
                if x + y <= 8.0 + 1e-12 {
                    let d = (x - 5.0).powi(2) + (y - 5.0).powi(2);
                    if d < best.0 {
                        best = (d, x, y);
                    }
                }
            }
        }
        assert!((p[0] - best.1).abs() < 1e-3 && (p[1] - best.2).abs() < 1e-3, "{p:?} vs {best:?}");
        assert!((p[0] + p[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn capped_simplex_asymmetric_grid() {
        let x = [7.0, 1.5];
        let p = project_capped_simplex(&x, 5.0, 4.0);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let steps = 1000;
        for i in 0..=steps {
            for j in 0..=steps {
                let (a, b) = (5.0 * i as f64 / steps as f64, 5.0 * j as f64 / steps as f64);
                if a + b <= 4.0 + 1e-12 {
                    let d = (a - x[0]).powi(2) + (b - x[1]).powi(2);
                    if d < best.0 {
                        best = (d, a, b);
                    }
                }
            }
        }
        assert!((p[0] - best.1).abs() < 1e-3 && (p[1] - best.2).abs() < 1e-3, "{p:?} vs {best:?}");
    }

    #[test]
    fn single_step_with_experiment_parameters() {
        let station = Station::experiment(2, 0.1).unwrap();
        // Both chargers occupied through the step so demand is not reset.
        let sessions = SessionSet::new(
            vec![session("x", 0.5, 50.0, 10.0, 1), session("y", 0.5, 50.0, 5.0, 2)],
            144,
            2,
        )
        .unwrap();
        let state = StationState {
            s: v(&[10.0, 5.0, 6.0, 2.0]),
            t: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = station
            .step(&state, &v(&[0.0, 0.0]), &sessions, &SolarModel::new(0.0, 0.0).unwrap(), &mut rng)
            .unwrap();
        // Independent arithmetic: e' = e − Δμ b, b' = b.
        let k = (1.0 / 6.0) * 0.8;
        assert!((out.true_state.s[0] - (10.0 - k * 6.0)).abs() < 1e-12);
        assert!((out.true_state.s[0] - 9.2).abs() < 1e-12);
        assert!((out.true_state.s[1] - 4.733_333_333_333_333).abs() < 1e-12);
        assert_eq!(out.true_state.s[2], 6.0);
        assert_eq!(out.true_state.s[3], 2.0);
        let expected_cost = 0.5 * (100.0 + 25.0 + 36.0 + 4.0);
        assert!((out.cost - expected_cost).abs() < 1e-12);
    }

    #[test]
    fn arrival_injects_energy() {
        let station = Station::experiment(2, 0.1).unwrap();
        let sessions = SessionSet::new(vec![session("x", 3.5, 40.0, 20.0, 1)], 144, 2).unwrap();
        let state = StationState {
            s: v(&[0.0, 0.0, 1.5, 0.0]),
            t: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = station
            .step(&state, &v(&[0.0, 0.0]), &sessions, &SolarModel::new(0.0, 0.0).unwrap(), &mut rng)
            .unwrap();
        let battery_term = -(0.8 / 6.0) * 1.5;
        assert!((out.true_state.s[0] - (20.0 + battery_term)).abs() < 1e-12);
        assert_eq!(out.observed.arrived, vec![Some(0), None]);
        assert_eq!(out.true_state.s[1], 0.0);
    }

    #[test]
    fn departure_in_interval_resets() {
        let station = Station::experiment(2, 0.1).unwrap();
        let sessions = SessionSet::new(vec![session("x", 1.0, 7.5, 20.0, 2)], 144, 2).unwrap();
        let state = StationState {
            s: v(&[0.0, 12.0, 0.0, 3.0]),
            t: 7,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = station
            .step(&state, &v(&[1.0, 1.0]), &sessions, &SolarModel::new(0.0, 0.0).unwrap(), &mut rng)
            .unwrap();
        assert_eq!(out.true_state.s[1], 0.0);
        assert_eq!(out.observed.departed, vec![false, true]);
    }

    #[test]
    fn depart_then_arrive_on_one_charger() {
        let station = Station::experiment(1, 0.1).unwrap();
        let sessions = SessionSet::new(
            vec![session("old", 1.0, 7.2, 20.0, 1), session("new", 7.6, 20.0, 9.0, 1)],
            144,
            1,
        )
        .unwrap();
        let state = StationState {
            s: v(&[12.0, 0.0]),
            t: 7,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = station
            .step(&state, &v(&[0.0]), &sessions, &SolarModel::new(0.0, 0.0).unwrap(), &mut rng)
            .unwrap();
        assert_eq!(out.true_state.s[0], 9.0);
    }

    #[test]
    fn step_after_done_is_an_error() {
        let station = Station::experiment(2, 0.1).unwrap();
        let sessions = SessionSet::empty(4, 2);
        let state = StationState {
            s: DVector::zeros(4),
            t: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = station.step(&state, &v(&[0.0, 0.0]), &sessions, &SolarModel::new(0.0, 0.0).unwrap(), &mut rng);
        assert!(matches!(err, Err(Error::EpisodeDone(4))));
    }

    #[test]
    fn zero_policy_on_empty_station_costs_nothing() {
        let station = Station::experiment(2, 0.1).unwrap();
        let sessions = SessionSet::empty(20, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let traj = run_episode(
            &station,
            &sessions,
            &SolarModel::new(0.0, 0.0).unwrap(),
            &mut ZeroPolicy(2),
            &mut rng,
        )
        .unwrap();
        assert_eq!(traj.costs.len(), 20);
        assert!(traj.costs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn episodes_are_deterministic_per_seed() {
        let station = Station::experiment(2, 0.1).unwrap();
        let sessions = SessionSet::new(vec![session("x", 3.5, 40.0, 20.0, 1)], 60, 2).unwrap();
        let solar = SolarModel::new(10.0, 0.05).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            run_episode(&station, &sessions, &solar, &mut ZeroPolicy(2), &mut rng).unwrap()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn trajectory_csv_header() {
        let station = Station::experiment(2, 0.1).unwrap();
        let sessions = SessionSet::empty(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = run_episode(&station, &sessions, &SolarModel::new(0.0, 0.0).unwrap(), &mut ZeroPolicy(2), &mut rng)
            .unwrap();
        let mut buf = Vec::new();
        traj.write_csv(0, true, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("episode,t,e_1,e_2,b_1,b_2,a_1,a_2,cost,h_1,h_2\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
