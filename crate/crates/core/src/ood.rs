//! Meta-policy that trusts the learned action only inside a ball around the
//! baseline action. The ball radius is the learned-vs-baseline gap minus
//! `β` times the TD-error accumulated so far in the episode.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::env::{project_action, Observation, Policy, PolicyView, Station};
use crate::error::{Error, Result};
use crate::model::SpaceSpec;
use crate::mpc::{MpcPlanner, MpcSettings, StateEstimator};
use crate::nn::{Agent, Learner};

/// Sensitivity of the radius to accumulated TD-error. `Infinite` always
/// returns the baseline action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta {
    Finite(f64),
    Infinite,
}

impl Beta {
    pub fn new(v: f64) -> Result<Self> {
        if v.is_infinite() && v > 0.0 {
            Ok(Self::Infinite)
        } else if v >= 0.0 {
            Ok(Self::Finite(v))
        } else {
            Err(Error::Validation(format!("β must be nonnegative, got {v}")))
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Self::Infinite)
    }

    pub fn value(self) -> f64 {
        match self {
            Self::Finite(v) => v,
            Self::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(v) => write!(f, "{v}"),
            Self::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Beta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(Self::Infinite),
            other => other
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("cannot read β value {s:?}")))
                .and_then(Self::new),
        }
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Finite(v) => s.serialize_f64(*v),
            Self::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Beta::new(v),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TdAccumulation {
    Absolute,
    Signed,
}

/// `c_{t−1} + Q(s_t, π(s_t)) − Q(s_{t−1}, a_{t−1})`.
pub fn td_error(cost_prev: f64, q_next: f64, q_prev: f64) -> f64 {
    cost_prev + q_next - q_prev
}

/// `max(0, gap − β Σ)`; zero for infinite `β`.
pub fn awareness_radius(beta: Beta, cumulative: f64, gap: f64) -> f64 {
    match beta {
        Beta::Infinite => 0.0,
        Beta::Finite(b) if b == 0.0 => gap,
        Beta::Finite(b) => (gap - b * cumulative).max(0.0),
    }
}

/// `min(1, r / gap)`, one when the actions coincide; infinite `β` always
/// reports zero trust.
pub fn trust_coefficient(beta: Beta, radius: f64, gap: f64) -> f64 {
    if beta.is_infinite() {
        0.0
    } else if gap == 0.0 {
        1.0
    } else {
        (radius / gap).min(1.0)
    }
}

/// Per-episode TD accumulator and radius.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiusState {
    pub beta: Beta,
    pub mode: TdAccumulation,
    /// Multiplies the running sum before each new term; 1 is a plain sum.
    pub decay: f64,
    pub cumulative: f64,
    pub radius: f64,
}

impl RadiusState {
    pub fn new(beta: Beta) -> Self {
        Self {
            beta,
            mode: TdAccumulation::Absolute,
            decay: 1.0,
            cumulative: 0.0,
            radius: 0.0,
        }
    }

    pub fn reset(&mut self) {
        self.cumulative = 0.0;
        self.radius = 0.0;
    }

    pub fn accumulate(&mut self, td: f64) {
        let term = match self.mode {
            TdAccumulation::Absolute => td.abs(),
            TdAccumulation::Signed => td,
        };
        self.cumulative = self.decay * self.cumulative + term;
    }

    pub fn update_radius(&mut self, gap: f64) -> f64 {
        self.radius = awareness_radius(self.beta, self.cumulative, gap);
        self.radius
    }
}

fn in_box(a: &DVector<f64>, spec: &SpaceSpec) -> bool {
    a.iter().all(|&v| v >= spec.action_lo && v <= spec.action_hi)
}

/// Euclidean projection of `a_tilde` onto the action box intersected with
/// the ball of radius `r` around `a_bar` (which must lie in the box).
pub fn project_to_ball(a_tilde: &DVector<f64>, a_bar: &DVector<f64>, r: f64, spec: &SpaceSpec) -> DVector<f64> {
    if !(r > 0.0) {
        return a_bar.clone();
    }
    // Box projection already inside the ball.
    let clamped = project_action(a_tilde, spec);
    if (&clamped - a_bar).norm() <= r {
        return clamped;
    }
    // Ball projection already inside the box.
    let diff = a_tilde - a_bar;
    let gap = diff.norm();
    let radial = a_bar + diff * (r / gap);
    if in_box(&radial, spec) {
        return radial;
    }
    // Dykstra's alternating projections converge to the projection onto the
    // intersection.
    let ball = |y: &DVector<f64>| -> DVector<f64> {
        let d = y - a_bar;
        let n = d.norm();
        if n <= r {
            y.clone()
        } else {
            a_bar + d * (r / n)
        }
    };
    let mut x = a_tilde.clone();
    let mut p = DVector::zeros(x.len());
    let mut q = DVector::zeros(x.len());
    for _ in 0..100_000 {
        let y = project_action(&(&x + &p), spec);
        p = &x + &p - &y;
        let next = ball(&(&y + &q));
        q = &y + &q - &next;
        let change = (&next - &x).norm();
        x = next;
        if change <= 1e-13 && (&y - &x).norm() <= 1e-10 {
            break;
        }
    }
    // Settle exactly into both sets.
    let x = project_action(&x, spec);
    let d = &x - a_bar;
    let n = d.norm();
    if n > r {
        a_bar + d * (r / n)
    } else {
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRecord {
    pub t: usize,
    pub a_bar: DVector<f64>,
    pub a_tilde: DVector<f64>,
    pub action: DVector<f64>,
    pub gap: f64,
    pub radius: f64,
    pub lambda: f64,
    pub td: f64,
    pub cumulative: f64,
}

pub fn write_trust_log<'a, W: Write>(
    writer: &mut csv::Writer<W>,
    episode: usize,
    records: impl IntoIterator<Item = &'a TrustRecord>,
) -> Result<()> {
    for r in records {
        writer.write_record([
            episode.to_string(),
            r.t.to_string(),
            r.gap.to_string(),
            r.radius.to_string(),
            r.lambda.to_string(),
            r.td.abs().to_string(),
            r.cumulative.to_string(),
        ])?;
    }
    Ok(())
}

pub const TRUST_LOG_HEADER: [&str; 7] = ["episode", "t", "gap", "radius", "lambda", "td_abs", "cum_td"];

/// One decision of the meta-policy given the two candidate actions.
pub fn ood_step(
    radius: &mut RadiusState,
    t: usize,
    a_bar: &DVector<f64>,
    a_tilde: &DVector<f64>,
    td: f64,
    spec: &SpaceSpec,
) -> (DVector<f64>, TrustRecord) {
    radius.accumulate(td);
    let gap = (a_tilde - a_bar).norm();
    let r = radius.update_radius(gap);
    let action = project_to_ball(a_tilde, a_bar, r, spec);
    let record = TrustRecord {
        t,
        a_bar: a_bar.clone(),
        a_tilde: a_tilde.clone(),
        action: action.clone(),
        gap,
        radius: r,
        lambda: trust_coefficient(radius.beta, r, gap),
        td,
        cumulative: radius.cumulative,
    };
    (action, record)
}

/// Baseline planner, learner, and radius state combined into one policy.
#[derive(Debug, Clone)]
pub struct OodPolicy {
    pub station: Station,
    pub estimator: StateEstimator,
    pub planner: MpcPlanner,
    pub agent: Agent,
    pub radius: RadiusState,
    /// Trust records of the current episode.
    pub records: Vec<TrustRecord>,
    current: Option<(DVector<f64>, usize)>,
}

impl OodPolicy {
    pub fn new(station: Station, mpc: MpcSettings, learner: Learner, beta: Beta) -> Self {
        Self {
            estimator: StateEstimator::new(station.m(), mpc.clip),
            planner: MpcPlanner::new(mpc),
            station,
            agent: Agent::new(learner),
            radius: RadiusState::new(beta),
            records: Vec::new(),
            current: None,
        }
    }
}

impl Policy for OodPolicy {
    fn reset(&mut self) {
        self.estimator.reset();
        self.planner.reset();
        self.agent.reset_episode();
        self.radius.reset();
        self.records.clear();
        self.current = None;
    }

    fn act(&mut self, view: &PolicyView<'_>) -> Result<DVector<f64>> {
        let s = self.estimator.observe(&self.station, view).clone();
        self.agent.observe(&s, view.t)?;
        let a_bar = self.planner.plan(&self.station, &s, view)?.action;
        let a_tilde = self.agent.learner.explore(&s, view.t)?;
        let td = match self.agent.previous() {
            Some((ps, pt, pa, pc)) if pt + 1 == view.t => self.agent.learner.td_error(&s, view.t, ps, pa, pc)?,
            _ => 0.0,
        };
        let (action, record) = ood_step(&mut self.radius, view.t, &a_bar, &a_tilde, td, &self.station.space);
        self.records.push(record);
        self.current = Some((s, view.t));
        Ok(action)
    }

    fn feedback(&mut self, applied: &DVector<f64>, _observed: &Observation, cost: f64, done: bool) {
        self.estimator.record_action(applied);
        if let Some((s, t)) = self.current.take() {
            self.agent.record(&s, t, applied, cost, done);
        }
    }
}
