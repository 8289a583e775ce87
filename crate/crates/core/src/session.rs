//! Charging sessions and the session CSV format.
//!
//! Times are fractional step indices. A session arriving at `α ∈ (t, t+1]`
//! injects its energy in the `t → t+1` transition, so it is first visible in
//! state `⌈α⌉`; it is reset in state `⌈δ⌉`.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SESSION_HEADER: [&str; 7] = [
    "id",
    "arrival",
    "departure",
    "energy_kwh",
    "charger",
    "user_departure",
    "user_energy_kwh",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargingSession {
    pub id: String,
    pub arrival: f64,
    pub departure: f64,
    #[serde(rename = "energy_kwh")]
    pub energy: f64,
    /// One-based charger index.
    pub charger: usize,
    pub user_departure: f64,
    #[serde(rename = "user_energy_kwh")]
    pub user_energy: f64,
}

impl ChargingSession {
    pub fn charger_index(&self) -> usize {
        self.charger - 1
    }

    /// First state index in which the session is present.
    pub fn arrival_step(&self) -> usize {
        self.arrival.ceil() as usize
    }

    /// State index at which the true departure resets the charger.
    pub fn departure_step(&self) -> usize {
        self.departure.ceil() as usize
    }

    /// Departure reset step according to the user's declared time.
    pub fn user_departure_step(&self) -> usize {
        self.user_departure.ceil() as usize
    }

    pub fn active_at(&self, step: usize) -> bool {
        self.arrival_step() <= step && step < self.departure_step()
    }

    pub fn predicted_active_at(&self, step: usize) -> bool {
        self.arrival_step() <= step && step < self.user_departure_step()
    }

    fn check(&self, m: usize) -> std::result::Result<(), String> {
        let finite = [
            self.arrival,
            self.departure,
            self.energy,
            self.user_departure,
            self.user_energy,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err(format!("session {}: non-finite field", self.id));
        }
        if !(self.arrival > 0.0) {
            return Err(format!("session {}: arrival must be positive", self.id));
        }
        if !(self.arrival < self.departure) {
            return Err(format!("session {}: arrival must precede departure", self.id));
        }
        if !(self.energy > 0.0) {
            return Err(format!("session {}: energy must be positive", self.id));
        }
        if !(self.user_departure > self.arrival) {
            return Err(format!("session {}: user departure must follow arrival", self.id));
        }
        if self.user_energy < 0.0 {
            return Err(format!("session {}: user energy is negative", self.id));
        }
        if self.charger == 0 || self.charger > m {
            return Err(format!(
                "session {}: charger {} outside 1..={m}",
                self.id, self.charger
            ));
        }
        Ok(())
    }
}

/// Validated, arrival-ordered collection of sessions for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSet {
    sessions: Vec<ChargingSession>,
    horizon: usize,
    m: usize,
}

impl SessionSet {
    pub fn new(mut sessions: Vec<ChargingSession>, horizon: usize, m: usize) -> Result<Self> {
        for s in &sessions {
            s.check(m).map_err(Error::Validation)?;
        }
        sessions.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then_with(|| a.id.cmp(&b.id)));
        check_exclusive(&sessions)?;
        Ok(Self {
            sessions,
            horizon,
            m,
        })
    }

    pub fn empty(horizon: usize, m: usize) -> Self {
        Self {
            sessions: Vec::new(),
            horizon,
            m,
        }
    }

    pub fn sessions(&self) -> &[ChargingSession] {
        &self.sessions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Session index active at `charger` in state `step`.
    pub fn active(&self, charger: usize, step: usize) -> Option<usize> {
        self.sessions
            .iter()
            .position(|s| s.charger_index() == charger && s.active_at(step))
    }

    /// Sessions whose energy is injected in the `t → t+1` transition.
    pub fn arrivals_in(&self, t: usize) -> impl Iterator<Item = (usize, &ChargingSession)> {
        self.sessions
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.arrival_step() == t + 1)
    }

    /// Writes the CSV form; identical sets produce identical bytes.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        w.write_record(SESSION_HEADER)?;
        for s in &self.sessions {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn check_exclusive(sessions: &[ChargingSession]) -> Result<()> {
    for (i, a) in sessions.iter().enumerate() {
        for b in &sessions[i + 1..] {
            if a.charger == b.charger && a.arrival < b.departure && b.arrival < a.departure {
                return Err(Error::Validation(format!(
                    "sessions {} and {} overlap on charger {}",
                    a.id, b.id, a.charger
                )));
            }
        }
    }
    Ok(())
}

/// Reads and validates a session file.
pub fn load_sessions(path: &Path, horizon: usize, m: usize) -> Result<SessionSet> {
    let file = std::fs::File::open(path)?;
    read_sessions(file, path, horizon, m)
}

pub fn read_sessions<R: Read>(reader: R, path: &Path, horizon: usize, m: usize) -> Result<SessionSet> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(SESSION_HEADER.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            msg: format!("expected header {}", SESSION_HEADER.join(",")),
        });
    }
    let mut sessions = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let s: ChargingSession = record.deserialize(Some(&header)).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row,
            msg: e.to_string(),
        })?;
        s.check(m)
            .map_err(|msg| Error::Validation(format!("{}: row {row}: {msg}", path.display())))?;
        sessions.push(s);
    }
    SessionSet::new(sessions, horizon, m)
}

/// Arrival/duration/energy profile of the fixture generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Morning-peaked arrivals and long workday stays.
    Pre,
    /// Flattened arrivals over the day and shorter stays.
    Post,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Profile::Pre),
            "post" => Ok(Profile::Post),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub profile: Profile,
    /// Number of candidate sessions drawn before the omission rule.
    pub count: usize,
    pub m: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Steps per hour; 6 for ten-minute steps.
    pub steps_per_hour: f64,
    /// Standard deviation of the declared departure error, in hours.
    pub departure_error_hours: f64,
    /// Standard deviation of the declared energy error, as a fraction of the true energy.
    pub energy_error_frac: f64,
}

impl GeneratorParams {
    pub fn new(profile: Profile, count: usize, m: usize, horizon: usize, seed: u64) -> Self {
        Self {
            profile,
            count,
            m,
            horizon,
            seed,
            steps_per_hour: 6.0,
            departure_error_hours: 1.0,
            energy_error_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorLog {
    pub drawn: usize,
    pub kept: usize,
    pub omitted: usize,
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Draws synthetic sessions and assigns each to the lowest-index free
/// charger; a session is omitted when every charger is occupied.
pub fn generate_sessions(p: &GeneratorParams) -> Result<(SessionSet, GeneratorLog)> {
    if p.m == 0 || p.horizon < 4 {
        return Err(Error::Config("generator needs m ≥ 1 and horizon ≥ 4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let h = p.steps_per_hour;
    let t_max = p.horizon as f64;
    let normal = |mean: f64, sd: f64| Normal::new(mean, sd).expect("finite sd");

    let mut drawn: Vec<(f64, f64, f64)> = (0..p.count)
        .map(|_| {
            let (arrival, stay, energy) = match p.profile {
                Profile::Pre => (
                    normal(8.0 * h, 1.0 * h).sample(&mut rng),
                    normal(9.0 * h, 2.0 * h).sample(&mut rng),
                    normal(14.0, 5.0).sample(&mut rng),
                ),
                Profile::Post => (
                    rng.gen_range(6.0 * h..20.0 * h),
                    normal(4.0 * h, 2.0 * h).sample(&mut rng),
                    normal(9.0, 4.0).sample(&mut rng),
                ),
            };
            let arrival = round3(arrival.clamp(1.0, t_max - 2.0));
            let stay = stay.max(0.5 * h);
            let departure = round3((arrival + stay).min(t_max + 12.0 * h));
            let energy = round3(energy.clamp(1.5, 40.0));
            (arrival, departure, energy)
        })
        .collect();
    drawn.sort_by(|a, b| a.0.total_cmp(&b.0));

    let dep_noise = normal(0.0, p.departure_error_hours.max(0.0) * h + 1e-300);
    let mut busy_until = vec![f64::NEG_INFINITY; p.m];
    let mut sessions = Vec::new();
    let mut omitted = 0;
    for (arrival, departure, energy) in drawn {
        let e_noise = normal(0.0, p.energy_error_frac.max(0.0) * energy + 1e-300);
        let user_departure = round3((departure + dep_noise.sample(&mut rng)).max(arrival + 0.5));
        let user_energy = round3((energy + e_noise.sample(&mut rng)).max(0.1));
        match busy_until.iter().position(|&b| b <= arrival) {
            Some(i) => {
                busy_until[i] = departure;
                sessions.push(ChargingSession {
                    id: format!("{}-{:03}", profile_tag(p.profile), sessions.len() + 1),
                    arrival,
                    departure,
                    energy,
                    charger: i + 1,
                    user_departure,
                    user_energy,
                });
            }
            None => omitted += 1,
        }
    }
    let log = GeneratorLog {
        drawn: p.count,
        kept: sessions.len(),
        omitted,
    };
    Ok((SessionSet::new(sessions, p.horizon, p.m)?, log))
}

fn profile_tag(p: Profile) -> &'static str {
    match p {
        Profile::Pre => "pre",
        Profile::Post => "post",
    }
}
