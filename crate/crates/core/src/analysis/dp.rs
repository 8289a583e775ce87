use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Finite-horizon tabular MDP with time-invariant transitions and
/// time-indexed costs.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMdp {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `costs[t]` is `states × actions`.
    pub costs: Vec<DMatrix<f64>>,
}

const MAX_PAIRS: usize = 10_000;

impl ToyMdp {
    pub fn validate(&self) -> Result<()> {
        if self.states * self.actions > MAX_PAIRS {
            return Err(Error::Validation(format!(
                "{} state-action pairs exceed the exact-DP limit of {MAX_PAIRS}",
                self.states * self.actions
            )));
        }
        if self.costs.len() != self.horizon || self.transitions.len() != self.states {
            return Err(Error::Dimension("cost or transition table has the wrong length".into()));
        }
        for c in &self.costs {
            if c.shape() != (self.states, self.actions) || c.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Validation("costs must be nonnegative states × actions tables".into()));
            }
        }
        for (s, row) in self.transitions.iter().enumerate() {
            if row.len() != self.actions {
                return Err(Error::Dimension(format!("state {s} has {} action rows", row.len())));
            }
            for (a, p) in row.iter().enumerate() {
                let total: f64 = p.iter().sum();
                if p.len() != self.states || p.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Validation(format!("transition row ({s}, {a}) is not a distribution")));
                }
            }
        }
        Ok(())
    }

    /// One Bellman backup `c_t + P min_a' Q_next`.
    fn backup(&self, t: usize, next: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let v: Vec<f64> = match next {
            Some(q) => (0..self.states).map(|s| q.row(s).min()).collect(),
            None => vec![0.0; self.states],
        };
        DMatrix::from_fn(self.states, self.actions, |s, a| {
            let future: f64 = self.transitions[s][a].iter().zip(&v).map(|(p, v)| p * v).sum();
            self.costs[t][(s, a)] + future
        })
    }

    /// Optimal cost-to-go `Q*_t` for every step by backward induction.
    pub fn q_star(&self) -> Result<Vec<DMatrix<f64>>> {
        self.validate()?;
        let mut q: Vec<DMatrix<f64>> = vec![DMatrix::zeros(self.states, self.actions); self.horizon];
        for t in (0..self.horizon).rev() {
            let next = if t + 1 < self.horizon { Some(q[t + 1].clone()) } else { None };
            q[t] = self.backup(t, next.as_ref());
        }
        Ok(q)
    }

    /// Repeated Bellman sweeps over all steps until nothing changes.
    pub fn value_iteration(&self) -> Result<(Vec<DMatrix<f64>>, usize)> {
        self.validate()?;
        let mut q: Vec<DMatrix<f64>> = vec![DMatrix::zeros(self.states, self.actions); self.horizon];
        for sweep in 1..=self.horizon + 1 {
            let mut changed = false;
            for t in 0..self.horizon {
                let next = if t + 1 < self.horizon { Some(&q[t + 1]) } else { None };
                let updated = self.backup(t, next);
                if updated != q[t] {
                    changed = true;
                    q[t] = updated;
                }
            }
            if !changed {
                return Ok((q, sweep));
            }
        }
        Ok((q, self.horizon + 1))
    }
}

/// `(1/T) Σ_t max_{s,a} |Q̃_t(s, a) − Q*_t(s, a)|`.
pub fn q_error_epsilon<F: Fn(usize, usize, usize) -> f64>(q_tilde: F, mdp: &ToyMdp) -> Result<f64> {
    let q = mdp.q_star()?;
    let mut total = 0.0;
    for (t, qt) in q.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for s in 0..mdp.states {
            for a in 0..mdp.actions {
                worst = worst.max((q_tilde(t, s, a) - qt[(s, a)]).abs());
            }
        }
        total += worst;
    }
    Ok(total / mdp.horizon as f64)
}
