//! Station model: feasible spaces, battery dynamics and quadratic costs.
//!
//! The state is the concatenation `s = (e ‖ b)` of remaining demand `e` and
//! charging rates `b`, one entry per charger, so `n = 2m`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceMode {
    /// `e ≥ 0`, `0 ≤ b_i ≤ b̄`, `‖b‖₁ ≤ γ_line`.
    NonnegSimplex,
    /// Independent per-coordinate intervals.
    Box,
}

/// Feasible state and action sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub mode: SpaceMode,
    pub m: usize,
    pub line_limit: f64,
    pub rate_limit: f64,
    pub action_lo: f64,
    pub action_hi: f64,
    /// Per-coordinate state bounds used in box mode (length `2m`).
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
}

impl SpaceSpec {
    /// Hyper-rectangles used by the distribution-shift experiments:
    /// `e_i ∈ [−100, 100]`, `b_i ∈ [−6.6, 6.6]`, `a_i ∈ [−2, 2]`.
    pub fn experiment(m: usize) -> Self {
        Self::boxed(m, 100.0, 6.6, 2.0)
    }

    pub fn boxed(m: usize, soc_limit: f64, rate_limit: f64, action_limit: f64) -> Self {
        let mut state_lo = vec![-soc_limit; m];
        state_lo.extend(std::iter::repeat(-rate_limit).take(m));
        let mut state_hi = vec![soc_limit; m];
        state_hi.extend(std::iter::repeat(rate_limit).take(m));
        Self {
            mode: SpaceMode::Box,
            m,
            line_limit: f64::INFINITY,
            rate_limit,
            action_lo: -action_limit,
            action_hi: action_limit,
            state_lo,
            state_hi,
        }
    }

    pub fn nonneg_simplex(m: usize, line_limit: f64, rate_limit: f64, action_limit: f64) -> Self {
        Self {
            mode: SpaceMode::NonnegSimplex,
            m,
            line_limit,
            rate_limit,
            action_lo: -action_limit,
            action_hi: action_limit,
            state_lo: vec![0.0; 2 * m],
            state_hi: [vec![f64::INFINITY; m], vec![rate_limit; m]].concat(),
        }
    }

    pub fn n(&self) -> usize {
        2 * self.m
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_lo > self.action_hi {
            return Err(Error::Validation("action bounds reversed".into()));
        }
        if self.state_lo.len() != self.n() || self.state_hi.len() != self.n() {
            return Err(Error::Dimension(format!(
                "state bounds need {} entries",
                self.n()
            )));
        }
        if self.state_lo.iter().zip(&self.state_hi).any(|(lo, hi)| lo > hi) {
            return Err(Error::Validation("state bounds reversed".into()));
        }
        if self.mode == SpaceMode::NonnegSimplex && !(self.line_limit >= 0.0 && self.rate_limit >= 0.0) {
            return Err(Error::Validation("line and rate limits must be nonnegative".into()));
        }
        Ok(())
    }

    /// Membership test with absolute slack `tol`.
    pub fn contains_state(&self, s: &DVector<f64>, tol: f64) -> bool {
        let m = self.m;
        match self.mode {
            SpaceMode::Box => (0..self.n()).all(|i| {
                s[i] >= self.state_lo[i] - tol && s[i] <= self.state_hi[i] + tol
            }),
            SpaceMode::NonnegSimplex => {
                let e_ok = (0..m).all(|i| s[i] >= -tol);
                let b_ok = (m..2 * m).all(|i| s[i] >= -tol && s[i] <= self.rate_limit + tol);
                let sum: f64 = (m..2 * m).map(|i| s[i].abs()).sum();
                e_ok && b_ok && sum <= self.line_limit + tol
            }
        }
    }

    pub fn contains_action(&self, a: &DVector<f64>) -> bool {
        a.iter().all(|&x| x >= self.action_lo && x <= self.action_hi)
    }
}

/// Battery parameters. Sequences of length one are treated as constant in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSpec {
    pub m: usize,
    /// Hours per step.
    pub delta: f64,
    pub mu_eff: Vec<f64>,
    pub beta_ctrl: Vec<f64>,
}

impl DynamicsSpec {
    pub fn constant(m: usize, delta: f64, mu_eff: f64, beta_ctrl: f64) -> Self {
        Self {
            m,
            delta,
            mu_eff: vec![mu_eff],
            beta_ctrl: vec![beta_ctrl],
        }
    }

    /// Ten-minute steps, `μ = 0.8`, `β = 0.2`.
    pub fn experiment(m: usize) -> Self {
        Self::constant(m, 1.0 / 6.0, 0.8, 0.2)
    }

    pub fn n(&self) -> usize {
        2 * self.m
    }

    pub fn mu_at(&self, t: usize) -> f64 {
        self.mu_eff[t.min(self.mu_eff.len() - 1)]
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta_ctrl[t.min(self.beta_ctrl.len() - 1)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Validation("charger count must be positive".into()));
        }
        if self.mu_eff.is_empty() || self.beta_ctrl.is_empty() {
            return Err(Error::Validation("efficiency sequences are empty".into()));
        }
        let in_unit = |x: &f64| (0.0..=1.0).contains(x);
        if !self.mu_eff.iter().all(in_unit) || !self.beta_ctrl.iter().all(in_unit) {
            return Err(Error::Validation("efficiencies must lie in [0, 1]".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Validation("step length must be positive".into()));
        }
        Ok(())
    }

    /// `A_t s` without forming the matrix.
    pub fn apply_a(&self, t: usize, s: &DVector<f64>) -> DVector<f64> {
        let m = self.m;
        let k = self.delta * self.mu_at(t);
        DVector::from_fn(2 * m, |i, _| if i < m { s[i] - k * s[m + i] } else { s[i] })
    }

    /// `B_t a` without forming the matrix.
    pub fn apply_b(&self, t: usize, a: &DVector<f64>) -> DVector<f64> {
        let m = self.m;
        let beta = self.beta_at(t);
        DVector::from_fn(2 * m, |i, _| if i < m { 0.0 } else { beta * a[i - m] })
    }
}

/// Block system matrices
/// `A_t = [[I, −Δμ_t I], [0, I]]`, `B_t = [[0], [β_t I]]`.
pub fn assemble_dynamics(spec: &DynamicsSpec, t: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = spec.m;
    let n = 2 * m;
    let mut a = DMatrix::identity(n, n);
    let coupling = -spec.delta * spec.mu_at(t);
    let mut b = DMatrix::zeros(n, m);
    for i in 0..m {
        a[(i, m + i)] = coupling;
        b[(m + i, i)] = spec.beta_at(t);
    }
    (a, b)
}

/// Quadratic stage costs `½(sᵀQ_t s + aᵀR_t a)` and terminal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub p_term: DMatrix<f64>,
}

impl CostSpec {
    /// Validates positive definiteness of every matrix.
    pub fn new(q: Vec<DMatrix<f64>>, r: Vec<DMatrix<f64>>, p_term: DMatrix<f64>) -> Result<Self> {
        if q.is_empty() || r.is_empty() {
            return Err(Error::Validation("cost sequences are empty".into()));
        }
        let n = q[0].nrows();
        let m = r[0].nrows();
        for (name, mats, dim) in [("Q", &q, n), ("R", &r, m)] {
            for (t, mat) in mats.iter().enumerate() {
                if mat.shape() != (dim, dim) {
                    return Err(Error::Dimension(format!("{name}[{t}] is not {dim}x{dim}")));
                }
                check_pd(mat, &format!("{name}[{t}]"))?;
            }
        }
        if p_term.shape() != (n, n) {
            return Err(Error::Dimension(format!("terminal matrix is not {n}x{n}")));
        }
        check_pd(&p_term, "P")?;
        Ok(Self { q, r, p_term })
    }

    /// `Q = I_n`, `R = α I_m`, terminal matrix `Q`.
    pub fn experiment(m: usize, alpha: f64) -> Result<Self> {
        let n = 2 * m;
        Self::new(
            vec![DMatrix::identity(n, n)],
            vec![DMatrix::identity(m, m) * alpha],
            DMatrix::identity(n, n),
        )
    }

    pub fn q_at(&self, t: usize) -> &DMatrix<f64> {
        &self.q[t.min(self.q.len() - 1)]
    }

    pub fn r_at(&self, t: usize) -> &DMatrix<f64> {
        &self.r[t.min(self.r.len() - 1)]
    }

    pub fn stage_cost(&self, t: usize, s: &DVector<f64>, a: &DVector<f64>) -> f64 {
        0.5 * (s.dot(&(self.q_at(t) * s)) + a.dot(&(self.r_at(t) * a)))
    }

    /// Smallest and largest eigenvalue over all cost matrices; the
    /// `(μ, ξ)` pair of the well-conditioning bounds.
    pub fn eigen_bounds(&self) -> (f64, f64) {
        self.q
            .iter()
            .chain(&self.r)
            .chain(std::iter::once(&self.p_term))
            .map(eig_range)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
                (lo.min(a), hi.max(b))
            })
    }
}

fn eig_range(mat: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(mat.clone()).eigenvalues;
    (eig.min(), eig.max())
}

fn check_pd(mat: &DMatrix<f64>, name: &str) -> Result<()> {
    let asym = (mat - mat.transpose()).amax();
    if asym > 1e-12 * (1.0 + mat.amax()) {
        return Err(Error::Validation(format!("{name} is not symmetric")));
    }
    let (lo, _) = eig_range(mat);
    if !(lo > 0.0) {
        return Err(Error::Validation(format!(
            "{name} is not positive definite (min eigenvalue {lo:.3e})"
        )));
    }
    Ok(())
}
