//! Equality-constrained horizon problems.
//!
//! Stacked variables are ordered `(s_t, a_t, s_{t+1}, a_{t+1}, …, s_{t'})`.
//! The constraint matrix `Φ` has identity diagonal blocks and `−A_τ, −B_τ`
//! below them; the saddle-point system is
//! `[[Γ, Φᵀ], [Φ, 0]] (z, η) = (0, (s_t, w_t, …, w_{t'−1}))`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{assemble_dynamics, DynamicsSpec};

/// Builds `Φ_{t,t'}` from a dynamics specification.
pub fn build_phi(spec: &DynamicsSpec, t: usize, t_end: usize) -> Result<DMatrix<f64>> {
    if t > t_end {
        return Err(Error::Index(format!("window start {t} exceeds end {t_end}")));
    }
    let (a, b): (Vec<_>, Vec<_>) = (t..t_end).map(|tau| assemble_dynamics(spec, tau)).unzip();
    Ok(phi_from_blocks(spec.n(), spec.m, &a, &b))
}

/// `Φ` for explicit `A_τ, B_τ` sequences of equal length `N`.
pub fn phi_from_blocks(n: usize, m: usize, a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> DMatrix<f64> {
    let steps = a.len();
    let rows = (steps + 1) * n;
    let cols = (steps + 1) * n + steps * m;
    let mut phi = DMatrix::zeros(rows, cols);
    phi.view_mut((0, 0), (n, n)).fill_with_identity();
    for k in 0..steps {
        let row = (k + 1) * n;
        let col = k * (n + m);
        phi.view_mut((row, col), (n, n)).copy_from(&(-&a[k]));
        phi.view_mut((row, col + n), (n, m)).copy_from(&(-&b[k]));
        phi.view_mut((row, col + n + m), (n, n)).fill_with_identity();
    }
    phi
}

/// Linear-quadratic horizon problem with affine dynamics
/// `s_{k+1} = A_k s_k + B_k a_k + w_k`, `s_0` fixed.
#[derive(Debug, Clone)]
pub struct KktSystem {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub terminal: DMatrix<f64>,
    pub s0: DVector<f64>,
    pub w: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktSolution {
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
    /// One multiplier block per row block of `Φ`.
    pub duals: Vec<DVector<f64>>,
}

impl KktSolution {
    pub fn stacked_primal(&self) -> DVector<f64> {
        let mut out = Vec::new();
        for (k, s) in self.states.iter().enumerate() {
            out.extend(s.iter());
            if let Some(a) = self.actions.get(k) {
                out.extend(a.iter());
            }
        }
        DVector::from_vec(out)
    }

    pub fn stacked_dual(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.duals.iter().map(|d| d.len()).sum(),
            self.duals.iter().flat_map(|d| d.iter().copied()),
        )
    }
}

impl KktSystem {
    pub fn steps(&self) -> usize {
        self.a.len()
    }

    pub fn n(&self) -> usize {
        self.s0.len()
    }

    pub fn m(&self) -> usize {
        self.b.first().map_or(0, |b| b.ncols())
    }

    fn check_dims(&self) -> Result<()> {
        let (n, m, steps) = (self.n(), self.m(), self.steps());
        let ok = self.b.len() == steps
            && self.q.len() == steps
            && self.r.len() == steps
            && self.w.len() == steps
            && self.terminal.shape() == (n, n)
            && self.a.iter().all(|a| a.shape() == (n, n))
            && self.b.iter().all(|b| b.shape() == (n, m))
            && self.q.iter().all(|q| q.shape() == (n, n))
            && self.r.iter().all(|r| r.shape() == (m, m))
            && self.w.iter().all(|w| w.len() == n);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("inconsistent KKT block sizes".into()))
        }
    }

    pub fn phi(&self) -> DMatrix<f64> {
        phi_from_blocks(self.n(), self.m(), &self.a, &self.b)
    }

    /// Block-diagonal `Γ = diag(Q_0, R_0, …, Q_{N−1}, R_{N−1}, P)`.
    pub fn gamma(&self) -> DMatrix<f64> {
        let (n, m, steps) = (self.n(), self.m(), self.steps());
        let dim = (steps + 1) * n + steps * m;
        let mut g = DMatrix::zeros(dim, dim);
        for k in 0..steps {
            let o = k * (n + m);
            g.view_mut((o, o), (n, n)).copy_from(&self.q[k]);
            g.view_mut((o + n, o + n), (m, m)).copy_from(&self.r[k]);
        }
        let o = steps * (n + m);
        g.view_mut((o, o), (n, n)).copy_from(&self.terminal);
        g
    }

    pub fn rhs(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.s0.iter().copied().collect();
        for w in &self.w {
            v.extend(w.iter());
        }
        DVector::from_vec(v)
    }

    /// Dense saddle-point matrix and right-hand side.
    pub fn dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let gamma = self.gamma();
        let phi = self.phi();
        let (p, c) = (gamma.nrows(), phi.nrows());
        let mut k = DMatrix::zeros(p + c, p + c);
        k.view_mut((0, 0), (p, p)).copy_from(&gamma);
        k.view_mut((0, p), (p, c)).copy_from(&phi.transpose());
        k.view_mut((p, 0), (c, p)).copy_from(&phi);
        let mut rhs = DVector::zeros(p + c);
        rhs.rows_mut(p, c).copy_from(&self.rhs());
        (k, rhs)
    }

    /// `‖K z − rhs‖₂` and `‖rhs‖₂` of a candidate solution.
    pub fn residual(&self, sol: &KktSolution) -> (f64, f64) {
        let (k, rhs) = self.dense();
        let z = sol.stacked_primal();
        let eta = sol.stacked_dual();
        let mut full = DVector::zeros(z.len() + eta.len());
        full.rows_mut(0, z.len()).copy_from(&z);
        full.rows_mut(z.len(), eta.len()).copy_from(&eta);
        ((k * full - &rhs).norm(), rhs.norm())
    }

    pub fn objective(&self, sol: &KktSolution) -> f64 {
        let mut total = 0.0;
        for k in 0..self.steps() {
            let s = &sol.states[k];
            let a = &sol.actions[k];
            total += 0.5 * (s.dot(&(&self.q[k] * s)) + a.dot(&(&self.r[k] * a)));
        }
        let s = sol.states.last().expect("at least the initial state");
        total + 0.5 * s.dot(&(&self.terminal * s))
    }
}

/// Solves the saddle-point system by a backward Riccati sweep followed by a
/// forward rollout; multipliers come from the costate recursion.
pub fn solve_kkt(sys: &KktSystem) -> Result<KktSolution> {
    sys.check_dims()?;
    let steps = sys.steps();
    let mut gains = Vec::with_capacity(steps);
    let mut p = sys.terminal.clone();
    let mut p_lin = DVector::zeros(sys.n());
    for k in (0..steps).rev() {
        let (a, b, w) = (&sys.a[k], &sys.b[k], &sys.w[k]);
        let bt_p = b.transpose() * &p;
        let s = &sys.r[k] + &bt_p * b;
        let lu = s.clone().lu();
        let feedback = lu.solve(&(&bt_p * a)).ok_or_else(|| singular(&s))?;
        let feedforward = lu.solve(&(&bt_p * w + b.transpose() * &p_lin)).ok_or_else(|| singular(&s))?;
        if !feedback.iter().chain(feedforward.iter()).all(|x| x.is_finite()) {
            return Err(singular(&s));
        }
        let closed = a - b * &feedback;
        let next_lin = a.transpose() * (&p * (w - b * &feedforward) + &p_lin);
        p = &sys.q[k] + a.transpose() * &p * closed;
        p = (&p + p.transpose()) * 0.5;
        p_lin = next_lin;
        gains.push((feedback, feedforward));
    }
    gains.reverse();

    let mut states = Vec::with_capacity(steps + 1);
    let mut actions = Vec::with_capacity(steps);
    states.push(sys.s0.clone());
    for (k, (fb, ff)) in gains.iter().enumerate() {
        let s = &states[k];
        let a = -(fb * s) - ff;
        let next = &sys.a[k] * s + &sys.b[k] * &a + &sys.w[k];
        actions.push(a);
        states.push(next);
    }

    let mut duals = vec![DVector::zeros(sys.n()); steps + 1];
    duals[steps] = -(&sys.terminal * &states[steps]);
    for k in (0..steps).rev() {
        duals[k] = -(&sys.q[k] * &states[k]) + sys.a[k].transpose() * &duals[k + 1];
    }
    Ok(KktSolution {
        states,
        actions,
        duals,
    })
}

fn singular(s: &DMatrix<f64>) -> Error {
    let sv = s.clone().svd(false, false).singular_values;
    let cond = if sv.min() > 0.0 { sv.max() / sv.min() } else { f64::INFINITY };
    Error::Singular { cond }
}
