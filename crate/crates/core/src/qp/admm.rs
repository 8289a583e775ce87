//! Inequality-constrained convex QP by operator splitting.
//!
//! Solves `min ½xᵀHx + gᵀx` subject to variable bounds, an optional
//! `Σ_{i∈S} x_i ≤ γ` row, equality rows, and general two-sided rows. The
//! constraints are stacked as `l ≤ Cx ≤ u` and handled by over-relaxed ADMM
//! with a proximal term; a polishing step solves the equality-constrained
//! problem on the detected active set.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexRow {
    pub vars: Vec<usize>,
    pub budget: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub coeffs: Vec<(usize, f64)>,
    pub lo: f64,
    pub hi: f64,
}

impl LinearRow {
    pub fn equality(coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self {
            coeffs,
            lo: rhs,
            hi: rhs,
        }
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        self.coeffs.iter().map(|&(i, c)| c * x[i]).sum()
    }

    /// Range of the row over the variable box.
    fn range(&self, lo: &DVector<f64>, hi: &DVector<f64>) -> (f64, f64) {
        self.coeffs.iter().fold((0.0, 0.0), |(mn, mx), &(i, c)| {
            if c >= 0.0 {
                (mn + c * lo[i], mx + c * hi[i])
            } else {
                (mn + c * hi[i], mx + c * lo[i])
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    pub simplex: Option<SimplexRow>,
    pub equalities: Vec<LinearRow>,
    pub rows: Vec<LinearRow>,
}

impl BoxQp {
    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let d = g.len();
        Self::bounded(
            h,
            g,
            DVector::from_element(d, f64::NEG_INFINITY),
            DVector::from_element(d, f64::INFINITY),
        )
    }

    pub fn bounded(h: DMatrix<f64>, g: DVector<f64>, lo: DVector<f64>, hi: DVector<f64>) -> Self {
        Self {
            h,
            g,
            lo,
            hi,
            simplex: None,
            equalities: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    fn all_rows(&self) -> Vec<LinearRow> {
        let mut rows = Vec::new();
        if let Some(s) = &self.simplex {
            rows.push(LinearRow {
                coeffs: s.vars.iter().map(|&i| (i, 1.0)).collect(),
                lo: f64::NEG_INFINITY,
                hi: s.budget,
            });
        }
        rows.extend(self.equalities.iter().cloned());
        rows.extend(self.rows.iter().cloned());
        rows
    }

    /// Largest violation of any constraint at `x`.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim() {
            worst = worst.max(self.lo[i] - x[i]).max(x[i] - self.hi[i]);
        }
        for row in self.all_rows() {
            let v = row.eval(x);
            worst = worst.max(row.lo - v).max(v - row.hi);
        }
        worst
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.h.shape() != (d, d) || self.lo.len() != d || self.hi.len() != d {
            return Err(Error::Dimension(format!("QP with {d} variables has mismatched blocks")));
        }
        if let Some(i) = (0..d).find(|&i| !(self.lo[i] <= self.hi[i])) {
            return Err(Error::Infeasible(format!(
                "bounds of variable {i} are empty: [{}, {}]",
                self.lo[i], self.hi[i]
            )));
        }
        let rows = self.all_rows();
        for (k, row) in rows.iter().enumerate() {
            if row.coeffs.iter().any(|&(i, _)| i >= d) {
                return Err(Error::Dimension(format!("row {k} references a missing variable")));
            }
            let (mn, mx) = row.range(&self.lo, &self.hi);
            if row.lo > mx + 1e-12 * (1.0 + mx.abs()) || row.hi < mn - 1e-12 * (1.0 + mn.abs()) {
                let kind = if row.lo == row.hi { "equality" } else { "row" };
                return Err(Error::Infeasible(format!(
                    "{kind} {k} requires [{}, {}] but the bounds allow only [{mn}, {mx}]",
                    row.lo, row.hi
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Step-size adaptation happens only during the first iterations.
    pub warmup: usize,
    pub adapt_every: usize,
    pub polish: bool,
    /// Polishing is retried at this period while the active set stays unchanged.
    pub polish_every: usize,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            tol: 1e-8,
            max_iter: 50_000,
            warmup: 200,
            adapt_every: 25,
            polish: true,
            polish_every: 25,
        }
    }
}

/// Primal/slack/dual iterate used for warm starts.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers for `l ≤ Cx ≤ u`; bounds first, then the simplex row,
    /// equality rows, and general rows. Negative means a lower side is active.
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
    /// Fixed-point residual of the splitting iteration, one entry per iteration.
    pub residuals: Vec<f64>,
    pub polished: bool,
}

struct Stacked {
    c: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    eq: Vec<bool>,
}

fn stack(qp: &BoxQp) -> Stacked {
    let d = qp.dim();
    let rows = qp.all_rows();
    let nc = d + rows.len();
    let mut c = DMatrix::zeros(nc, d);
    let mut l = DVector::zeros(nc);
    let mut u = DVector::zeros(nc);
    for i in 0..d {
        c[(i, i)] = 1.0;
        l[i] = qp.lo[i];
        u[i] = qp.hi[i];
    }
    for (k, row) in rows.iter().enumerate() {
        for &(i, v) in &row.coeffs {
            c[(d + k, i)] += v;
        }
        l[d + k] = row.lo;
        u[d + k] = row.hi;
    }
    let eq = (0..nc).map(|i| l[i] == u[i]).collect();
    Stacked { c, l, u, eq }
}

fn row_rho(stacked: &Stacked, rho: f64) -> DVector<f64> {
    DVector::from_fn(stacked.l.len(), |i, _| {
        if stacked.eq[i] {
            1e3 * rho
        } else if stacked.l[i].is_infinite() && stacked.u[i].is_infinite() {
            1e-6
        } else {
            rho
        }
    })
}

fn factor(h: &DMatrix<f64>, c: &DMatrix<f64>, rho: &DVector<f64>, sigma: f64) -> Result<Cholesky<f64, Dyn>> {
    let d = h.nrows();
    let mut k = h + DMatrix::identity(d, d) * sigma;
    let mut scaled = c.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= rho[i];
    }
    k += c.transpose() * scaled;
    Cholesky::new(k).ok_or_else(|| Error::Validation("QP Hessian is not positive semidefinite".into()))
}

/// Solves `qp` from a cold start.
pub fn solve_box_qp(qp: &BoxQp, tol: f64, max_iter: usize) -> Result<QpSolution> {
    let settings = AdmmSettings {
        tol,
        max_iter,
        ..AdmmSettings::default()
    };
    solve_box_qp_with(qp, &settings, None)
}

pub fn solve_box_qp_with(qp: &BoxQp, settings: &AdmmSettings, warm: Option<&WarmStart>) -> Result<QpSolution> {
    qp.validate()?;
    let d = qp.dim();
    let stacked = stack(qp);
    let nc = stacked.l.len();
    let tol = settings.tol;

    // An unconstrained minimizer that already satisfies every constraint is optimal.
    if let Some(chol) = Cholesky::new(qp.h.clone()) {
        let x = chol.solve(&(-&qp.g));
        if qp.violation(&x) <= 0.0 {
            return Ok(QpSolution {
                objective: qp.objective(&x),
                x,
                y: DVector::zeros(nc),
                status: QpStatus::Solved,
                iterations: 0,
                residuals: Vec::new(),
                polished: false,
            });
        }
    }

    let c = &stacked.c;
    let ct = c.transpose();
    let mut rho = settings.rho;
    let mut rho_vec = row_rho(&stacked, rho);
    let mut chol = factor(&qp.h, c, &rho_vec, settings.sigma)?;

    let (mut x, mut y) = match warm {
        Some(w) if w.x.len() == d && w.y.len() == nc => (w.x.clone(), w.y.clone()),
        _ => (DVector::zeros(d), DVector::zeros(nc)),
    };
    let mut z = project_box(&(c * &x), &stacked.l, &stacked.u);
    if settings.polish && warm.is_some() {
        if let Some((xp, yp)) = polish(qp, &stacked, &z, &y, tol) {
            return Ok(QpSolution {
                objective: qp.objective(&xp),
                x: xp,
                y: yp,
                status: QpStatus::Solved,
                iterations: 0,
                residuals: Vec::new(),
                polished: true,
            });
        }
    }
    let mut residuals = Vec::new();
    let mut last_sides: Vec<i8> = Vec::new();
    let mut stable_for = 0usize;
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    let alpha = settings.alpha;

    for iter in 1..=settings.max_iter {
        let rhs = &x * settings.sigma - &qp.g + &ct * (rho_vec.component_mul(&z) - &y);
        let x_tilde = chol.solve(&rhs);
        let z_tilde = c * &x_tilde;
        let x_next = &x_tilde * alpha + &x * (1.0 - alpha);
        let relaxed = &z_tilde * alpha + &z * (1.0 - alpha);
        let shifted = &relaxed + y.component_div(&rho_vec);
        let z_next = project_box(&shifted, &stacked.l, &stacked.u);
        let y_next = &y + rho_vec.component_mul(&(&relaxed - &z_next));

        // Fixed-point residual of the splitting variable (x, z + y/ρ) in the
        // metric diag(σ, ρ).
        let v_new = &z_next + y_next.component_div(&rho_vec);
        let dv = &v_new - &shifted;
        let dx = &x_next - &x;
        let fp = (settings.sigma * dx.norm_squared() + rho_vec.component_mul(&dv).dot(&dv)).sqrt();
        residuals.push(fp);

        x = x_next;
        z = z_next;
        y = y_next;

        let cx = c * &x;
        let r_pri = (&cx - &z).amax();
        let r_dual = (&qp.h * &x + &qp.g + &ct * &y).amax();
        let score = r_pri.max(r_dual);
        if best.as_ref().map_or(true, |b| score < b.0) {
            best = Some((score, x.clone(), y.clone()));
        }

        if settings.polish {
            let sides = active_sides(&stacked, &z, &y);
            if sides == last_sides {
                stable_for += 1;
            } else {
                stable_for = 0;
                last_sides = sides;
            }
        }
        if settings.polish && stable_for > 0 && (stable_for == 2 || stable_for % settings.polish_every == 0) {
            if let Some((xp, yp)) = polish(qp, &stacked, &z, &y, tol) {
                return Ok(QpSolution {
                    objective: qp.objective(&xp),
                    x: xp,
                    y: yp,
                    status: QpStatus::Solved,
                    iterations: iter,
                    residuals,
                    polished: true,
                });
            }
        }
        if r_pri <= tol && r_dual <= tol {
            let x = clip_to_bounds(qp, x);
            return Ok(QpSolution {
                objective: qp.objective(&x),
                x,
                y,
                status: QpStatus::Solved,
                iterations: iter,
                residuals,
                polished: false,
            });
        }

        if iter <= settings.warmup && iter % settings.adapt_every == 0 {
            let pri_scale = cx.amax().max(z.amax()).max(1e-12);
            let dual_scale = (&qp.h * &x).amax().max((&ct * &y).amax()).max(qp.g.amax()).max(1e-12);
            let ratio = ((r_pri / pri_scale) / (r_dual / dual_scale).max(1e-30)).sqrt();
            let new_rho = (rho * ratio).clamp(1e-6, 1e6);
            if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                rho = new_rho;
                rho_vec = row_rho(&stacked, rho);
                chol = factor(&qp.h, c, &rho_vec, settings.sigma)?;
            }
        }
    }

    let (_, x, y) = best.expect("at least one iteration");
    let x = clip_to_bounds(qp, x);
    Ok(QpSolution {
        objective: qp.objective(&x),
        x,
        y,
        status: QpStatus::MaxIterations,
        iterations: settings.max_iter,
        residuals,
        polished: false,
    })
}

fn clip_to_bounds(qp: &BoxQp, x: DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i].clamp(qp.lo[i], qp.hi[i]))
}

fn project_box(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].max(l[i]).min(u[i]))
}

/// Solves the equality-constrained problem on the active set guessed from
/// `(z, y)` and accepts it when it satisfies the optimality conditions to `tol`.
fn polish(qp: &BoxQp, stacked: &Stacked, z: &DVector<f64>, y: &DVector<f64>, tol: f64) -> Option<(DVector<f64>, DVector<f64>)> {
    let d = qp.dim();
    let nc = stacked.l.len();
    let side = active_sides(stacked, z, y);
    // Variables pinned to a bound, and general rows treated as equalities.
    let mut fixed = DVector::zeros(d);
    let free: Vec<usize> = (0..d).filter(|&i| side[i] == 0).collect();
    for i in 0..d {
        match side[i] {
            -1 => fixed[i] = stacked.l[i],
            1 => fixed[i] = stacked.u[i],
            _ => {}
        }
    }
    let rows: Vec<(usize, f64)> = (d..nc)
        .filter(|&r| side[r] != 0)
        .map(|r| (r, if side[r] < 0 { stacked.l[r] } else { stacked.u[r] }))
        .collect();
    let nf = free.len();
    let nr = rows.len();
    let hx = &qp.h * &fixed;
    let mut k = DMatrix::zeros(nf + nr, nf + nr);
    let mut rhs = DVector::zeros(nf + nr);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            k[(a, b)] = qp.h[(i, j)];
        }
        rhs[a] = -qp.g[i] - hx[i];
    }
    for (r, &(row, val)) in rows.iter().enumerate() {
        let mut b = val;
        for j in 0..d {
            let c = stacked.c[(row, j)];
            if c == 0.0 {
                continue;
            }
            if side[j] == 0 {
                let a = free.binary_search(&j).unwrap();
                k[(nf + r, a)] = c;
                k[(a, nf + r)] = c;
            } else {
                b -= c * fixed[j];
            }
        }
        rhs[nf + r] = b;
    }
    let sol = if nr == 0 {
        Cholesky::new(k)?.solve(&rhs)
    } else {
        k.lu().solve(&rhs)?
    };
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mut xp = fixed;
    for (a, &i) in free.iter().enumerate() {
        xp[i] = sol[a];
    }
    let mut yp = DVector::zeros(nc);
    for (r, &(row, _)) in rows.iter().enumerate() {
        yp[row] = sol[nf + r];
    }
    let grad = &qp.h * &xp + &qp.g + stacked.c.transpose() * &yp;
    for i in 0..d {
        if side[i] != 0 {
            yp[i] = -grad[i];
        } else if grad[i].abs() > tol * (1.0 + qp.g[i].abs()) {
            return None;
        }
    }
    let cx = &stacked.c * &xp;
    for i in 0..nc {
        let slack = tol * (1.0 + stacked.l[i].abs().min(stacked.u[i].abs()).min(1e6));
        if cx[i] < stacked.l[i] - slack || cx[i] > stacked.u[i] + slack {
            return None;
        }
        if !stacked.eq[i] && yp[i] * f64::from(side[i]) < -tol {
            return None;
        }
    }
    Some((xp, yp))
}

/// `-1` lower side active, `1` upper side active, `0` inactive.
fn active_sides(stacked: &Stacked, z: &DVector<f64>, y: &DVector<f64>) -> Vec<i8> {
    (0..stacked.l.len())
        .map(|i| {
            if stacked.eq[i] {
                if y[i] < 0.0 {
                    -1
                } else {
                    1
                }
            } else if stacked.l[i].is_finite() && z[i] - stacked.l[i] < -y[i] {
                -1
            } else if stacked.u[i].is_finite() && stacked.u[i] - z[i] < y[i] {
                1
            } else {
                0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let x = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        &x * x.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn clipped_unconstrained_optimum() {
        let qp = BoxQp::bounded(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-3.0, -3.0]),
            DVector::zeros(2),
            DVector::from_element(2, 1.0),
        );
        let sol = solve_box_qp(&qp, 1e-8, 50_000).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.x[0] - 1.0).abs() < 1e-8 && (sol.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn unconstrained_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_pd(&mut rng, 6);
        let g = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let sol = solve_box_qp(&BoxQp::unconstrained(h.clone(), g.clone()), 1e-8, 50_000).unwrap();
        let dense = h.lu().solve(&(-g)).unwrap();
        assert!((sol.x - dense).amax() < 1e-6);
    }

    #[test]
    fn inconsistent_equality_is_infeasible() {
        let mut qp = BoxQp::bounded(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DVector::zeros(2),
            DVector::from_element(2, 1.0),
        );
        qp.equalities.push(LinearRow::equality(vec![(0, 1.0), (1, 1.0)], 3.0));
        let err = solve_box_qp(&qp, 1e-8, 1000).unwrap_err();
        assert!(matches!(err, Error::Infeasible(ref m) if m.contains("equality 0")), "{err}");
    }

    #[test]
    fn simplex_row_binds() {
        let mut qp = BoxQp::bounded(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-5.0, -5.0]),
            DVector::zeros(2),
            DVector::from_element(2, 6.0),
        );
        qp.simplex = Some(SimplexRow {
            vars: vec![0, 1],
            budget: 8.0,
        });
        let sol = solve_box_qp(&qp, 1e-9, 50_000).unwrap();
        assert!((sol.x[0] - 4.0).abs() < 1e-8 && (sol.x[1] - 4.0).abs() < 1e-8, "{:?}", sol.x);
    }

    #[test]
    fn multiplier_signs_match_active_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let d = rng.gen_range(2..12);
            let h = random_pd(&mut rng, d);
            let g = DVector::from_fn(d, |_, _| rng.gen_range(-5.0..5.0));
            let qp = BoxQp::bounded(h, g, DVector::from_element(d, -1.0), DVector::from_element(d, 1.0));
            let sol = solve_box_qp(&qp, 1e-8, 50_000).unwrap();
            let grad = &qp.h * &sol.x + &qp.g;
            for i in 0..d {
                let at_lo = (sol.x[i] + 1.0).abs() <= 1e-7;
                let at_hi = (sol.x[i] - 1.0).abs() <= 1e-7;
                if at_lo {
                    assert!(sol.y[i] <= 1e-8 && grad[i] >= -1e-7);
                } else if at_hi {
                    assert!(sol.y[i] >= -1e-8 && grad[i] <= 1e-7);
                } else {
                    assert!(grad[i].abs() <= 1e-7, "inactive gradient {}", grad[i]);
                }
            }
        }
    }

    #[test]
    fn residual_is_nonincreasing_after_warmup() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let settings = AdmmSettings {
            polish: false,
            max_iter: 3000,
            tol: 1e-10,
            ..AdmmSettings::default()
        };
        for _ in 0..20 {
            let d = rng.gen_range(3..15);
            let h = random_pd(&mut rng, d);
            let g = DVector::from_fn(d, |_, _| rng.gen_range(-5.0..5.0));
            let mut qp = BoxQp::bounded(h, g, DVector::from_element(d, -1.0), DVector::from_element(d, 1.0));
            qp.equalities.push(LinearRow::equality(vec![(0, 1.0), (1, -1.0)], 0.25));
            let sol = solve_box_qp_with(&qp, &settings, None).unwrap();
            let tail = &sol.residuals[settings.warmup.min(sol.residuals.len())..];
            for w in tail.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-13, "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn warm_start_is_accepted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 8;
        let h = random_pd(&mut rng, d);
        let g = DVector::from_fn(d, |_, _| rng.gen_range(-5.0..5.0));
        let qp = BoxQp::bounded(h, g, DVector::from_element(d, -0.5), DVector::from_element(d, 0.5));
        let cold = solve_box_qp(&qp, 1e-9, 50_000).unwrap();
        let warm = solve_box_qp_with(
            &qp,
            &AdmmSettings {
                tol: 1e-9,
                ..AdmmSettings::default()
            },
            Some(&WarmStart {
                x: cold.x.clone(),
                y: cold.y.clone(),
            }),
        )
        .unwrap();
        assert!(warm.iterations < cold.iterations);
        assert!((warm.x - cold.x).amax() < 1e-7);
    }
}
