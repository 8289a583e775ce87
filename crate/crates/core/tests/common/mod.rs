#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ood_charging::analysis::ToyMdp;
use ood_charging::env::Station;
use ood_charging::model::{assemble_dynamics, CostSpec, DynamicsSpec, SpaceSpec};
use ood_charging::qp::{BoxQp, KktSystem};
use ood_charging::session::{load_sessions, SessionSet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn three_sessions() -> SessionSet {
    load_sessions(&fixture("three_sessions.csv"), 144, 2).unwrap()
}

pub fn uniform_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(lo..hi))
}

/// `MᵀM + εI` with entries of `M` uniform in `[−1, 1]`.
pub fn random_pd(n: usize, eps: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    m.transpose() * &m + DMatrix::identity(n, n) * eps
}

/// Accelerated projected gradient with adaptive restart, iterated until
/// the iterate stops moving.
pub fn pgd_oracle(qp: &BoxQp) -> DVector<f64> {
    let n = qp.g.len();
    let step = 1.0 / qp.h.symmetric_eigenvalues().max();
    let clamp = |v: DVector<f64>| DVector::from_fn(n, |i, _| v[i].clamp(qp.lo[i], qp.hi[i]));
    let mut x = clamp(DVector::zeros(n));
    let mut y = x.clone();
    let mut theta = 1.0f64;
    for _ in 0..2_000_000 {
        let grad = &qp.h * &y + &qp.g;
        let next = clamp(&y - grad * step);
        let moved = (&next - &x).amax();
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        if (&y - &next).dot(&(&next - &x)) > 0.0 {
            y = next.clone();
            theta = 1.0;
        } else {
            y = &next + (&next - &x) * ((theta - 1.0) / theta_next);
            theta = theta_next;
        }
        x = next;
        if moved < 1e-15 {
            break;
        }
    }
    x
}

/// Box QP with `n ≤ max_dim`, some infinite bounds, and feasible boxes.
pub fn random_box_qp(max_dim: usize, rng: &mut ChaCha8Rng) -> BoxQp {
    let n = rng.gen_range(1..=max_dim);
    let h = random_pd(n, rng.gen_range(0.05..1.0), rng);
    let g = uniform_vec(n, -10.0, 10.0, rng);
    let lo = DVector::from_fn(n, |_, _| if rng.gen_bool(0.1) { f64::NEG_INFINITY } else { rng.gen_range(-2.0..0.0) });
    let hi = DVector::from_fn(n, |_, _| if rng.gen_bool(0.1) { f64::INFINITY } else { rng.gen_range(0.0..2.0) });
    BoxQp::bounded(h, g, lo, hi)
}

/// Random constant-coefficient station whose state and action boxes never bind.
pub fn wide_station(m: usize, rng: &mut ChaCha8Rng) -> Station {
    let dynamics = DynamicsSpec::constant(m, rng.gen_range(0.05..0.5), rng.gen_range(0.2..1.0), rng.gen_range(0.05..1.0));
    let n = 2 * m;
    let costs = CostSpec::new(
        vec![random_pd(n, 0.5, rng)],
        vec![random_pd(m, 0.5, rng)],
        random_pd(n, 0.5, rng),
    )
    .unwrap();
    Station::new(dynamics, costs, SpaceSpec::boxed(m, 1e9, 1e9, 1e9)).unwrap()
}

/// Offline system over `[0, steps]` for a station with no resets.
pub fn offline_system(station: &Station, s0: &DVector<f64>, w: &[DVector<f64>]) -> KktSystem {
    let steps = w.len();
    let (a, b): (Vec<_>, Vec<_>) = (0..steps).map(|t| assemble_dynamics(&station.dynamics, t)).unzip();
    KktSystem {
        a,
        b,
        q: (0..steps).map(|t| station.costs.q_at(t).clone()).collect(),
        r: (0..steps).map(|t| station.costs.r_at(t).clone()).collect(),
        terminal: station.costs.q_at(steps).clone(),
        s0: s0.clone(),
        w: w.to_vec(),
    }
}

pub fn fuzzed_station(r: &mut ChaCha8Rng) -> Station {
    let m = r.gen_range(1..=4);
    let dynamics = DynamicsSpec::constant(m, r.gen_range(0.05..0.5), r.gen_range(0.1..1.0), r.gen_range(0.05..1.0));
    let space = if r.gen_bool(0.5) {
        SpaceSpec::boxed(m, r.gen_range(20.0..100.0), r.gen_range(1.0..8.0), r.gen_range(0.5..3.0))
    } else {
        SpaceSpec::nonneg_simplex(m, r.gen_range(2.0..12.0), r.gen_range(1.0..8.0), r.gen_range(0.5..3.0))
    };
    Station::new(dynamics, CostSpec::experiment(m, 0.1).unwrap(), space).unwrap()
}

pub fn deterministic_mdp(states: usize, actions: usize, horizon: usize, r: &mut ChaCha8Rng) -> (ToyMdp, Vec<Vec<usize>>) {
    let next: Vec<Vec<usize>> = (0..states).map(|_| (0..actions).map(|_| r.gen_range(0..states)).collect()).collect();
    let transitions = next
        .iter()
        .map(|row| {
            row.iter()
                .map(|&j| (0..states).map(|k| if k == j { 1.0 } else { 0.0 }).collect())
                .collect()
        })
        .collect();
    let costs = (0..horizon)
        .map(|_| DMatrix::from_fn(states, actions, |_, _| r.gen_range(0.0..5.0)))
        .collect();
    (
        ToyMdp {
            states,
            actions,
            horizon,
            transitions,
            costs,
        },
        next,
    )
}

/// Cheapest completion over every action sequence, summed from the back.
pub fn enumerate_q(mdp: &ToyMdp, next: &[Vec<usize>], t: usize, s: usize, a: usize) -> f64 {
    let c = mdp.costs[t][(s, a)];
    if t + 1 == mdp.horizon {
        return c;
    }
    let s2 = next[s][a];
    let best = (0..mdp.actions)
        .map(|a2| enumerate_q(mdp, next, t + 1, s2, a2))
        .fold(f64::INFINITY, f64::min);
    c + best
}

/// Singular values by one-sided Jacobi rotations on the columns.
pub fn jacobi_singular_values(mut u: DMatrix<f64>) -> Vec<f64> {
    let n = u.ncols();
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = u.column(p).norm_squared();
                let beta = u.column(q).norm_squared();
                let gamma = u.column(p).dot(&u.column(q));
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..u.nrows() {
                    let (x, y) = (u[(i, p)], u[(i, q)]);
                    u[(i, p)] = c * x - s * y;
                    u[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|j| u.column(j).norm()).collect();
    sv.sort_by(f64::total_cmp);
    sv
}

/// `Φ` written out entry by entry for the constant two-block system.
pub fn phi_by_hand(m: usize, delta: f64, mu: f64, beta: f64, steps: usize) -> DMatrix<f64> {
    let n = 2 * m;
    let mut phi = DMatrix::zeros((steps + 1) * n, (steps + 1) * n + steps * m);
    for i in 0..n {
        phi[(i, i)] = 1.0;
    }
    for k in 0..steps {
        let (row, col) = ((k + 1) * n, k * (n + m));
        for i in 0..n {
            phi[(row + i, col + i)] = -1.0;
            phi[(row + i, col + n + m + i)] = 1.0;
        }
        for i in 0..m {
            phi[(row + i, col + m + i)] = delta * mu;
            phi[(row + m + i, col + n + i)] = -beta;
        }
    }
    phi
}
