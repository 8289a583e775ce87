//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary so
//! the report is always printed. `ACCEPTANCE_FULL=1` swaps the scaled
//! experiment for the 1200-episode, 10-seed configuration.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use common::{
    deterministic_mdp, enumerate_q, fuzzed_station, jacobi_singular_values, offline_system, pgd_oracle, phi_by_hand,
    random_box_qp, random_pd, rng, uniform_vec, wide_station,
};
use ood_charging::analysis::{q_error_epsilon, roe_mpc_bound, verify_stabilizability, BoundInputs};
use ood_charging::config::ExperimentConfig;
use ood_charging::env::{run_episode, Events, Policy, SolarModel, Trajectory};
use ood_charging::experiment::{cell_policy, prepare_regimes, run_experiment};
use ood_charging::model::{DynamicsSpec, SpaceSpec};
use ood_charging::mpc::{build_mpc_problem, estimate_state, mpc_action, EstimatorClip, MpcPolicy, MpcSettings, PredictionSet, StateConstraints};
use ood_charging::nn::{actor_objective_grad, critic_loss_grad, FeatureMap, Head, LearnedPolicy, Learner, Mlp, Transition};
use ood_charging::ood::{ood_step, Beta, RadiusState};
use ood_charging::qp::{solve_box_qp, solve_kkt, AdmmSettings, KktSystem, QpStatus};
use ood_charging::rng::{derive_seed, stream, stream_rng};
use ood_charging::session::{generate_sessions, GeneratorParams, Profile};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn episodes(cfg: &ExperimentConfig, seed: u64, n: usize, policy: &mut dyn Policy) -> Vec<Trajectory> {
    let station = cfg.station().unwrap();
    let regimes = prepare_regimes(cfg).unwrap();
    (0..n)
        .map(|ep| {
            let (sessions, solar) = regimes.for_episode(ep);
            let mut r = stream_rng(cfg.master_seed, seed, stream::SOLAR, ep as u64);
            run_episode(&station, sessions, solar, policy, &mut r).unwrap()
        })
        .collect()
}

fn endpoints() -> Check {
    let cfg = ExperimentConfig {
        episodes: 4,
        shift_episode: 2,
        ..ExperimentConfig::default()
    };
    let station = cfg.station().map_err(|e| e.to_string())?;
    let mpc = cfg.mpc_settings().map_err(|e| e.to_string())?;
    let mut slowest: f64 = 0.0;
    for seed in 0..2 {
        let start = Instant::now();
        let mut ood = cell_policy(&cfg, &station, &mpc, Beta::Infinite, seed).unwrap();
        let mut base = MpcPolicy::new(station.clone(), mpc.clone());
        ensure(episodes(&cfg, seed, 4, &mut ood) == episodes(&cfg, seed, 4, &mut base), || {
            format!("β=∞ differs from MPC for seed {seed}")
        })?;
        slowest = slowest.max(start.elapsed().as_secs_f64());

        let start = Instant::now();
        let mut ood = cell_policy(&cfg, &station, &mpc, Beta::Finite(0.0), seed).unwrap();
        let learner_seed = derive_seed(cfg.master_seed, seed, stream::LEARNER, 0);
        let learner = Learner::new(&station.space, cfg.horizon, cfg.ddpg_params(), learner_seed).unwrap();
        let mut learned = LearnedPolicy::new(station.clone(), cfg.estimator_clip, learner);
        ensure(episodes(&cfg, seed, 4, &mut ood) == episodes(&cfg, seed, 4, &mut learned), || {
            format!("β=0 differs from the projected learned policy for seed {seed}")
        })?;
        slowest = slowest.max(start.elapsed().as_secs_f64());
    }
    ensure(slowest < 10.0, || format!("slowest check took {slowest:.1} s"))?;
    Ok(format!("bitwise equal over 4 episodes × 2 seeds at both ends; slowest check {slowest:.2} s"))
}

fn projection_suite() -> Check {
    let mut r = rng(101);
    let betas = [Beta::Finite(0.0), Beta::Finite(0.1), Beta::Finite(1.0), Beta::Finite(10.0), Beta::Infinite];
    let (mut steps, mut inactive, mut worst_ball, mut worst_interp) = (0usize, 0usize, f64::NEG_INFINITY, 0.0f64);
    while steps < 100_000 {
        let m = r.gen_range(1..=4);
        let lim = r.gen_range(0.5..3.0);
        let space = SpaceSpec::boxed(m, 100.0, 6.6, lim);
        let mut radius = RadiusState::new(betas[r.gen_range(0..betas.len())]);
        for t in 0..r.gen_range(1..200) {
            let a_bar = uniform_vec(m, -lim, lim, &mut r);
            let spread = if r.gen_bool(0.3) { 4.0 * lim } else { lim };
            let a_tilde = &a_bar + uniform_vec(m, -spread, spread, &mut r);
            let td = r.gen_range(-0.5..0.5) * r.gen_range(0.0f64..1.0).powi(3);
            let (a, rec) = ood_step(&mut radius, t, &a_bar, &a_tilde, td, &space);
            steps += 1;
            worst_ball = worst_ball.max((&a - &a_bar).norm() - rec.radius);
            ensure(space.contains_action(&a), || format!("action {a} left the box"))?;
            let blend = &a_tilde * rec.lambda + &a_bar * (1.0 - rec.lambda);
            if space.contains_action(&blend) {
                inactive += 1;
                worst_interp = worst_interp.max((&a - &blend).amax());
            }
        }
    }
    ensure(worst_ball <= 1e-9, || format!("ball violated by {worst_ball:e}"))?;
    ensure(worst_interp <= 1e-12, || format!("interpolation off by {worst_interp:e}"))?;
    Ok(format!(
        "{steps} steps, max ball excess {worst_ball:.1e}, max interpolation error {worst_interp:.1e} on {inactive} box-inactive steps"
    ))
}

fn qp_correctness() -> Check {
    let mut r = rng(102);
    let (mut worst_gap, mut slowest) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let qp = random_box_qp(40, &mut r);
        let start = Instant::now();
        let sol = solve_box_qp(&qp, 1e-8, 50_000).map_err(|e| e.to_string())?;
        slowest = slowest.max(start.elapsed().as_secs_f64());
        ensure(sol.status == QpStatus::Solved, || format!("case {case} not solved"))?;
        let reference = qp.objective(&pgd_oracle(&qp));
        let gap = (sol.objective - reference).abs() / reference.abs().max(1.0);
        worst_gap = worst_gap.max(gap);
        ensure(qp.violation(&sol.x) <= 1e-9, || format!("case {case} infeasible"))?;
    }
    ensure(worst_gap <= 1e-6, || format!("objective gap {worst_gap:e}"))?;
    ensure(slowest < 1.0, || format!("slowest solve {slowest:.2} s"))?;

    let mut worst_uncon = 0.0f64;
    for _ in 0..30 {
        let m = r.gen_range(1..=3);
        let station = wide_station(m, &mut r);
        let steps = r.gen_range(1..=12);
        let s0 = uniform_vec(2 * m, -5.0, 5.0, &mut r);
        let w: Vec<_> = (0..steps).map(|_| uniform_vec(2 * m, -1.0, 1.0, &mut r)).collect();
        let preds = PredictionSet {
            t: 0,
            episode_len: steps + 1,
            w: w.clone(),
            reset: vec![vec![false; m]; steps],
        };
        let problem = build_mpc_problem(&station, &s0, &preds, StateConstraints::None).unwrap();
        let sol = solve_box_qp(&problem.qp, 1e-10, 50_000).unwrap();
        let kkt = solve_kkt(&offline_system(&station, &s0, &w)).unwrap();
        for (k, a) in kkt.actions.iter().enumerate() {
            worst_uncon = worst_uncon.max((sol.x.rows(k * m, m) - a).amax());
        }
    }
    ensure(worst_uncon <= 1e-6, || format!("unconstrained mismatch {worst_uncon:e}"))?;

    let mut worst_res = 0.0f64;
    for _ in 0..50 {
        let (n, m) = (r.gen_range(1..=6), r.gen_range(1..=4));
        let steps = r.gen_range(0..=20);
        let sys = KktSystem {
            a: (0..steps).map(|_| DMatrix::from_fn(n, n, |_, _| r.gen_range(-1.0..1.0))).collect(),
            b: (0..steps).map(|_| DMatrix::from_fn(n, m, |_, _| r.gen_range(-1.0..1.0))).collect(),
            q: (0..steps).map(|_| random_pd(n, 0.1, &mut r)).collect(),
            r: (0..steps).map(|_| random_pd(m, 0.1, &mut r)).collect(),
            terminal: random_pd(n, 0.1, &mut r),
            s0: uniform_vec(n, -3.0, 3.0, &mut r),
            w: (0..steps).map(|_| uniform_vec(n, -1.0, 1.0, &mut r)).collect(),
        };
        let (res, rhs) = sys.residual(&solve_kkt(&sys).unwrap());
        worst_res = worst_res.max(res / rhs.max(1.0));
    }
    ensure(worst_res <= 1e-9, || format!("KKT residual {worst_res:e}"))?;
    Ok(format!(
        "box gap {worst_gap:.1e} (slowest {slowest:.3} s), unconstrained {worst_uncon:.1e}, KKT residual {worst_res:.1e}"
    ))
}

fn mpc_optimality() -> Check {
    let mut r = rng(103);
    let settings = MpcSettings {
        qp: AdmmSettings {
            tol: 1e-10,
            ..AdmmSettings::default()
        },
        ..MpcSettings::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m = r.gen_range(1..=3);
        let station = wide_station(m, &mut r);
        let horizon = r.gen_range(2..=30);
        let s0 = uniform_vec(2 * m, -10.0, 10.0, &mut r);
        let w: Vec<_> = (0..horizon - 1).map(|_| uniform_vec(2 * m, -2.0, 2.0, &mut r)).collect();
        let mut s = s0.clone();
        let mut closed = 0.0;
        for t in 0..horizon {
            let preds = PredictionSet {
                t,
                episode_len: horizon,
                w: w[t..].to_vec(),
                reset: vec![vec![false; m]; horizon - 1 - t],
            };
            let (d, _) = mpc_action(&station, &s, &preds, &settings, None).unwrap();
            closed += station.costs.stage_cost(t, &s, &d.action);
            if t + 1 < horizon {
                s = station.dynamics.apply_a(t, &s) + station.dynamics.apply_b(t, &d.action) + &w[t];
            }
        }
        let sys = offline_system(&station, &s0, &w);
        let offline = sys.objective(&solve_kkt(&sys).unwrap());
        worst = worst.max((closed - offline).abs() / offline.abs().max(1.0));
    }
    ensure(worst <= 1e-6, || format!("closed loop off by {worst:e}"))?;
    Ok(format!("20 instances, worst relative gap {worst:.1e}"))
}

fn dynamics_equivalence() -> Check {
    let mut r = rng(104);
    for episode in 0..1000 {
        let station = fuzzed_station(&mut r);
        let m = station.m();
        let profile = if r.gen_bool(0.5) { Profile::Pre } else { Profile::Post };
        let params = GeneratorParams::new(profile, r.gen_range(0..12), m, 144, r.gen());
        let (sessions, _) = generate_sessions(&params).map_err(|e| e.to_string())?;
        let solar = SolarModel::new(r.gen_range(0.0..12.0), 0.05).unwrap();
        let mut direct = DVector::zeros(2 * m);
        let mut shifted = direct.clone();
        for t in 0..144 {
            let a = uniform_vec(m, -4.0, 4.0, &mut r);
            let h = solar.sample(&mut r);
            let events = Events::for_transition(&sessions, t);
            direct = station.transition(t, &direct, &a, &events, h);
            shifted = station.transition_reparameterized(t, &shifted, &a, &events, h);
            ensure(direct == shifted, || format!("episode {episode} step {t}: {direct} vs {shifted}"))?;
        }
    }
    Ok("1000 episodes × 144 steps identical".into())
}

fn numeric_grad(net: &Mlp, f: impl Fn(&Mlp) -> f64) -> DVector<f64> {
    const H: f64 = 1e-5;
    let p0 = net.params();
    let mut probe = net.clone();
    DVector::from_fn(p0.len(), |i, _| {
        let mut p = p0.clone();
        p[i] = p0[i] + H;
        probe.set_params(&p).unwrap();
        let up = f(&probe);
        p[i] = p0[i] - H;
        probe.set_params(&p).unwrap();
        (up - f(&probe)) / (2.0 * H)
    })
}

fn gradient_checks() -> Check {
    let mut r = rng(105);
    let mut worst = 0.0f64;
    let widths = |input: usize, output: usize, r: &mut rand_chacha::ChaCha8Rng| {
        let mut w = vec![input];
        for _ in 0..r.gen_range(1..=3) {
            w.push(r.gen_range(1..=8));
        }
        w.push(output);
        w
    };
    for _ in 0..50 {
        let m = r.gen_range(1..=3);
        let n = 2 * m;
        let features = FeatureMap {
            state_scale: uniform_vec(n, 0.5, 5.0, &mut r),
            action_scale: r.gen_range(0.5..3.0),
            horizon: 20,
        };
        let d = features.state_dim();
        let actor = Mlp::new(&widths(d, m, &mut r), Head::Squash { lo: -2.0, hi: 2.0 }, &mut r);
        let critic = Mlp::new(&widths(d + m, 1, &mut r), Head::Identity, &mut r);
        let count = r.gen_range(1..=8);
        let batch: Vec<Transition> = (0..count)
            .map(|_| Transition {
                state: uniform_vec(n, -3.0, 3.0, &mut r),
                t: r.gen_range(0..20),
                action: uniform_vec(m, -2.0, 2.0, &mut r),
                next_state: uniform_vec(n, -3.0, 3.0, &mut r),
                cost: r.gen_range(0.0..2.0),
                done: false,
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let y = uniform_vec(count, -2.0, 2.0, &mut r);
        let rel = |a: &DVector<f64>, b: &DVector<f64>| (a - b).norm() / a.norm().max(b.norm()).max(1e-12);

        let (_, g) = critic_loss_grad(&critic, &features, &refs, &y).unwrap();
        let fd = numeric_grad(&critic, |net| critic_loss_grad(net, &features, &refs, &y).unwrap().0);
        worst = worst.max(rel(&g.flatten(), &fd));

        let states: Vec<_> = batch.iter().map(|tr| (&tr.state, tr.t)).collect();
        let (_, g) = actor_objective_grad(&actor, &critic, &features, &states).unwrap();
        let fd = numeric_grad(&actor, |net| actor_objective_grad(net, &critic, &features, &states).unwrap().0);
        worst = worst.max(rel(&g.flatten(), &fd));
    }
    ensure(worst <= 1e-4, || format!("worst relative error {worst:e}"))?;
    Ok(format!("50 configurations, actor and critic, worst relative error {worst:.1e}"))
}

fn experiment_grid(cfg: &ExperimentConfig) -> Result<(Check, Check), String> {
    let start = Instant::now();
    let outcome = run_experiment(cfg).map_err(|e| e.to_string())?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    if !outcome.manifest.failures.is_empty() {
        return Err(format!("{} cells failed", outcome.manifest.failures.len()));
    }
    let row = |b: Beta| outcome.summary.iter().find(|s| s.beta == b).cloned();
    let (b0, b1, b10, binf) = match (
        row(Beta::Finite(0.0)),
        row(Beta::Finite(1.0)),
        row(Beta::Finite(10.0)),
        row(Beta::Infinite),
    ) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => return Err("β grid must contain 0, 1, 10 and ∞".into()),
    };
    let inf_rewards: Vec<f64> = outcome
        .rewards
        .iter()
        .filter(|r| r.beta == Beta::Infinite)
        .map(|r| r.reward_norm)
        .collect();
    let constant = inf_rewards.windows(2).all(|w| w[0] == w[1]);
    let a = b1.avg_reward_post > b0.avg_reward_post;
    let sd = |s: Option<f64>| s.unwrap_or(0.0);
    let b = sd(b10.sd_post) < sd(b0.sd_post);
    let detail = format!(
        "{} episodes, shift {}, {} seeds, {minutes:.1} min: (a) post mean β=1 {:.4} vs β=0 {:.4}; (b) post sd β=10 {:.4} vs β=0 {:.4}; (c) β=∞ normalized reward {} across {} episodes",
        cfg.episodes,
        cfg.shift_episode,
        cfg.seeds.len(),
        b1.avg_reward_post,
        b0.avg_reward_post,
        sd(b10.sd_post),
        sd(b0.sd_post),
        if constant { format!("constant at {}", inf_rewards[0]) } else { "varies".into() },
        inf_rewards.len(),
    );
    let seven = if a && b && constant && binf.sd_post.is_none() { Ok(detail) } else { Err(detail) };

    let lambdas: Vec<(Beta, f64)> = outcome.summary.iter().map(|s| (s.beta, s.avg_lambda)).collect();
    let listing = lambdas.iter().map(|(b, l)| format!("β={b}: {l:.4}")).collect::<Vec<_>>().join(", ");
    let monotone = lambdas.windows(2).all(|w| w[1].1 <= w[0].1);
    let eight = if monotone && b0.avg_lambda == 1.0 && binf.avg_lambda == 0.0 {
        Ok(listing)
    } else {
        Err(listing)
    };
    Ok((seven, eight))
}

fn theory_ops() -> Check {
    let mut r = rng(106);
    for _ in 0..200 {
        let horizon = r.gen_range(1..=6);
        let (mdp, next) = deterministic_mdp(4, 2, horizon, &mut r);
        let noise: Vec<DMatrix<f64>> = (0..horizon).map(|_| DMatrix::from_fn(4, 2, |_, _| r.gen_range(-2.0..2.0))).collect();
        let q_tilde = |t: usize, s: usize, a: usize| enumerate_q(&mdp, &next, t, s, a) * 0.9 + noise[t][(s, a)];
        let mut total = 0.0;
        for t in 0..horizon {
            let mut worst: f64 = 0.0;
            for s in 0..4 {
                for a in 0..2 {
                    worst = worst.max((q_tilde(t, s, a) - enumerate_q(&mdp, &next, t, s, a)).abs());
                }
            }
            total += worst;
        }
        let eps = q_error_epsilon(q_tilde, &mdp).map_err(|e| e.to_string())?;
        ensure(eps == total / horizon as f64, || format!("ε {eps} vs enumeration {}", total / horizon as f64))?;
    }

    let mut worst_sigma = 0.0f64;
    for (delta, steps) in [(1.0 / 6.0, 10), (1.0 / 6.0, 25), (1e3 / 6.0, 10)] {
        let spec = DynamicsSpec::constant(2, delta, 0.8, 0.2);
        let got = verify_stabilizability(&spec, &[(0, steps)], 0.0).unwrap().min;
        let oracle = jacobi_singular_values(phi_by_hand(2, delta, 0.8, 0.2, steps).transpose())[0];
        worst_sigma = worst_sigma.max((got - oracle).abs());
    }
    ensure(worst_sigma <= 1e-8, || format!("σ_min off by {worst_sigma:e}"))?;

    let c = roe_mpc_bound(
        &BoundInputs {
            a_bar: 1.0,
            b_bar: 0.2,
            w_bar: 1.0,
            mu: 0.1,
            xi: 1.0,
            sigma: 1.0,
        },
        None,
    )
    .map_err(|e| e.to_string())?;
    let pairs = [
        (c.sigma_lower, 0.40166320883712187),
        (c.sigma_upper, 4.525483399593905),
        (c.lambda_bar, 0.9148546878923763),
        (c.c, 86.72289055870262),
        (c.bound, 318369459865.3465),
    ];
    let worst_bound = pairs.iter().map(|(g, w)| ((g - w) / w).abs()).fold(0.0, f64::max);
    ensure(worst_bound <= 1e-12, || format!("bound constants off by {worst_bound:e}"))?;
    Ok(format!(
        "ε exact on 200 toy MDPs; σ_min within {worst_sigma:.1e} of Jacobi SVD; bound constants within {worst_bound:.1e}"
    ))
}

fn estimate_bound() -> Check {
    let mut r = rng(107);
    let mut worst_ratio = 0.0f64;
    for case in 0..1000 {
        let m = r.gen_range(1..=3);
        let station = wide_station(m, &mut r);
        let t = r.gen_range(0..100);
        let s = uniform_vec(2 * m, -20.0, 20.0, &mut r);
        let a = uniform_vec(m, -2.0, 2.0, &mut r);
        let arrivals = DVector::from_fn(m, |_, _| if r.gen_bool(0.3) { r.gen_range(1.0..30.0) } else { 0.0 });
        let reset: Vec<bool> = (0..m).map(|_| r.gen_bool(0.3)).collect();
        let events = Events {
            arrived: arrivals.iter().map(|&k| (k > 0.0).then_some(0)).collect(),
            departed: reset.clone(),
            arrivals: arrivals.clone(),
            reset: reset.clone(),
        };
        let solar = r.gen_range(0.0..10.0);
        let truth = station.transition(t, &s, &a, &events, solar);
        let w = station.reparameterized_perturbation(t, &s, &a, &events, solar);
        let mut w_hat = DVector::from_fn(2 * m, |i, _| if i < m { 0.0 } else { -station.dynamics.delta * solar });
        for i in 0..m {
            if arrivals[i] > 0.0 {
                w_hat[i] += arrivals[i] + r.gen_range(-8.0..8.0);
            }
        }
        let mut reset_hat = reset.clone();
        if r.gen_bool(0.2) {
            let i = r.gen_range(0..m);
            reset_hat[i] = !reset_hat[i];
        }
        let estimate = estimate_state(&station, t, &s, &a, &w_hat, &reset_hat, EstimatorClip::ResetsOnly);
        let base = station.dynamics.apply_a(t, &s) + station.dynamics.apply_b(t, &a);
        let w_bar = w.norm().max((&estimate - &base).norm());
        let err = (&estimate - &truth).norm();
        ensure(err <= 2.0 * w_bar + 1e-9, || format!("case {case}: {err} > 2 × {w_bar}"))?;
        if w_bar > 0.0 {
            worst_ratio = worst_ratio.max(err / w_bar);
        }
    }
    Ok(format!("1000 cases, worst ‖s̃ − s‖ / W̄ = {worst_ratio:.3} (limit 2)"))
}

fn report(id: &str, name: &str, result: &Check) -> bool {
    match result {
        Ok(msg) => println!("PASS {id} {name}: {msg}"),
        Err(msg) => println!("FAIL {id} {name}: {msg}"),
    }
    result.is_ok()
}

fn main() -> ExitCode {
    let mut all = true;
    all &= report("1", "endpoint equivalence", &endpoints());
    all &= report("2", "projection invariants", &projection_suite());
    all &= report("3", "QP correctness", &qp_correctness());
    all &= report("4", "MPC optimality", &mpc_optimality());
    all &= report("5", "dynamics equivalence", &dynamics_equivalence());
    all &= report("6", "gradient checks", &gradient_checks());

    let dir = tempfile::TempDir::new().expect("temporary directory");
    let full = std::env::var_os("ACCEPTANCE_FULL").is_some();
    let cfg = ExperimentConfig {
        out_dir: dir.path().join("grid").to_string_lossy().into_owned(),
        ..if full {
            ExperimentConfig::default()
        } else {
            ExperimentConfig {
                episodes: 120,
                shift_episode: 80,
                seeds: (0..5).collect(),
                ..ExperimentConfig::default()
            }
        }
    };
    let label = if full { "(full run)" } else { "(scaled run)" };
    match experiment_grid(&cfg) {
        Ok((seven, eight)) => {
            all &= report("7", &format!("directional reward ordering {label}"), &seven);
            all &= report("8", "trust coefficient monotone in β", &eight);
        }
        Err(e) => {
            all &= report("7", "directional reward ordering", &Err(e.clone()));
            all &= report("8", "trust coefficient monotone in β", &Err(e));
        }
    }

    all &= report("9", "theory operations", &theory_ops());
    all &= report("10", "state-estimate bound", &estimate_bound());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
