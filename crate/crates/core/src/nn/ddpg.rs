use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::mlp::{Gradient, Head, Mlp};
use super::replay::{ReplayBuffer, Transition};
use crate::env::{Observation, Policy, PolicyView, Station};
use crate::error::{Error, Result};
use crate::model::SpaceSpec;
use crate::mpc::{EstimatorClip, StateEstimator};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: usize) -> Self {
        Self {
            kind,
            lr,
            m: DVector::zeros(params),
            v: DVector::zeros(params),
            steps: 0,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grad: &Gradient) -> Result<()> {
        let g = grad.flatten();
        let mut p = net.params();
        match self.kind {
            OptimizerKind::Sgd => p.axpy(-self.lr, &g, 1.0),
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                self.steps += 1;
                let c1 = 1.0 - B1.powi(self.steps);
                let c2 = 1.0 - B2.powi(self.steps);
                for i in 0..p.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
                    p[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
        net.set_params(&p)
    }
}

/// Network inputs: the state divided by per-coordinate scales plus the
/// elapsed fraction of the episode, and actions divided by their bound.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub state_scale: DVector<f64>,
    pub action_scale: f64,
    pub horizon: usize,
}

impl FeatureMap {
    pub fn for_space(space: &SpaceSpec, horizon: usize) -> Self {
        let m = space.m;
        let state_scale = DVector::from_fn(2 * m, |i, _| {
            let bound = space.state_hi[i].abs().max(space.state_lo[i].abs());
            if bound.is_finite() && bound > 0.0 {
                bound
            } else if i < m {
                100.0
            } else {
                space.rate_limit.max(1.0)
            }
        });
        Self {
            state_scale,
            action_scale: space.action_hi.abs().max(space.action_lo.abs()).max(1e-12),
            horizon,
        }
    }

    pub fn identity(n: usize, horizon: usize) -> Self {
        Self {
            state_scale: DVector::from_element(n, 1.0),
            action_scale: 1.0,
            horizon,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_scale.len() + 1
    }

    fn fill_state(&self, s: &DVector<f64>, t: usize, out: &mut [f64]) {
        for (o, (v, k)) in out.iter_mut().zip(s.iter().zip(self.state_scale.iter())) {
            *o = v / k;
        }
        out[self.state_scale.len()] = t as f64 / self.horizon.max(1) as f64;
    }

    pub fn states(&self, batch: &[(&DVector<f64>, usize)]) -> DMatrix<f64> {
        let d = self.state_dim();
        let mut x = DMatrix::zeros(d, batch.len());
        for (j, (s, t)) in batch.iter().enumerate() {
            self.fill_state(s, *t, x.column_mut(j).as_mut_slice());
        }
        x
    }

    /// Critic input from state features and raw actions.
    pub fn critic_input(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
        let d = states.nrows();
        let m = actions.nrows();
        let mut x = DMatrix::zeros(d + m, states.ncols());
        x.rows_mut(0, d).copy_from(states);
        x.rows_mut(d, m).copy_from(&(actions / self.action_scale));
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdpgParams {
    pub hidden: Vec<usize>,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch: usize,
    pub buffer: usize,
    pub tau_soft: f64,
    /// Exploration sd as a fraction of the action range, decayed linearly.
    pub noise_start: f64,
    pub noise_end: f64,
    pub noise_decay_steps: usize,
    /// Multiplies stage costs before they reach the learner.
    pub cost_scale: f64,
    pub optimizer: OptimizerKind,
    /// Learner updates per environment step once the buffer is large enough.
    pub updates_per_step: usize,
}

impl Default for DdpgParams {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            batch: 128,
            buffer: 1_000_000,
            tau_soft: 0.005,
            noise_start: 0.1,
            noise_end: 0.01,
            noise_decay_steps: 100_000,
            cost_scale: 1e-3,
            optimizer: OptimizerKind::Adam,
            updates_per_step: 1,
        }
    }
}

impl DdpgParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_soft > 0.0 && self.tau_soft <= 1.0) {
            return Err(Error::Validation(format!("soft-update rate {} is outside (0, 1]", self.tau_soft)));
        }
        if self.batch == 0 || self.batch > self.buffer {
            return Err(Error::Validation(format!(
                "batch size {} must be positive and at most the buffer size {}",
                self.batch, self.buffer
            )));
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0 && self.cost_scale > 0.0) {
            return Err(Error::Validation("learning rates and cost scale must be positive".into()));
        }
        Ok(())
    }
}

/// `Q(s, a)` for one state-action pair.
pub fn q_eval(critic: &Mlp, features: &FeatureMap, s: &DVector<f64>, t: usize, a: &DVector<f64>) -> Result<f64> {
    let x = features.critic_input(&features.states(&[(s, t)]), &DMatrix::from_column_slice(a.len(), 1, a.as_slice()));
    Ok(critic.forward_batch(&x)?[(0, 0)])
}

/// Regression targets `c + Q_old(s', π_old(s'))`, or `c` at terminal steps.
pub fn td_targets(batch: &[&Transition], features: &FeatureMap, critic_target: &Mlp, actor_target: &Mlp) -> Result<DVector<f64>> {
    let next: Vec<_> = batch.iter().map(|tr| (&tr.next_state, tr.t + 1)).collect();
    let xs = features.states(&next);
    let a_next = actor_target.forward_batch(&xs)?;
    let q_next = critic_target.forward_batch(&features.critic_input(&xs, &a_next))?;
    Ok(DVector::from_fn(batch.len(), |j, _| {
        let tr = batch[j];
        if tr.done {
            tr.cost
        } else {
            tr.cost + q_next[(0, j)]
        }
    }))
}

/// Mean squared residual `Q(s, a) − y` and its parameter gradient.
pub fn critic_loss_grad(
    critic: &Mlp,
    features: &FeatureMap,
    batch: &[&Transition],
    targets: &DVector<f64>,
) -> Result<(f64, Gradient)> {
    let states: Vec<_> = batch.iter().map(|tr| (&tr.state, tr.t)).collect();
    let xs = features.states(&states);
    let m = batch[0].action.len();
    let acts = DMatrix::from_fn(m, batch.len(), |i, j| batch[j].action[i]);
    let (q, cache) = critic.forward_cached(&features.critic_input(&xs, &acts))?;
    let b = batch.len() as f64;
    let resid = DMatrix::from_fn(1, batch.len(), |_, j| q[(0, j)] - targets[j]);
    let loss = resid.norm_squared() / b;
    let (grad, _) = critic.backward(&cache, &(resid * (2.0 / b)))?;
    Ok((loss, grad))
}

/// One gradient step on the critic toward the TD-regression targets.
/// Returns the loss before the step.
pub fn critic_update(
    critic: &mut Mlp,
    opt: &mut Optimizer,
    features: &FeatureMap,
    batch: &[&Transition],
    critic_target: &Mlp,
    actor_target: &Mlp,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientBuffer { have: 0, need: 1 });
    }
    let y = td_targets(batch, features, critic_target, actor_target)?;
    let (loss, grad) = critic_loss_grad(critic, features, batch, &y)?;
    opt.step(critic, &grad)?;
    Ok(loss)
}

/// Mean `Q(s, π(s))` over the batch states and its actor gradient.
pub fn actor_objective_grad(
    actor: &Mlp,
    critic: &Mlp,
    features: &FeatureMap,
    states: &[(&DVector<f64>, usize)],
) -> Result<(f64, Gradient)> {
    let xs = features.states(states);
    let (acts, a_cache) = actor.forward_cached(&xs)?;
    let (q, q_cache) = critic.forward_cached(&features.critic_input(&xs, &acts))?;
    let b = states.len() as f64;
    let objective = q.sum() / b;
    let (_, dx) = critic.backward(&q_cache, &DMatrix::from_element(1, states.len(), 1.0 / b))?;
    let d = xs.nrows();
    let m = acts.nrows();
    let da = dx.rows(d, m) / features.action_scale;
    let (grad, _) = actor.backward(&a_cache, &da)?;
    Ok((objective, grad))
}

/// One descent step of the actor on the critic. Returns the objective
/// before the step.
pub fn actor_update(actor: &mut Mlp, opt: &mut Optimizer, critic: &Mlp, features: &FeatureMap, batch: &[&Transition]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientBuffer { have: 0, need: 1 });
    }
    let states: Vec<_> = batch.iter().map(|tr| (&tr.state, tr.t)).collect();
    let (obj, grad) = actor_objective_grad(actor, critic, features, &states)?;
    opt.step(actor, &grad)?;
    Ok(obj)
}

pub fn soft_update(target: &mut Mlp, net: &Mlp, tau: f64) -> Result<()> {
    target.soft_update_from(net, tau)
}

/// Actor, critic, their targets, and the replay buffer of one cell.
#[derive(Debug, Clone)]
pub struct Learner {
    pub params: DdpgParams,
    pub features: FeatureMap,
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub buffer: ReplayBuffer,
    actor_opt: Optimizer,
    critic_opt: Optimizer,
    rng: ChaCha8Rng,
    /// Environment steps taken; drives the exploration schedule.
    pub env_steps: usize,
    pub updates: usize,
    action_lo: f64,
    action_hi: f64,
    m: usize,
}

impl Learner {
    pub fn new(space: &SpaceSpec, horizon: usize, params: DdpgParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let features = FeatureMap::for_space(space, horizon);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = space.m;
        let mut actor_w = vec![features.state_dim()];
        actor_w.extend(&params.hidden);
        actor_w.push(m);
        let mut critic_w = vec![features.state_dim() + m];
        critic_w.extend(&params.hidden);
        critic_w.push(1);
        let head = Head::Squash {
            lo: space.action_lo,
            hi: space.action_hi,
        };
        let actor = Mlp::new(&actor_w, head, &mut rng);
        let critic = Mlp::new(&critic_w, Head::Identity, &mut rng);
        Ok(Self {
            actor_opt: Optimizer::new(params.optimizer, params.lr_actor, actor.num_params()),
            critic_opt: Optimizer::new(params.optimizer, params.lr_critic, critic.num_params()),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            buffer: ReplayBuffer::new(params.buffer),
            features,
            params,
            rng,
            env_steps: 0,
            updates: 0,
            action_lo: space.action_lo,
            action_hi: space.action_hi,
            m,
        })
    }

    /// Deterministic actor output.
    pub fn act(&self, s: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        let x = self.features.states(&[(s, t)]);
        Ok(self.actor.forward_batch(&x)?.column(0).into_owned())
    }

    pub fn noise_sd(&self) -> f64 {
        let p = &self.params;
        let frac = if p.noise_decay_steps == 0 {
            1.0
        } else {
            (self.env_steps as f64 / p.noise_decay_steps as f64).min(1.0)
        };
        (p.noise_start + (p.noise_end - p.noise_start) * frac) * (self.action_hi - self.action_lo)
    }

    /// Actor output plus Gaussian exploration noise; advances the schedule.
    pub fn explore(&mut self, s: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        let mut a = self.act(s, t)?;
        let sd = self.noise_sd();
        if sd > 0.0 {
            let normal = Normal::new(0.0, sd).expect("positive sd");
            for v in a.iter_mut() {
                *v += normal.sample(&mut self.rng);
            }
        }
        self.env_steps += 1;
        Ok(a)
    }

    /// `Q(s, a)` with the online critic, in scaled cost units.
    pub fn q(&self, s: &DVector<f64>, t: usize, a: &DVector<f64>) -> Result<f64> {
        q_eval(&self.critic, &self.features, s, t, a)
    }

    /// `c_{t−1} + Q(s_t, π(s_t)) − Q(s_{t−1}, a_{t−1})` with `c` in raw units.
    pub fn td_error(&self, s: &DVector<f64>, t: usize, s_prev: &DVector<f64>, a_prev: &DVector<f64>, cost_prev: f64) -> Result<f64> {
        let a_next = self.act(s, t)?;
        Ok(cost_prev * self.params.cost_scale + self.q(s, t, &a_next)? - self.q(s_prev, t - 1, a_prev)?)
    }

    pub fn remember(&mut self, state: DVector<f64>, t: usize, action: DVector<f64>, next_state: DVector<f64>, cost: f64, done: bool) {
        debug_assert_eq!(action.len(), self.m);
        self.buffer.push(Transition {
            state,
            t,
            action,
            next_state,
            cost: cost * self.params.cost_scale,
            done,
        });
    }

    /// Critic step, actor step, and target tracking on one sampled batch.
    /// Returns `None` until the buffer holds a full batch.
    pub fn train_step(&mut self) -> Result<Option<(f64, f64)>> {
        if self.buffer.len() < self.params.batch {
            return Ok(None);
        }
        let batch = self.buffer.sample(self.params.batch, &mut self.rng)?;
        let loss = critic_update(
            &mut self.critic,
            &mut self.critic_opt,
            &self.features,
            &batch,
            &self.critic_target,
            &self.actor_target,
        )?;
        let obj = actor_update(&mut self.actor, &mut self.actor_opt, &self.critic, &self.features, &batch)?;
        soft_update(&mut self.critic_target, &self.critic, self.params.tau_soft)?;
        soft_update(&mut self.actor_target, &self.actor, self.params.tau_soft)?;
        self.updates += 1;
        Ok(Some((loss, obj)))
    }

    pub fn checkpoint_text(&self) -> String {
        let mut out = String::from("ddpg v1\n");
        for (name, net) in [
            ("actor", &self.actor),
            ("critic", &self.critic),
            ("actor_target", &self.actor_target),
            ("critic_target", &self.critic_target),
        ] {
            out.push_str(&format!("[{name}]\n"));
            out.push_str(&net.to_text());
        }
        out
    }

    /// Restores network parameters from [`Learner::checkpoint_text`].
    pub fn restore_text(&mut self, text: &str) -> Result<()> {
        let mut lines = text.lines();
        if lines.next() != Some("ddpg v1") {
            return Err(Error::Validation("checkpoint is missing its version line".into()));
        }
        let rest: Vec<&str> = lines.collect();
        let mut sections: Vec<(String, String)> = Vec::new();
        for line in rest {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                sections.push((name.to_string(), String::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push_str(line);
                body.push('\n');
            }
        }
        for (name, body) in sections {
            let net = Mlp::from_text(&body)?;
            let slot = match name.as_str() {
                "actor" => &mut self.actor,
                "critic" => &mut self.critic,
                "actor_target" => &mut self.actor_target,
                "critic_target" => &mut self.critic_target,
                other => return Err(Error::Validation(format!("unknown checkpoint section {other}"))),
            };
            if slot.widths() != net.widths() {
                return Err(Error::Dimension(format!("checkpoint section {name} has a different shape")));
            }
            *slot = net;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_text())?;
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.restore_text(&text)
    }
}

/// Bookkeeping that turns per-step observations into stored transitions
/// and learner updates.
#[derive(Debug, Clone)]
pub struct Agent {
    pub learner: Learner,
    pub learning: bool,
    prev: Option<(DVector<f64>, usize, DVector<f64>)>,
    prev_cost: f64,
}

impl Agent {
    pub fn new(learner: Learner) -> Self {
        Self {
            learner,
            learning: true,
            prev: None,
            prev_cost: 0.0,
        }
    }

    pub fn reset_episode(&mut self) {
        self.prev = None;
        self.prev_cost = 0.0;
    }

    /// Previous estimated state, step, applied action, and cost.
    pub fn previous(&self) -> Option<(&DVector<f64>, usize, &DVector<f64>, f64)> {
        self.prev.as_ref().map(|(s, t, a)| (s, *t, a, self.prev_cost))
    }

    /// Stores the transition that ended in `s` and runs the learner updates.
    pub fn observe(&mut self, s: &DVector<f64>, t: usize) -> Result<()> {
        if !self.learning {
            return Ok(());
        }
        if let Some((ps, pt, pa)) = self.prev.clone() {
            debug_assert_eq!(pt + 1, t);
            self.learner.remember(ps, pt, pa, s.clone(), self.prev_cost, false);
        }
        for _ in 0..self.learner.params.updates_per_step {
            self.learner.train_step()?;
        }
        Ok(())
    }

    /// Records the applied action and its cost; a terminal step is stored
    /// immediately with no successor.
    pub fn record(&mut self, s: &DVector<f64>, t: usize, applied: &DVector<f64>, cost: f64, done: bool) {
        if done {
            if self.learning {
                self.learner.remember(s.clone(), t, applied.clone(), s.clone(), cost, true);
            }
            self.prev = None;
        } else {
            self.prev = Some((s.clone(), t, applied.clone()));
            self.prev_cost = cost;
        }
    }
}

/// The learned policy alone: estimator, exploration, and online training.
#[derive(Debug, Clone)]
pub struct LearnedPolicy {
    pub station: Station,
    pub estimator: StateEstimator,
    pub agent: Agent,
    current: Option<(DVector<f64>, usize)>,
}

impl LearnedPolicy {
    pub fn new(station: Station, clip: EstimatorClip, learner: Learner) -> Self {
        Self {
            estimator: StateEstimator::new(station.m(), clip),
            station,
            agent: Agent::new(learner),
            current: None,
        }
    }
}

impl Policy for LearnedPolicy {
    fn reset(&mut self) {
        self.estimator.reset();
        self.agent.reset_episode();
        self.current = None;
    }

    fn act(&mut self, view: &PolicyView<'_>) -> Result<DVector<f64>> {
        let s = self.estimator.observe(&self.station, view).clone();
        self.agent.observe(&s, view.t)?;
        let a = self.agent.learner.explore(&s, view.t)?;
        self.current = Some((s, view.t));
        Ok(a)
    }

    fn feedback(&mut self, applied: &DVector<f64>, _observed: &Observation, cost: f64, done: bool) {
        self.estimator.record_action(applied);
        if let Some((s, t)) = self.current.take() {
            self.agent.record(&s, t, applied, cost, done);
        }
    }
}
