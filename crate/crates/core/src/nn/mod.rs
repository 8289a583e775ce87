//! Learned policy: dense networks with reverse-mode gradients, replay, and
//! actor-critic updates under the cost-to-go convention.

mod ddpg;
mod mlp;
mod replay;

pub use ddpg::{
    actor_objective_grad, actor_update, critic_loss_grad, critic_update, q_eval, soft_update, td_targets, Agent,
    DdpgParams, FeatureMap, LearnedPolicy, Learner, Optimizer, OptimizerKind,
};
pub use mlp::{Cache, Gradient, Head, Mlp};
pub use replay::{ReplayBuffer, Transition};
