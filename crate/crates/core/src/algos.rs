//! Agents: the barrier-penalised actor (CSAC-LB), SAC-Lagrangian and
//! reward-shaped SAC, sharing one update procedure.
//!
//! Every agent trains a reward double-Q and a cost double-Q. They differ only
//! in how the cost critic enters the actor loss:
//!
//! | agent     | per-sample actor loss                                     |
//! |-----------|-----------------------------------------------------------|
//! | CSAC-LB   | `alpha logp - min Qr + barrier(max Qc)`                   |
//! | SAC-Lag   | `alpha logp - min Qr + beta * max Qc`                     |
//! | SAC-RS    | `alpha logp - min Qr` (the penalty lives in the reward)   |

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrier::{BarrierConfig, BarrierError};
use crate::nn::{polyak_update, AdamState, DenseNet, NetDocument, NnError};
use crate::rng::Rng;
use crate::sac::{
    cost_critic_target, join, reward_critic_target, standard_normal, Batch, DoubleQ,
    EntropyTemperature, GaussianPolicy, ReplayBuffer,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error("non-finite {what} ({value})")]
    NonFinite { what: &'static str, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlgoKind {
    #[serde(rename = "csac_lb", alias = "csac-lb")]
    CsacLb,
    #[serde(rename = "sac_lag", alias = "sac-lag")]
    SacLag,
    #[serde(rename = "sac_rs", alias = "sac-rs")]
    SacRs,
}

impl AlgoKind {
    pub fn name(self) -> &'static str {
        match self {
            AlgoKind::CsacLb => "csac_lb",
            AlgoKind::SacLag => "sac_lag",
            AlgoKind::SacRs => "sac_rs",
        }
    }
}

impl fmt::Display for AlgoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgoKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csac_lb" | "csac-lb" => Ok(AlgoKind::CsacLb),
            "sac_lag" | "sac-lag" => Ok(AlgoKind::SacLag),
            "sac_rs" | "sac-rs" => Ok(AlgoKind::SacRs),
            other => Err(format!(
                "unknown algorithm '{other}' (expected csac-lb, sac-lag or sac-rs)"
            )),
        }
    }
}

/// Lagrange multiplier of SAC-Lag, kept nonnegative by projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SacLagState {
    pub beta: f64,
    pub beta_lr: f64,
}

impl SacLagState {
    pub fn new(beta_lr: f64) -> Self {
        Self { beta: 0.0, beta_lr }
    }

    /// Projected gradient descent on `beta * (d - mean_qc)`.
    pub fn update(&mut self, mean_qc: f64, cost_limit: f64) {
        self.beta = (self.beta + self.beta_lr * (mean_qc - cost_limit)).max(0.0);
    }
}

pub fn saclag_beta_update(state: SacLagState, mean_qc: f64, cost_limit: f64) -> SacLagState {
    let mut next = state;
    next.update(mean_qc, cost_limit);
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsConfig {
    pub penalty: f64,
}

impl Default for RsConfig {
    fn default() -> Self {
        Self { penalty: -30.0 }
    }
}

/// A violating step earns the penalty and ends the episode.
pub fn rs_shape(reward: f64, cost: f64, done: bool, rs: &RsConfig) -> (f64, bool) {
    if cost > 0.0 {
        (reward + rs.penalty, true)
    } else {
        (reward, done)
    }
}

/// How the cost critic enters the actor objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Barrier(BarrierConfig),
    Lagrangian { state: SacLagState, cost_limit: f64 },
    Shaped(RsConfig),
}

impl Objective {
    pub fn kind(&self) -> AlgoKind {
        match self {
            Objective::Barrier(_) => AlgoKind::CsacLb,
            Objective::Lagrangian { .. } => AlgoKind::SacLag,
            Objective::Shaped(_) => AlgoKind::SacRs,
        }
    }
}

/// Per-sample objective of the barrier actor.
pub fn csaclb_objective(logp: f64, q_r: f64, q_c: f64, alpha: f64, cfg: &BarrierConfig) -> f64 {
    alpha * logp - q_r + cfg.value(q_c)
}

/// Per-sample objective of the Lagrangian actor.
pub fn saclag_objective(logp: f64, q_r: f64, q_c: f64, alpha: f64, beta: f64) -> f64 {
    alpha * logp - q_r + beta * q_c
}

#[derive(Debug, Clone)]
pub struct ActorLoss {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub logp: Array1<f64>,
    /// Batch mean of `max(Qc1, Qc2)` at the sampled actions, when a cost
    /// critic took part.
    pub mean_qc: Option<f64>,
}

/// Accumulates `dL/da` through whichever member of a critic pair was
/// selected per row.
fn pair_action_grad(
    pair: &DoubleQ,
    x: ArrayView2<'_, f64>,
    obs_dim: usize,
    pick_max: bool,
    weight: impl Fn(usize, f64) -> f64,
    d_actions: &mut Array2<f64>,
) -> Result<Array1<f64>, NnError> {
    let n = x.nrows();
    let (o1, c1) = pair.q1.forward_cached(x)?;
    let (o2, c2) = pair.q2.forward_cached(x)?;
    let mut up1 = Array2::zeros((n, 1));
    let mut up2 = Array2::zeros((n, 1));
    let mut chosen = Array1::zeros(n);
    for i in 0..n {
        let (a, b) = (o1[(i, 0)], o2[(i, 0)]);
        let first = if pick_max { a >= b } else { a <= b };
        let v = if first { a } else { b };
        chosen[i] = v;
        let w = weight(i, v);
        if first {
            up1[(i, 0)] = w;
        } else {
            up2[(i, 0)] = w;
        }
    }
    for (net, cache, up) in [(&pair.q1, &c1, &up1), (&pair.q2, &c2, &up2)] {
        if up.iter().all(|&v| v == 0.0) {
            continue;
        }
        let (_, dx) = net.backward(cache, up.view(), false)?;
        *d_actions += &dx.slice(s![.., obs_dim..]);
    }
    Ok(chosen)
}

/// Shared actor loss: `mean[alpha logp - min Qr + penalty(max Qc)]`, where
/// `penalty` returns the value and slope at a cost-critic value.
fn actor_loss_with_penalty(
    obs: ArrayView2<'_, f64>,
    noise: ArrayView2<'_, f64>,
    policy: &GaussianPolicy,
    reward_q: &DoubleQ,
    cost: Option<(&DoubleQ, &dyn Fn(f64) -> (f64, f64))>,
    alpha: f64,
) -> Result<ActorLoss, NnError> {
    let n = obs.nrows();
    let nf = n as f64;
    let sample = policy.sample(obs, noise)?;
    let x = join(obs, sample.actions.view());
    let mut d_actions = Array2::zeros(sample.actions.dim());
    let q_r = pair_action_grad(reward_q, x.view(), obs.ncols(), false, |_, _| -1.0 / nf, &mut d_actions)?;
    let mut loss: f64 = (0..n).map(|i| alpha * sample.logp[i] - q_r[i]).sum();
    let mut mean_qc = None;
    if let Some((cost_q, penalty)) = cost {
        let q_c = pair_action_grad(
            cost_q,
            x.view(),
            obs.ncols(),
            true,
            |_, v| penalty(v).1 / nf,
            &mut d_actions,
        )?;
        loss += q_c.iter().map(|&v| penalty(v).0).sum::<f64>();
        mean_qc = Some(q_c.mean().unwrap_or(0.0));
    }
    let d_logp = Array1::from_elem(n, alpha / nf);
    let grads = policy.backward(&sample, d_actions.view(), &d_logp)?;
    Ok(ActorLoss {
        loss: loss / nf,
        grads,
        logp: sample.logp,
        mean_qc,
    })
}

/// Barrier actor loss; gradients flow through the shifted barrier slope.
pub fn csaclb_actor_loss(
    obs: ArrayView2<'_, f64>,
    noise: ArrayView2<'_, f64>,
    policy: &GaussianPolicy,
    reward_q: &DoubleQ,
    cost_q: &DoubleQ,
    alpha: f64,
    cfg: &BarrierConfig,
) -> Result<ActorLoss, NnError> {
    let penalty = |q: f64| (cfg.value(q), cfg.grad(q));
    actor_loss_with_penalty(obs, noise, policy, reward_q, Some((cost_q, &penalty)), alpha)
}

pub fn saclag_actor_loss(
    obs: ArrayView2<'_, f64>,
    noise: ArrayView2<'_, f64>,
    policy: &GaussianPolicy,
    reward_q: &DoubleQ,
    cost_q: &DoubleQ,
    alpha: f64,
    beta: f64,
) -> Result<ActorLoss, NnError> {
    let penalty = |q: f64| (beta * q, beta);
    actor_loss_with_penalty(obs, noise, policy, reward_q, Some((cost_q, &penalty)), alpha)
}

/// Unconstrained SAC actor loss.
pub fn sac_actor_loss(
    obs: ArrayView2<'_, f64>,
    noise: ArrayView2<'_, f64>,
    policy: &GaussianPolicy,
    reward_q: &DoubleQ,
    alpha: f64,
) -> Result<ActorLoss, NnError> {
    actor_loss_with_penalty(obs, noise, policy, reward_q, None, alpha)
}

/// Hyperparameters consumed by [`Agent::update`].
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateParams {
    pub batch_size: usize,
    pub gamma: f64,
    pub gamma_cost: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub temp_lr: f64,
    pub tau: f64,
    pub target_update_every: u64,
}

impl Default for UpdateParams {
    fn default() -> Self {
        Self {
            batch_size: 256,
            gamma: 0.99,
            gamma_cost: 0.99,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            temp_lr: 3e-4,
            tau: 0.005,
            target_update_every: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateMetrics {
    /// False when the buffer could not supply a batch.
    pub performed: bool,
    pub critic_loss_r: f64,
    pub critic_loss_c: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub mu: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub objective: Objective,
    pub policy: GaussianPolicy,
    pub reward_q: DoubleQ,
    pub reward_q_target: DoubleQ,
    pub cost_q: DoubleQ,
    pub cost_q_target: DoubleQ,
    pub temperature: EntropyTemperature,
    actor_opt: AdamState,
    reward_opt: [AdamState; 2],
    cost_opt: [AdamState; 2],
    critic_updates: u64,
}

fn opt_pair(q: &DoubleQ) -> [AdamState; 2] {
    [
        AdamState::new(q.q1.params().len()),
        AdamState::new(q.q2.params().len()),
    ]
}

fn finite(what: &'static str, value: f64) -> Result<f64, AgentError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(AgentError::NonFinite { what, value })
    }
}

/// One squared-error step of each critic in `pair` toward `targets`;
/// returns the mean of the two losses.
fn critic_step(
    pair: &mut DoubleQ,
    opts: &mut [AdamState; 2],
    x: ArrayView2<'_, f64>,
    targets: &Array1<f64>,
    lr: f64,
) -> Result<f64, NnError> {
    let n = x.nrows() as f64;
    let mut total = 0.0;
    let [o1, o2] = opts;
    for (net, opt) in [(&mut pair.q1, o1), (&mut pair.q2, o2)] {
        let (out, cache) = net.forward_cached(x)?;
        let diff = &out.column(0) - targets;
        total += diff.mapv(|d| d * d).sum() / n;
        let up = diff.mapv(|d| 2.0 * d / n).insert_axis(ndarray::Axis(1));
        let (grads, _) = net.backward(&cache, up.view(), true)?;
        opt.step(net.params_mut(), &grads.expect("requested"), lr)?;
    }
    Ok(total / 2.0)
}

impl Agent {
    pub fn new(
        objective: Objective,
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        init_temperature: f64,
        rng: &mut Rng,
    ) -> Result<Self, NnError> {
        let policy = GaussianPolicy::new(obs_dim, act_dim, hidden, rng)?;
        let reward_q = DoubleQ::new(obs_dim, act_dim, hidden, rng)?;
        let cost_q = DoubleQ::new(obs_dim, act_dim, hidden, rng)?;
        Ok(Self::from_parts(
            objective,
            policy,
            reward_q.clone(),
            reward_q,
            cost_q.clone(),
            cost_q,
            EntropyTemperature::for_action_dim(init_temperature, act_dim),
        ))
    }

    pub fn from_parts(
        objective: Objective,
        policy: GaussianPolicy,
        reward_q: DoubleQ,
        reward_q_target: DoubleQ,
        cost_q: DoubleQ,
        cost_q_target: DoubleQ,
        temperature: EntropyTemperature,
    ) -> Self {
        Self {
            objective,
            actor_opt: AdamState::new(policy.trunk.params().len()),
            reward_opt: opt_pair(&reward_q),
            cost_opt: opt_pair(&cost_q),
            policy,
            reward_q,
            reward_q_target,
            cost_q,
            cost_q_target,
            temperature,
            critic_updates: 0,
        }
    }

    pub fn kind(&self) -> AlgoKind {
        self.objective.kind()
    }

    pub fn beta(&self) -> Option<f64> {
        match self.objective {
            Objective::Lagrangian { state, .. } => Some(state.beta),
            _ => None,
        }
    }

    pub fn mu(&self) -> Option<f64> {
        match self.objective {
            Objective::Barrier(cfg) => Some(cfg.mu()),
            _ => None,
        }
    }

    pub fn critic_updates(&self) -> u64 {
        self.critic_updates
    }

    /// Actor loss of this agent's objective on `obs` with action noise `noise`.
    pub fn actor_loss(&self, obs: ArrayView2<'_, f64>, noise: ArrayView2<'_, f64>) -> Result<ActorLoss, NnError> {
        let alpha = self.temperature.alpha();
        match &self.objective {
            Objective::Barrier(cfg) => {
                csaclb_actor_loss(obs, noise, &self.policy, &self.reward_q, &self.cost_q, alpha, cfg)
            }
            Objective::Lagrangian { state, .. } => {
                saclag_actor_loss(obs, noise, &self.policy, &self.reward_q, &self.cost_q, alpha, state.beta)
            }
            Objective::Shaped(_) => sac_actor_loss(obs, noise, &self.policy, &self.reward_q, alpha),
        }
    }

    /// One gradient step on an already prepared batch: reward critics, cost
    /// critics, actor, temperature, multiplier (SAC-Lag), then the polyak
    /// update every `target_update_every` critic steps.
    pub fn update(&mut self, batch: &Batch, hp: &UpdateParams, noise_rng: &mut Rng) -> Result<UpdateMetrics, AgentError> {
        let n = batch.len();
        let k = self.policy.act_dim();
        let alpha = self.temperature.alpha();

        let next_noise = standard_normal(noise_rng, n, k);
        let next = self.policy.sample(batch.next_obs.view(), next_noise.view())?;
        let y_r = reward_critic_target(batch, &self.reward_q_target, &next, hp.gamma, alpha)?;
        let y_c = cost_critic_target(batch, &self.cost_q_target, &next, hp.gamma_cost)?;

        let x = join(batch.obs.view(), batch.actions.view());
        let critic_loss_r = finite(
            "reward critic loss",
            critic_step(&mut self.reward_q, &mut self.reward_opt, x.view(), &y_r, hp.critic_lr)?,
        )?;
        let critic_loss_c = finite(
            "cost critic loss",
            critic_step(&mut self.cost_q, &mut self.cost_opt, x.view(), &y_c, hp.critic_lr)?,
        )?;
        self.critic_updates += 1;

        let noise = standard_normal(noise_rng, n, k);
        let actor = self.actor_loss(batch.obs.view(), noise.view())?;
        let actor_loss = finite("actor loss", actor.loss)?;
        self.actor_opt
            .step(self.policy.trunk.params_mut(), &actor.grads, hp.actor_lr)?;

        let mean_logp = actor.logp.mean().unwrap_or(0.0);
        self.temperature.update(mean_logp, hp.temp_lr)?;

        if let Objective::Lagrangian { state, cost_limit } = &mut self.objective {
            state.update(actor.mean_qc.unwrap_or(0.0), *cost_limit);
        }

        if self.critic_updates.is_multiple_of(hp.target_update_every.max(1)) {
            self.sync_targets(hp.tau)?;
        }

        Ok(UpdateMetrics {
            performed: true,
            critic_loss_r,
            critic_loss_c,
            actor_loss,
            alpha: finite("temperature", self.temperature.alpha())?,
            beta: self.beta(),
            mu: self.mu(),
        })
    }

    pub fn sync_targets(&mut self, tau: f64) -> Result<(), NnError> {
        for (t, o) in [
            (&mut self.reward_q_target.q1, &self.reward_q.q1),
            (&mut self.reward_q_target.q2, &self.reward_q.q2),
            (&mut self.cost_q_target.q1, &self.cost_q.q1),
            (&mut self.cost_q_target.q2, &self.cost_q.q2),
        ] {
            polyak_update(t.params_mut(), o.params(), tau)?;
        }
        Ok(())
    }

    pub fn idle_metrics(&self) -> UpdateMetrics {
        UpdateMetrics {
            performed: false,
            critic_loss_r: 0.0,
            critic_loss_c: 0.0,
            actor_loss: 0.0,
            alpha: self.temperature.alpha(),
            beta: self.beta(),
            mu: self.mu(),
        }
    }

    pub fn to_document(&self, step: u64) -> AgentDocument {
        let (beta, beta_lr, cost_limit) = match self.objective {
            Objective::Lagrangian { state, cost_limit } => (Some(state.beta), Some(state.beta_lr), Some(cost_limit)),
            Objective::Barrier(cfg) => (None, None, Some(cfg.cost_limit())),
            Objective::Shaped(_) => (None, None, None),
        };
        AgentDocument {
            algo: self.kind(),
            policy: self.policy.trunk.to_document(),
            reward_q1: self.reward_q.q1.to_document(),
            reward_q2: self.reward_q.q2.to_document(),
            reward_q1_target: self.reward_q_target.q1.to_document(),
            reward_q2_target: self.reward_q_target.q2.to_document(),
            cost_q1: self.cost_q.q1.to_document(),
            cost_q2: self.cost_q.q2.to_document(),
            cost_q1_target: self.cost_q_target.q1.to_document(),
            cost_q2_target: self.cost_q_target.q2.to_document(),
            scalars: Scalars {
                log_alpha: self.temperature.log_alpha,
                target_entropy: self.temperature.target_entropy,
                beta,
                beta_lr,
                mu: self.mu(),
                d: cost_limit,
                rs_penalty: match self.objective {
                    Objective::Shaped(rs) => Some(rs.penalty),
                    _ => None,
                },
                step,
            },
        }
    }

    /// Rebuild an agent from a checkpoint document. Optimiser moments are
    /// not part of a checkpoint and restart from zero.
    pub fn from_document(doc: &AgentDocument) -> Result<Self, AgentError> {
        let net = |d: &NetDocument| DenseNet::from_document(d);
        let pair = |a: &NetDocument, b: &NetDocument| -> Result<DoubleQ, NnError> {
            DoubleQ::from_nets(net(a)?, net(b)?)
        };
        let sc = &doc.scalars;
        let missing = |what: &str| AgentError::Checkpoint(format!("missing scalar '{what}'"));
        let objective = match doc.algo {
            AlgoKind::CsacLb => Objective::Barrier(BarrierConfig::new(
                sc.mu.ok_or_else(|| missing("mu"))?,
                sc.d.ok_or_else(|| missing("d"))?,
            )?),
            AlgoKind::SacLag => Objective::Lagrangian {
                state: SacLagState {
                    beta: sc.beta.ok_or_else(|| missing("beta"))?,
                    beta_lr: sc.beta_lr.unwrap_or(3e-4),
                },
                cost_limit: sc.d.ok_or_else(|| missing("d"))?,
            },
            AlgoKind::SacRs => Objective::Shaped(RsConfig {
                penalty: sc.rs_penalty.unwrap_or(-30.0),
            }),
        };
        let mut temperature = EntropyTemperature::new(1.0, sc.target_entropy);
        temperature.log_alpha = sc.log_alpha;
        Ok(Self::from_parts(
            objective,
            GaussianPolicy::from_trunk(net(&doc.policy)?)?,
            pair(&doc.reward_q1, &doc.reward_q2)?,
            pair(&doc.reward_q1_target, &doc.reward_q2_target)?,
            pair(&doc.cost_q1, &doc.cost_q2)?,
            pair(&doc.cost_q1_target, &doc.cost_q2_target)?,
            temperature,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalars {
    pub log_alpha: f64,
    pub target_entropy: f64,
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_lr: Option<f64>,
    pub mu: Option<f64>,
    pub d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rs_penalty: Option<f64>,
    pub step: u64,
}

/// Every network in the network JSON format plus the scalar state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDocument {
    pub algo: AlgoKind,
    pub policy: NetDocument,
    pub reward_q1: NetDocument,
    pub reward_q2: NetDocument,
    pub reward_q1_target: NetDocument,
    pub reward_q2_target: NetDocument,
    pub cost_q1: NetDocument,
    pub cost_q2: NetDocument,
    pub cost_q1_target: NetDocument,
    pub cost_q2_target: NetDocument,
    pub scalars: Scalars,
}

/// Sample a batch, let `prepare` transform it (normalisation), and run one
/// update. An under-filled buffer yields idle metrics and changes nothing.
pub fn agent_update_step<F>(
    agent: &mut Agent,
    buffer: &ReplayBuffer,
    hp: &UpdateParams,
    sample_rng: &mut Rng,
    noise_rng: &mut Rng,
    prepare: F,
) -> Result<UpdateMetrics, AgentError>
where
    F: FnOnce(&mut Batch),
{
    match buffer.sample(hp.batch_size, sample_rng) {
        Ok(mut batch) => {
            prepare(&mut batch);
            agent.update(&batch, hp, noise_rng)
        }
        Err(_) => Ok(agent.idle_metrics()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use crate::sac::Transition;
    use ndarray::array;
    use rand::Rng as _;

    fn rng(seed: u64) -> Rng {
        substream(seed, Stream::NetInit)
    }

    fn constant_pair(in_dim: usize, c: f64) -> DoubleQ {
        let mut q1 = DenseNet::zeros(&[in_dim, 4, 1]).unwrap();
        q1.layer_mut(1).1[0] = c;
        DoubleQ::from_nets(q1.clone(), q1).unwrap()
    }

    #[test]
    fn stub_objectives() {
        let c = BarrierConfig::new(2.0, 0.0).unwrap();
        assert_eq!(csaclb_objective(0.0, 2.0, -1.0, 1.0, &c), -2.0);
        let v = csaclb_objective(0.0, 2.0, 0.5, 1.0, &c);
        assert!((v - (-2.0 + 0.346574)).abs() < 1e-6);
        assert!((v + 1.653426).abs() < 1e-6);
        assert_eq!(saclag_objective(0.0, 2.0, 1.0, 1.0, 0.5), -1.5);
    }

    #[test]
    fn stub_network_losses() {
        // zero trunk: mean 0, log-std 0; zero noise gives a = 0 and a fixed logp
        let policy = GaussianPolicy::from_trunk(DenseNet::zeros(&[2, 4, 2]).unwrap()).unwrap();
        let obs = array![[0.3, -0.1], [0.0, 1.0]];
        let noise = Array2::zeros((2, 1));
        let qr = constant_pair(3, 2.0);
        let cfg = BarrierConfig::new(2.0, 0.0).unwrap();
        let l = csaclb_actor_loss(obs.view(), noise.view(), &policy, &qr, &constant_pair(3, -1.0), 0.0, &cfg).unwrap();
        assert_eq!(l.loss, -2.0);
        let l = csaclb_actor_loss(obs.view(), noise.view(), &policy, &qr, &constant_pair(3, 0.5), 0.0, &cfg).unwrap();
        assert!((l.loss + 1.653426).abs() < 1e-6);
        assert_eq!(l.mean_qc, Some(0.5));
        let l = saclag_actor_loss(obs.view(), noise.view(), &policy, &qr, &constant_pair(3, 1.0), 0.0, 0.5).unwrap();
        assert_eq!(l.loss, -1.5);
        // alpha enters through logp
        let plain = sac_actor_loss(obs.view(), noise.view(), &policy, &qr, 1.0).unwrap();
        assert!((plain.loss - (plain.logp.mean().unwrap() - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_multiplier_is_plain_sac() {
        let mut r = rng(1);
        let policy = GaussianPolicy::new(3, 1, &[8, 8], &mut r).unwrap();
        let qr = DoubleQ::new(3, 1, &[8, 8], &mut r).unwrap();
        let qc = DoubleQ::new(3, 1, &[8, 8], &mut r).unwrap();
        let obs = Array2::from_shape_fn((5, 3), |_| r.random_range(-1.0..1.0));
        let noise = standard_normal(&mut r, 5, 1);
        let lag = saclag_actor_loss(obs.view(), noise.view(), &policy, &qr, &qc, 0.2, 0.0).unwrap();
        let sac = sac_actor_loss(obs.view(), noise.view(), &policy, &qr, 0.2).unwrap();
        assert_eq!(lag.loss, sac.loss);
        assert_eq!(lag.grads, sac.grads);
    }

    fn fd_check(loss: impl Fn(&GaussianPolicy) -> f64, policy: &GaussianPolicy, grads: &[f64]) {
        let h = 1e-6;
        let mut probe = policy.clone();
        for i in 0..grads.len() {
            let orig = probe.trunk.params()[i];
            probe.trunk.params_mut()[i] = orig + h;
            let lp = loss(&probe);
            probe.trunk.params_mut()[i] = orig - h;
            let lm = loss(&probe);
            probe.trunk.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: fd {fd} vs {}", grads[i]);
        }
    }

    #[test]
    fn actor_gradients_match_finite_differences() {
        let mut r = rng(2);
        let policy = GaussianPolicy::new(3, 1, &[2, 2], &mut r).unwrap();
        let qr = DoubleQ::new(3, 1, &[6], &mut r).unwrap();
        let mut qc = DoubleQ::new(3, 1, &[6], &mut r).unwrap();
        // lift the cost critic into the barrier's active region
        qc.q1.layer_mut(1).1[0] += 0.6;
        qc.q2.layer_mut(1).1[0] += 0.7;
        let obs = Array2::from_shape_fn((6, 3), |_| r.random_range(-1.0..1.0));
        let noise = standard_normal(&mut r, 6, 1);
        let cfg = BarrierConfig::new(3.0, 0.0).unwrap();
        let l = csaclb_actor_loss(obs.view(), noise.view(), &policy, &qr, &qc, 0.3, &cfg).unwrap();
        fd_check(
            |p| csaclb_actor_loss(obs.view(), noise.view(), p, &qr, &qc, 0.3, &cfg).unwrap().loss,
            &policy,
            &l.grads,
        );
        let l = saclag_actor_loss(obs.view(), noise.view(), &policy, &qr, &qc, 0.3, 0.8).unwrap();
        fd_check(
            |p| saclag_actor_loss(obs.view(), noise.view(), p, &qr, &qc, 0.3, 0.8).unwrap().loss,
            &policy,
            &l.grads,
        );
    }

    #[test]
    fn beta_update_cases() {
        let s = saclag_beta_update(SacLagState::new(3e-4), 2.0, 0.0);
        assert!((s.beta - 6e-4).abs() < 1e-18);
        let s = saclag_beta_update(SacLagState { beta: 1e-4, beta_lr: 3e-4 }, -5.0, 0.0);
        assert_eq!(s.beta, 0.0);
        let s = saclag_beta_update(SacLagState { beta: 0.3, beta_lr: 3e-4 }, 1.25, 1.25);
        assert_eq!(s.beta, 0.3);
    }

    #[test]
    fn reward_shaping_cases() {
        let rs = RsConfig::default();
        assert_eq!(rs_shape(1.0, 0.0, false, &rs), (1.0, false));
        assert_eq!(rs_shape(1.0, 1.0, false, &rs), (-29.0, true));
        assert_eq!(rs_shape(1.0, 0.0, true, &rs), (1.0, true));
    }

    fn synthetic_buffer(n: usize, seed: u64) -> ReplayBuffer {
        let mut r = rng(seed);
        let mut buf = ReplayBuffer::new(1000).unwrap();
        for i in 0..n {
            buf.push(Transition {
                obs: (0..3).map(|_| r.random_range(-1.0..1.0)).collect(),
                action: vec![r.random_range(-1.0..1.0)],
                reward: r.random_range(-2.0..0.0),
                cost: (i % 3 == 0) as u8 as f64,
                next_obs: (0..3).map(|_| r.random_range(-1.0..1.0)).collect(),
                done: i % 50 == 49,
            });
        }
        buf
    }

    fn small_agent(objective: Objective) -> Agent {
        Agent::new(objective, 3, 1, &[16, 16], 1.0, &mut rng(5)).unwrap()
    }

    fn small_params() -> UpdateParams {
        UpdateParams {
            batch_size: 32,
            ..UpdateParams::default()
        }
    }

    #[test]
    fn underfilled_buffer_is_a_no_op() {
        let mut agent = small_agent(Objective::Barrier(BarrierConfig::new(3.0, 0.0).unwrap()));
        let before = agent.to_document(0);
        let buf = synthetic_buffer(10, 1);
        let m = agent_update_step(
            &mut agent,
            &buf,
            &small_params(),
            &mut substream(1, Stream::BufferSampling),
            &mut substream(1, Stream::PolicyNoise),
            |_| {},
        )
        .unwrap();
        assert!(!m.performed);
        assert_eq!(agent.to_document(0), before);
    }

    #[test]
    fn target_update_moves_by_tau() {
        let mut agent = small_agent(Objective::Shaped(RsConfig::default()));
        let hp = UpdateParams {
            target_update_every: 1,
            ..small_params()
        };
        let old_target = agent.reward_q_target.q1.params().to_vec();
        let buf = synthetic_buffer(200, 2);
        agent_update_step(
            &mut agent,
            &buf,
            &hp,
            &mut substream(2, Stream::BufferSampling),
            &mut substream(2, Stream::PolicyNoise),
            |_| {},
        )
        .unwrap();
        let online = agent.reward_q.q1.params();
        let new_target = agent.reward_q_target.q1.params();
        for i in 0..online.len() {
            let expect = old_target[i] + hp.tau * (online[i] - old_target[i]);
            assert!((new_target[i] - expect).abs() <= 1e-15 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn targets_follow_the_configured_cadence() {
        let mut agent = small_agent(Objective::Shaped(RsConfig::default()));
        let initial = agent.cost_q_target.clone();
        let buf = synthetic_buffer(200, 3);
        let hp = small_params();
        let mut s = substream(3, Stream::BufferSampling);
        let mut n = substream(3, Stream::PolicyNoise);
        agent_update_step(&mut agent, &buf, &hp, &mut s, &mut n, |_| {}).unwrap();
        assert_eq!(agent.cost_q_target, initial);
        agent_update_step(&mut agent, &buf, &hp, &mut s, &mut n, |_| {}).unwrap();
        assert_ne!(agent.cost_q_target, initial);
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut agent = small_agent(Objective::Lagrangian {
                state: SacLagState::new(3e-4),
                cost_limit: 0.0,
            });
            let buf = synthetic_buffer(300, 4);
            let mut s = substream(4, Stream::BufferSampling);
            let mut n = substream(4, Stream::PolicyNoise);
            (0..5)
                .map(|_| agent_update_step(&mut agent, &buf, &small_params(), &mut s, &mut n, |_| {}).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn updates_stay_finite_and_keep_shapes() {
        let objectives = [
            Objective::Barrier(BarrierConfig::new(3.0, 0.0).unwrap()),
            Objective::Lagrangian {
                state: SacLagState::new(3e-4),
                cost_limit: 0.0,
            },
            Objective::Shaped(RsConfig::default()),
        ];
        for obj in objectives {
            let mut agent = small_agent(obj);
            let shapes = agent.to_document(0);
            let buf = synthetic_buffer(300, 6);
            let mut s = substream(6, Stream::BufferSampling);
            let mut n = substream(6, Stream::PolicyNoise);
            for _ in 0..20 {
                let m = agent_update_step(&mut agent, &buf, &small_params(), &mut s, &mut n, |_| {}).unwrap();
                assert!(m.performed);
                for v in [m.critic_loss_r, m.critic_loss_c, m.actor_loss, m.alpha] {
                    assert!(v.is_finite());
                }
                if let Some(b) = m.beta {
                    assert!(b >= 0.0);
                }
            }
            let after = agent.to_document(20);
            assert_eq!(after.policy.layer_sizes, shapes.policy.layer_sizes);
            assert_eq!(after.cost_q2.layer_sizes, shapes.cost_q2.layer_sizes);
            assert!(agent.policy.trunk.params().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn document_round_trip() {
        let mut agent = small_agent(Objective::Lagrangian {
            state: SacLagState { beta: 0.25, beta_lr: 3e-4 },
            cost_limit: 0.5,
        });
        agent.temperature.log_alpha = -0.7;
        let doc = agent.to_document(17);
        let json = serde_json::to_string(&doc).unwrap();
        let back: AgentDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(back, doc);
        let rebuilt = Agent::from_document(&back).unwrap();
        assert_eq!(rebuilt.to_document(17), doc);
        assert_eq!(rebuilt.beta(), Some(0.25));
    }

    #[test]
    fn algo_names() {
        for (s, k) in [("csac-lb", AlgoKind::CsacLb), ("sac_lag", AlgoKind::SacLag), ("sac-rs", AlgoKind::SacRs)] {
            assert_eq!(s.parse::<AlgoKind>().unwrap(), k);
        }
        assert!("ppo".parse::<AlgoKind>().is_err());
        assert_eq!(serde_json::to_string(&AlgoKind::CsacLb).unwrap(), "\"csac_lb\"");
        assert_eq!(serde_json::from_str::<AlgoKind>("\"csac-lb\"").unwrap(), AlgoKind::CsacLb);
    }
}
