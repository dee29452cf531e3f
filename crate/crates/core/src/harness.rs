//! Training loop, normalisation, evaluation, configuration and CSV logs.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algos::{
    agent_update_step, rs_shape, Agent, AgentDocument, AgentError, AlgoKind, Objective, RsConfig,
    SacLagState, UpdateMetrics, UpdateParams,
};
use crate::barrier::BarrierConfig;
use crate::envs::{Env, EnvKind};
use crate::nn::{NnError, DEFAULT_HIDDEN};
use crate::rng::{substream, Rng, Stream};
use crate::sac::{standard_normal, Batch, ReplayBuffer, Transition};

pub const STD_FLOOR: f64 = 1e-8;

pub const LOG_COLUMNS: [&str; 14] = [
    "step",
    "algo",
    "env",
    "seed",
    "eval_return_mean",
    "eval_return_std",
    "eval_cost_mean",
    "eval_cost_std",
    "alpha",
    "beta",
    "mu",
    "actor_loss",
    "critic_loss_r",
    "critic_loss_c",
];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config key '{key}': {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn d_algo() -> AlgoKind {
    AlgoKind::CsacLb
}
fn d_env() -> EnvKind {
    EnvKind::Tilt
}
fn d_total_steps() -> u64 {
    100_000
}
fn d_batch() -> usize {
    256
}
fn d_gamma() -> f64 {
    0.99
}
fn d_capacity() -> usize {
    1_000_000
}
fn d_random_steps() -> u64 {
    100
}
fn d_lr() -> f64 {
    3e-4
}
fn d_tau() -> f64 {
    0.005
}
fn d_one() -> f64 {
    1.0
}
fn d_mu() -> f64 {
    3.0
}
fn d_rs_penalty() -> f64 {
    -30.0
}
fn d_true() -> bool {
    true
}
fn d_clip() -> [f64; 2] {
    [-10.0, 10.0]
}
fn d_eval_interval() -> u64 {
    2000
}
fn d_eval_episodes() -> usize {
    10
}
fn d_target_every() -> u64 {
    2
}
fn d_update_every() -> u64 {
    1
}
fn d_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_algo")]
    pub algo: AlgoKind,
    #[serde(default = "d_env")]
    pub env: EnvKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_total_steps")]
    pub total_steps: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_gamma")]
    pub gamma_cost: f64,
    #[serde(default = "d_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "d_random_steps")]
    pub random_steps: u64,
    #[serde(default = "d_lr")]
    pub actor_lr: f64,
    #[serde(default = "d_lr")]
    pub critic_lr: f64,
    #[serde(default = "d_lr")]
    pub temp_lr: f64,
    #[serde(default = "d_lr")]
    pub beta_lr: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_one")]
    pub init_temperature: f64,
    #[serde(default = "d_mu")]
    pub mu: f64,
    #[serde(default)]
    pub cost_limit: f64,
    #[serde(default = "d_rs_penalty")]
    pub rs_penalty: f64,
    #[serde(default = "d_true")]
    pub normalize_obs: bool,
    #[serde(default = "d_true")]
    pub normalize_action: bool,
    #[serde(default = "d_true")]
    pub normalize_return: bool,
    #[serde(default = "d_true")]
    pub normalize_cost: bool,
    #[serde(default = "d_clip")]
    pub clip_reward: [f64; 2],
    #[serde(default = "d_clip")]
    pub clip_cost: [f64; 2],
    #[serde(default = "d_eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "d_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "d_target_every")]
    pub target_update_every: u64,
    /// Environment steps between update rounds; each round performs this
    /// many updates, so the total update count does not change.
    #[serde(default = "d_update_every")]
    pub update_every: u64,
    #[serde(default = "d_hidden")]
    pub hidden_sizes: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

fn invalid(key: &'static str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Invalid {
        key,
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let open_unit = |key, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(invalid(key, format!("must lie in (0, 1), got {v}")))
            }
        };
        let positive = |key, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(key, format!("must be positive, got {v}")))
            }
        };
        let nonzero = |key, v: u64| {
            if v > 0 {
                Ok(())
            } else {
                Err(invalid(key, "must be at least 1"))
            }
        };
        let range = |key, r: [f64; 2]| {
            if r[0] < r[1] {
                Ok(())
            } else {
                Err(invalid(key, format!("lower bound {} must be below upper bound {}", r[0], r[1])))
            }
        };
        open_unit("gamma", self.gamma)?;
        open_unit("gamma_cost", self.gamma_cost)?;
        nonzero("batch_size", self.batch_size as u64)?;
        nonzero("buffer_capacity", self.buffer_capacity as u64)?;
        positive("actor_lr", self.actor_lr)?;
        positive("critic_lr", self.critic_lr)?;
        positive("temp_lr", self.temp_lr)?;
        positive("beta_lr", self.beta_lr)?;
        positive("init_temperature", self.init_temperature)?;
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(invalid("tau", format!("must lie in (0, 1], got {}", self.tau)));
        }
        if !self.cost_limit.is_finite() {
            return Err(invalid("cost_limit", "must be finite"));
        }
        if !self.rs_penalty.is_finite() {
            return Err(invalid("rs_penalty", "must be finite"));
        }
        if self.algo == AlgoKind::CsacLb && !(self.mu > 1.0 && self.mu.is_finite()) {
            return Err(invalid("mu", format!("must exceed 1 for csac_lb, got {}", self.mu)));
        }
        range("clip_reward", self.clip_reward)?;
        range("clip_cost", self.clip_cost)?;
        nonzero("eval_interval", self.eval_interval)?;
        nonzero("eval_episodes", self.eval_episodes as u64)?;
        nonzero("target_update_every", self.target_update_every)?;
        nonzero("update_every", self.update_every)?;
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(invalid("hidden_sizes", "needs at least one nonzero width"));
        }
        Ok(())
    }

    pub fn update_params(&self) -> UpdateParams {
        UpdateParams {
            batch_size: self.batch_size,
            gamma: self.gamma,
            gamma_cost: self.gamma_cost,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            temp_lr: self.temp_lr,
            tau: self.tau,
            target_update_every: self.target_update_every,
        }
    }

    pub fn objective(&self) -> Result<Objective, HarnessError> {
        Ok(match self.algo {
            AlgoKind::CsacLb => Objective::Barrier(
                BarrierConfig::new(self.mu, self.cost_limit).map_err(|e| invalid("mu", e.to_string()))?,
            ),
            AlgoKind::SacLag => Objective::Lagrangian {
                state: SacLagState::new(self.beta_lr),
                cost_limit: self.cost_limit,
            },
            AlgoKind::SacRs => Objective::Shaped(RsConfig {
                penalty: self.rs_penalty,
            }),
        })
    }
}

/// Parse a JSON config; absent keys take their defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig, HarnessError> {
    let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<TrainConfig, HarnessError> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Running mean and spread (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningScale {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningScale {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Population std, 1 until two samples exist, never below [`STD_FLOOR`].
    pub fn std(&self) -> f64 {
        if self.count < 2 {
            1.0
        } else {
            (self.m2 / self.count as f64).sqrt().max(STD_FLOOR)
        }
    }
}

/// Scales shared by the acting and learning paths of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    pub obs: Vec<RunningScale>,
    pub ret: RunningScale,
    pub cost: RunningScale,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeFlags {
    pub obs: bool,
    pub ret: bool,
    pub cost: bool,
    pub clip_reward: [f64; 2],
    pub clip_cost: [f64; 2],
}

impl NormalizeFlags {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            obs: cfg.normalize_obs,
            ret: cfg.normalize_return,
            cost: cfg.normalize_cost,
            clip_reward: cfg.clip_reward,
            clip_cost: cfg.clip_cost,
        }
    }

    pub fn off() -> Self {
        Self {
            obs: false,
            ret: false,
            cost: false,
            clip_reward: [f64::NEG_INFINITY, f64::INFINITY],
            clip_cost: [f64::NEG_INFINITY, f64::INFINITY],
        }
    }
}

impl Normalizers {
    pub fn new(obs_dim: usize) -> Self {
        Self {
            obs: vec![RunningScale::default(); obs_dim],
            ret: RunningScale::default(),
            cost: RunningScale::default(),
        }
    }

    pub fn observe(&mut self, obs: &[f64]) {
        for (s, &x) in self.obs.iter_mut().zip(obs) {
            s.push(x);
        }
    }

    pub fn obs(&self, obs: &[f64], flags: &NormalizeFlags) -> Vec<f64> {
        if !flags.obs {
            return obs.to_vec();
        }
        obs.iter()
            .zip(&self.obs)
            .map(|(&x, s)| (x - s.mean) / s.std())
            .collect()
    }

    pub fn reward(&self, r: f64, flags: &NormalizeFlags) -> f64 {
        if !flags.ret {
            return r;
        }
        (r / self.ret.std()).clamp(flags.clip_reward[0], flags.clip_reward[1])
    }

    pub fn cost(&self, c: f64, flags: &NormalizeFlags) -> f64 {
        if !flags.cost {
            return c;
        }
        (c / self.cost.std()).clamp(flags.clip_cost[0], flags.clip_cost[1])
    }

    /// Normalise a batch of raw transitions with the current statistics.
    pub fn apply(&self, batch: &mut Batch, flags: &NormalizeFlags) {
        if flags.obs {
            for m in [&mut batch.obs, &mut batch.next_obs] {
                for mut row in m.rows_mut() {
                    for (x, s) in row.iter_mut().zip(&self.obs) {
                        *x = (*x - s.mean) / s.std();
                    }
                }
            }
        }
        batch.rewards.mapv_inplace(|r| self.reward(r, flags));
        batch.costs.mapv_inplace(|c| self.cost(c, flags));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalStats {
    pub return_mean: f64,
    pub return_std: f64,
    pub cost_mean: f64,
    pub cost_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs `n_episodes` episodes with the deterministic mean action and returns
/// statistics of the raw undiscounted episode sums. Nothing is mutated apart
/// from `rng`, which only seeds the episode starts.
pub fn evaluate(
    agent: &Agent,
    norm: &Normalizers,
    flags: &NormalizeFlags,
    env: EnvKind,
    n_episodes: usize,
    native_actions: bool,
    rng: &mut Rng,
) -> Result<EvalStats, HarnessError> {
    let mut env = env.make();
    let (mut rets, mut costs) = (Vec::new(), Vec::new());
    for _ in 0..n_episodes.max(1) {
        let mut obs = env.reset(rng);
        let (mut ret, mut cost) = (0.0, 0.0);
        loop {
            let a = agent.policy.mean_action(&norm.obs(&obs, flags))?;
            let res = act(env.as_mut(), &a, native_actions)?;
            ret += res.reward;
            cost += res.cost;
            obs = res.obs;
            if res.done {
                break;
            }
        }
        rets.push(ret);
        costs.push(cost);
    }
    let (return_mean, return_std) = mean_std(&rets);
    let (cost_mean, cost_std) = mean_std(&costs);
    Ok(EvalStats {
        return_mean,
        return_std,
        cost_mean,
        cost_std,
    })
}

fn act(env: &mut dyn Env, a: &[f64], native: bool) -> Result<crate::envs::StepResult, HarnessError> {
    Ok(if native { env.step_native(a)? } else { env.step(a)? })
}

/// One evaluation point. Empty fields render as empty CSV cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub algo: AlgoKind,
    pub env: EnvKind,
    pub seed: u64,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub eval_cost_mean: Option<f64>,
    pub eval_cost_std: Option<f64>,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub mu: Option<f64>,
    pub actor_loss: Option<f64>,
    pub critic_loss_r: Option<f64>,
    pub critic_loss_c: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Header plus one line per row; floats use the shortest exact decimal form.
pub fn write_log<W: Write>(out: W, rows: &[LogRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOG_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.algo.to_string(),
            r.env.to_string(),
            r.seed.to_string(),
            cell(r.eval_return_mean),
            cell(r.eval_return_std),
            cell(r.eval_cost_mean),
            cell(r.eval_cost_std),
            r.alpha.to_string(),
            cell(r.beta),
            cell(r.mu),
            cell(r.actor_loss),
            cell(r.critic_loss_r),
            cell(r.critic_loss_c),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn log_to_string(rows: &[LogRow]) -> String {
    let mut buf = Vec::new();
    write_log(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

/// Agent networks and scalars plus what evaluation needs to act.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub env: EnvKind,
    pub normalize_obs: bool,
    pub normalize_action: bool,
    pub normalizers: Normalizers,
    #[serde(flatten)]
    pub agent: AgentDocument,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(s).map_err(|e| HarnessError::Checkpoint(e.to_string()))
    }

    pub fn flags(&self) -> NormalizeFlags {
        NormalizeFlags {
            obs: self.normalize_obs,
            ..NormalizeFlags::off()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Aborted { step: u64, reason: String },
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    pub status: RunStatus,
    pub updates: u64,
    pub env_steps: u64,
    pub agent: Agent,
    pub normalizers: Normalizers,
    pub config: TrainConfig,
}

impl RunLog {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            env: self.config.env,
            normalize_obs: self.config.normalize_obs,
            normalize_action: self.config.normalize_action,
            normalizers: self.normalizers.clone(),
            agent: self.agent.to_document(self.env_steps),
        }
    }

    pub fn csv(&self) -> String {
        log_to_string(&self.rows)
    }

    /// Mean of the last `k` logged evaluation return and cost means.
    pub fn final_means(&self, k: usize) -> Option<(f64, f64)> {
        let evals: Vec<_> = self
            .rows
            .iter()
            .filter_map(|r| Some((r.eval_return_mean?, r.eval_cost_mean?)))
            .collect();
        if evals.is_empty() {
            return None;
        }
        let tail = &evals[evals.len().saturating_sub(k)..];
        let n = tail.len() as f64;
        Some((
            tail.iter().map(|e| e.0).sum::<f64>() / n,
            tail.iter().map(|e| e.1).sum::<f64>() / n,
        ))
    }
}

/// The outer training loop. Executes exactly `total_steps` environment
/// steps, acts uniformly at random for the first `random_steps`, performs
/// one update per later step and evaluates every `eval_interval` steps.
pub fn train(config: &TrainConfig) -> Result<RunLog, HarnessError> {
    config.validate()?;
    let seed = config.seed;
    let mut init_rng = substream(seed, Stream::NetInit);
    let mut env_rng = substream(seed, Stream::EnvInit);
    let mut action_rng = substream(seed, Stream::RandomActions);
    let mut noise_rng = substream(seed, Stream::PolicyNoise);
    let mut sample_rng = substream(seed, Stream::BufferSampling);
    let mut eval_rng = substream(seed, Stream::Evaluation);

    let mut env = config.env.make();
    let (obs_dim, act_dim) = (env.obs_dim(), env.act_dim());
    let mut agent = Agent::new(
        config.objective()?,
        obs_dim,
        act_dim,
        &config.hidden_sizes,
        config.init_temperature,
        &mut init_rng,
    )?;
    let flags = NormalizeFlags::from_config(config);
    let hp = config.update_params();
    let native = !config.normalize_action;
    let shaping = match agent.objective {
        Objective::Shaped(rs) => Some(rs),
        _ => None,
    };
    let mut buffer = ReplayBuffer::new(config.buffer_capacity.min(config.total_steps.max(1) as usize))
        .expect("capacity is positive");
    let mut norm = Normalizers::new(obs_dim);
    let mut rows = Vec::new();
    let mut last: Option<UpdateMetrics> = None;
    let mut updates = 0u64;
    let mut status = RunStatus::Completed;

    let mut obs = env.reset(&mut env_rng);
    if config.total_steps > 0 {
        norm.observe(&obs);
    }
    let (mut ep_ret, mut ep_cost, mut ep_len) = (0.0, 0.0, 0usize);

    'outer: for t in 0..config.total_steps {
        let action: Vec<f64> = if t < config.random_steps {
            (0..act_dim).map(|_| action_rng.random_range(-1.0..1.0)).collect()
        } else {
            let noise = standard_normal(&mut noise_rng, 1, act_dim);
            let (a, _) = agent
                .policy
                .sample_one(&norm.obs(&obs, &flags), noise.as_slice().expect("contiguous"))?;
            a
        };
        let res = act(env.as_mut(), &action, native)?;
        ep_len += 1;
        let truncated = res.done && ep_len >= env.horizon();
        let (reward, terminal) = match &shaping {
            Some(rs) => {
                let (r, d) = rs_shape(res.reward, res.cost, res.done && !truncated, rs);
                (r, d)
            }
            None => (res.reward, res.done && !truncated),
        };
        ep_ret += reward;
        ep_cost += res.cost;
        buffer.push(Transition {
            obs: std::mem::take(&mut obs),
            action,
            reward,
            cost: res.cost,
            next_obs: res.obs.clone(),
            done: terminal,
        });
        if terminal || res.done {
            norm.ret.push(ep_ret);
            norm.cost.push(ep_cost);
            ep_ret = 0.0;
            ep_cost = 0.0;
            ep_len = 0;
            obs = env.reset(&mut env_rng);
        } else {
            obs = res.obs;
        }
        norm.observe(&obs);

        if t >= config.random_steps {
            let since = t - config.random_steps + 1;
            if since.is_multiple_of(config.update_every) {
                for _ in 0..config.update_every {
                    updates += 1;
                    let frozen = &norm;
                    match agent_update_step(&mut agent, &buffer, &hp, &mut sample_rng, &mut noise_rng, |b| {
                        frozen.apply(b, &flags)
                    }) {
                        Ok(m) => {
                            if m.performed {
                                last = Some(m);
                            }
                        }
                        Err(AgentError::NonFinite { what, value }) => {
                            status = RunStatus::Aborted {
                                step: t + 1,
                                reason: format!("non-finite {what} ({value})"),
                            };
                            rows.push(LogRow {
                                step: t + 1,
                                algo: config.algo,
                                env: config.env,
                                seed,
                                eval_return_mean: None,
                                eval_return_std: None,
                                eval_cost_mean: None,
                                eval_cost_std: None,
                                alpha: agent.temperature.alpha(),
                                beta: agent.beta(),
                                mu: agent.mu(),
                                actor_loss: None,
                                critic_loss_r: None,
                                critic_loss_c: None,
                            });
                            break 'outer;
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }

        if (t + 1) % config.eval_interval == 0 {
            let stats = evaluate(&agent, &norm, &flags, config.env, config.eval_episodes, native, &mut eval_rng)?;
            rows.push(LogRow {
                step: t + 1,
                algo: config.algo,
                env: config.env,
                seed,
                eval_return_mean: Some(stats.return_mean),
                eval_return_std: Some(stats.return_std),
                eval_cost_mean: Some(stats.cost_mean),
                eval_cost_std: Some(stats.cost_std),
                alpha: agent.temperature.alpha(),
                beta: agent.beta(),
                mu: agent.mu(),
                actor_loss: last.as_ref().map(|m| m.actor_loss),
                critic_loss_r: last.as_ref().map(|m| m.critic_loss_r),
                critic_loss_c: last.as_ref().map(|m| m.critic_loss_c),
            });
        }
    }

    let env_steps = match &status {
        RunStatus::Completed => config.total_steps,
        RunStatus::Aborted { step, .. } => *step,
    };
    Ok(RunLog {
        rows,
        status,
        updates,
        env_steps,
        agent,
        normalizers: norm,
        config: config.clone(),
    })
}

/// Write `log.csv`, `config.json` and `checkpoint.json` into `dir`.
pub fn write_run(dir: &Path, run: &RunLog) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_log(std::fs::File::create(dir.join("log.csv"))?, &run.rows)?;
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&run.config).expect("config serialises"),
    )?;
    std::fs::write(dir.join("checkpoint.json"), run.checkpoint().to_json())?;
    Ok(())
}

/// Rebuild the agent from a checkpoint and evaluate it.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    env: EnvKind,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalStats, HarnessError> {
    let agent = Agent::from_document(&ck.agent)?;
    let mut rng = substream(seed, Stream::Evaluation);
    evaluate(&agent, &ck.normalizers, &ck.flags(), env, n_episodes, !ck.normalize_action, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(algo: AlgoKind, steps: u64) -> TrainConfig {
        TrainConfig {
            algo,
            total_steps: steps,
            batch_size: 16,
            random_steps: 20,
            eval_interval: 25,
            eval_episodes: 1,
            hidden_sizes: vec![8, 8],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let d = TrainConfig::default();
        assert_eq!(parse_config("{}").unwrap(), d);
        let text = serde_json::to_string(&d).unwrap();
        assert_eq!(parse_config(&text).unwrap(), d);
        assert_eq!(d.batch_size, 256);
        assert_eq!(d.tau, 0.005);
        assert_eq!(d.random_steps, 100);
        assert_eq!(d.clip_reward, [-10.0, 10.0]);
        assert_eq!(d.hidden_sizes, vec![256, 256]);
    }

    #[test]
    fn config_errors_name_the_key() {
        let err = parse_config(r#"{"algo": "csac_lb", "mu": 1.0}"#).unwrap_err();
        assert!(err.to_string().contains("'mu'"), "{err}");
        let err = parse_config(r#"{"gama": 0.9}"#).unwrap_err();
        assert!(err.to_string().contains("gama"), "{err}");
        let err = parse_config(r#"{"gamma": 1.0}"#).unwrap_err();
        assert!(err.to_string().contains("'gamma'"), "{err}");
        // mu is unconstrained for the baselines
        assert!(parse_config(r#"{"algo": "sac_lag", "mu": 1.0}"#).is_ok());
    }

    #[test]
    fn running_scale_matches_two_pass() {
        let xs = [1.0, 4.0, -2.0, 7.5, 0.25];
        let mut s = RunningScale::default();
        for x in xs {
            s.push(x);
        }
        let (m, sd) = mean_std(&xs);
        assert!((s.mean - m).abs() < 1e-12);
        assert!((s.std() - sd).abs() < 1e-12);
        assert_eq!(RunningScale::default().std(), 1.0);
    }

    #[test]
    fn normalisation_cases() {
        let mut n = Normalizers::new(2);
        for _ in 0..5 {
            n.observe(&[3.0, -1.0]);
        }
        let flags = NormalizeFlags::from_config(&TrainConfig::default());
        assert_eq!(n.obs(&[3.0, -1.0], &flags), vec![0.0, 0.0]);
        assert_eq!(n.reward(1e6, &flags), 10.0);
        assert_eq!(n.cost(-1e6, &flags), -10.0);
        let off = NormalizeFlags::off();
        assert_eq!(n.obs(&[5.0, 2.0], &off), vec![5.0, 2.0]);
        assert_eq!(n.reward(1e6, &off), 1e6);
    }

    #[test]
    fn empty_log_is_header_only() {
        assert_eq!(log_to_string(&[]), format!("{}\n", LOG_COLUMNS.join(",")));
    }

    #[test]
    fn zero_steps_leaves_weights_untouched() {
        let cfg = tiny(AlgoKind::CsacLb, 0);
        let run = train(&cfg).unwrap();
        assert!(run.rows.is_empty());
        assert_eq!(run.updates, 0);
        let fresh = Agent::new(
            cfg.objective().unwrap(),
            3,
            1,
            &cfg.hidden_sizes,
            1.0,
            &mut substream(cfg.seed, Stream::NetInit),
        )
        .unwrap();
        assert_eq!(run.agent.to_document(0), fresh.to_document(0));
    }

    #[test]
    fn warmup_only_performs_no_updates() {
        let cfg = TrainConfig {
            random_steps: 100,
            ..tiny(AlgoKind::SacLag, 50)
        };
        let run = train(&cfg).unwrap();
        assert_eq!(run.updates, 0);
        assert!(run.rows.iter().all(|r| r.actor_loss.is_none()));
        assert_eq!(run.rows.len(), 2);
    }

    #[test]
    fn update_count_follows_step_accounting() {
        for (steps, every) in [(60u64, 1u64), (80, 4)] {
            let cfg = TrainConfig {
                update_every: every,
                ..tiny(AlgoKind::SacRs, steps)
            };
            let run = train(&cfg).unwrap();
            assert_eq!(run.updates, steps - cfg.random_steps);
            assert_eq!(run.status, RunStatus::Completed);
        }
    }

    #[test]
    fn log_rows_carry_algorithm_fields() {
        for algo in [AlgoKind::CsacLb, AlgoKind::SacLag, AlgoKind::SacRs] {
            let run = train(&tiny(algo, 75)).unwrap();
            assert_eq!(run.rows.len(), 3);
            for r in &run.rows {
                assert_eq!(r.beta.is_some(), algo == AlgoKind::SacLag);
                assert_eq!(r.mu.is_some(), algo == AlgoKind::CsacLb);
                assert!(r.eval_return_mean.unwrap().is_finite());
            }
            assert!(run.rows[2].actor_loss.is_some());
        }
    }

    #[test]
    fn evaluation_is_pure() {
        let run = train(&tiny(AlgoKind::CsacLb, 60)).unwrap();
        let before = run.checkpoint().to_json();
        let flags = NormalizeFlags::from_config(&run.config);
        let mut rng = substream(3, Stream::Evaluation);
        evaluate(&run.agent, &run.normalizers, &flags, EnvKind::Tilt, 2, false, &mut rng).unwrap();
        assert_eq!(run.checkpoint().to_json(), before);
    }

    #[test]
    fn deterministic_episodes_have_zero_spread() {
        // Move starts near rest, but resets are random; use a zero policy on
        // a fixed-start copy instead via two identical seeds.
        let run = train(&tiny(AlgoKind::CsacLb, 0)).unwrap();
        let flags = NormalizeFlags::off();
        let a = evaluate(&run.agent, &run.normalizers, &flags, EnvKind::Tilt, 1, false, &mut substream(9, Stream::Evaluation)).unwrap();
        let b = evaluate(&run.agent, &run.normalizers, &flags, EnvKind::Tilt, 1, false, &mut substream(9, Stream::Evaluation)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.return_std, 0.0);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_evaluation() {
        let run = train(&tiny(AlgoKind::SacLag, 60)).unwrap();
        let ck = run.checkpoint();
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        let a = evaluate_checkpoint(&ck, EnvKind::Tilt, 2, 4).unwrap();
        let b = evaluate_checkpoint(&back, EnvKind::Tilt, 2, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_csv() {
        let cfg = tiny(AlgoKind::CsacLb, 70);
        assert_eq!(train(&cfg).unwrap().csv(), train(&cfg).unwrap().csv());
        let other = TrainConfig { seed: 1, ..cfg.clone() };
        assert_ne!(train(&other).unwrap().csv(), train(&cfg).unwrap().csv());
    }

    proptest! {
        #[test]
        fn scale_std_respects_floor(xs in proptest::collection::vec(-1e3f64..1e3, 0..40)) {
            let mut s = RunningScale::default();
            for x in &xs {
                s.push(*x);
            }
            prop_assert!(s.std() >= STD_FLOOR);
        }

        #[test]
        fn normalised_rewards_stay_clipped(r in -1e9f64..1e9, eps in proptest::collection::vec(-500f64..0.0, 2..10)) {
            let mut n = Normalizers::new(1);
            for e in eps {
                n.ret.push(e);
            }
            let flags = NormalizeFlags::from_config(&TrainConfig::default());
            let v = n.reward(r, &flags);
            prop_assert!((-10.0..=10.0).contains(&v));
        }
    }
}
