//! Constrained control tasks.
//!
//! - Tilt and Upright: torque-limited pendulum, angle measured from upright.
//! - Move and Swing: frictionless cart-pole with a bounded horizontal force.
//! - PointNav: point mass in a 4 m arena reaching a goal while avoiding
//!   circular hazards.
//!
//! Costs are binary violation indicators. No task terminates on a violation;
//! an episode ends at the horizon (or, for PointNav, on reaching the goal).
//! Agents act in `(-1, 1)^k`; [`Env::step`] rescales to native units.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("episode already finished; call reset first")]
    EpisodeFinished,
    #[error("action has {got} components, environment expects {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("unknown environment '{0}' (expected tilt, upright, move, swing or pointnav)")]
    UnknownEnv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Tilt,
    Upright,
    Move,
    Swing,
    #[serde(alias = "point_nav")]
    PointNav,
}

impl EnvKind {
    pub const ALL: [EnvKind; 5] = [
        EnvKind::Tilt,
        EnvKind::Upright,
        EnvKind::Move,
        EnvKind::Swing,
        EnvKind::PointNav,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Tilt => "tilt",
            EnvKind::Upright => "upright",
            EnvKind::Move => "move",
            EnvKind::Swing => "swing",
            EnvKind::PointNav => "pointnav",
        }
    }

    pub fn make(self) -> Box<dyn Env> {
        match self {
            EnvKind::Tilt => Box::new(PendulumEnv::new(PendulumTask::Tilt)),
            EnvKind::Upright => Box::new(PendulumEnv::new(PendulumTask::Upright)),
            EnvKind::Move => Box::new(CartpoleEnv::new(CartpoleTask::Move)),
            EnvKind::Swing => Box::new(CartpoleEnv::new(CartpoleTask::Swing)),
            EnvKind::PointNav => Box::new(PointNavEnv::new()),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "point_nav" && *k == EnvKind::PointNav))
            .ok_or_else(|| EnvError::UnknownEnv(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
}

pub trait Env {
    fn kind(&self) -> EnvKind;
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Native units per unit of normalised action.
    fn action_scale(&self) -> f64;
    fn reset(&mut self, rng: &mut Rng) -> Vec<f64>;
    fn observation(&self) -> Vec<f64>;
    /// Advance with an action in native units, clipped to the native bounds.
    fn step_native(&mut self, action: &[f64]) -> Result<StepResult, EnvError>;

    /// Advance with a normalised action in `(-1, 1)^k`.
    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        let scale = self.action_scale();
        let native: Vec<f64> = action.iter().map(|a| a * scale).collect();
        self.step_native(&native)
    }
}

pub fn env_step(env: &mut dyn Env, action: &[f64]) -> Result<StepResult, EnvError> {
    env.step(action)
}

fn check_action(expected: usize, action: &[f64]) -> Result<(), EnvError> {
    if action.len() != expected {
        return Err(EnvError::ActionDim {
            expected,
            got: action.len(),
        });
    }
    Ok(())
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let r = (x + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

fn indicator(violated: bool) -> f64 {
    if violated {
        1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Pendulum

pub const PENDULUM_G: f64 = 10.0;
pub const PENDULUM_M: f64 = 1.0;
pub const PENDULUM_L: f64 = 1.0;
pub const PENDULUM_DT: f64 = 0.05;
pub const PENDULUM_MAX_TORQUE: f64 = 2.0;
pub const PENDULUM_MAX_SPEED: f64 = 8.0;
pub const PENDULUM_HORIZON: usize = 200;
/// Largest angle at which the torque limit can still hold the pole.
pub const UPRIGHT_THETA_LIM: f64 = -0.41151684;
pub const PENDULUM_ANGLE_LIMIT: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PendulumState {
    /// Angle from upright, in `(-pi, pi]`.
    pub theta: f64,
    /// Angular velocity, in `[-8, 8]`.
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PendulumTask {
    Tilt,
    Upright,
}

/// One semi-implicit Euler step of the torque-driven pendulum.
pub fn pendulum_dynamics(state: PendulumState, torque: f64) -> PendulumState {
    let (g, m, l, dt) = (PENDULUM_G, PENDULUM_M, PENDULUM_L, PENDULUM_DT);
    let omega = (state.omega
        + (3.0 * g / (2.0 * l)) * state.theta.sin() * dt
        + (3.0 / (m * l * l)) * torque * dt)
        .clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
    PendulumState {
        theta: wrap_angle(state.theta + omega * dt),
        omega,
    }
}

pub fn pendulum_reward_cost(task: PendulumTask, theta: f64) -> (f64, f64) {
    let reward = match task {
        PendulumTask::Tilt => -theta * theta,
        PendulumTask::Upright => -(UPRIGHT_THETA_LIM - theta).powi(2),
    };
    (reward, indicator(theta.abs() > PENDULUM_ANGLE_LIMIT))
}

#[derive(Debug, Clone)]
pub struct PendulumEnv {
    pub task: PendulumTask,
    pub state: PendulumState,
    t: usize,
    done: bool,
}

impl PendulumEnv {
    pub fn new(task: PendulumTask) -> Self {
        Self {
            task,
            state: PendulumState::default(),
            t: 0,
            done: false,
        }
    }

    /// Start from a given state (for tests and scripted rollouts).
    pub fn set_state(&mut self, state: PendulumState) {
        self.state = state;
        self.t = 0;
        self.done = false;
    }
}

impl Env for PendulumEnv {
    fn kind(&self) -> EnvKind {
        match self.task {
            PendulumTask::Tilt => EnvKind::Tilt,
            PendulumTask::Upright => EnvKind::Upright,
        }
    }

    fn obs_dim(&self) -> usize {
        3
    }

    fn act_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        PENDULUM_HORIZON
    }

    fn action_scale(&self) -> f64 {
        PENDULUM_MAX_TORQUE
    }

    fn reset(&mut self, rng: &mut Rng) -> Vec<f64> {
        let theta = wrap_angle(rng.random_range(-PI..PI));
        let omega = rng.random_range(-1.0..1.0);
        self.set_state(PendulumState { theta, omega });
        self.observation()
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.state.theta.cos(), self.state.theta.sin(), self.state.omega]
    }

    fn step_native(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        check_action(1, action)?;
        let torque = action[0].clamp(-PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE);
        self.state = pendulum_dynamics(self.state, torque);
        self.t += 1;
        self.done = self.t >= PENDULUM_HORIZON;
        let (reward, cost) = pendulum_reward_cost(self.task, self.state.theta);
        Ok(StepResult {
            obs: self.observation(),
            reward,
            cost,
            done: self.done,
        })
    }
}

// ---------------------------------------------------------------------------
// Cart-pole

pub const CARTPOLE_GRAVITY: f64 = 9.8;
pub const CARTPOLE_CART_MASS: f64 = 1.0;
pub const CARTPOLE_POLE_MASS: f64 = 0.1;
pub const CARTPOLE_HALF_LENGTH: f64 = 0.5;
pub const CARTPOLE_DT: f64 = 0.02;
pub const CARTPOLE_MAX_FORCE: f64 = 10.0;
pub const CARTPOLE_HORIZON: usize = 1000;
pub const CART_POSITION_LIMIT: f64 = 0.9;
pub const MOVE_ANGLE_LIMIT: f64 = 0.2;
pub const SWING_ANGLE_LIMIT: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CartpoleState {
    pub x: f64,
    /// Pole angle from upright, wrapped to `(-pi, pi]`.
    pub theta: f64,
    pub x_dot: f64,
    pub theta_dot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CartpoleTask {
    Move,
    Swing,
}

/// Cart and pole accelerations of the frictionless cart-pole.
pub fn cartpole_accelerations(s: &CartpoleState, force: f64) -> (f64, f64) {
    let total = CARTPOLE_CART_MASS + CARTPOLE_POLE_MASS;
    let pml = CARTPOLE_POLE_MASS * CARTPOLE_HALF_LENGTH;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + pml * s.theta_dot * s.theta_dot * sin) / total;
    let theta_acc = (CARTPOLE_GRAVITY * sin - cos * temp)
        / (CARTPOLE_HALF_LENGTH * (4.0 / 3.0 - CARTPOLE_POLE_MASS * cos * cos / total));
    let x_acc = temp - pml * theta_acc * cos / total;
    (x_acc, theta_acc)
}

/// One semi-implicit Euler step: velocities first, then positions.
pub fn cartpole_dynamics(s: CartpoleState, force: f64) -> CartpoleState {
    let (x_acc, theta_acc) = cartpole_accelerations(&s, force);
    let x_dot = s.x_dot + CARTPOLE_DT * x_acc;
    let theta_dot = s.theta_dot + CARTPOLE_DT * theta_acc;
    CartpoleState {
        x: s.x + CARTPOLE_DT * x_dot,
        theta: wrap_angle(s.theta + CARTPOLE_DT * theta_dot),
        x_dot,
        theta_dot,
    }
}

pub fn cartpole_reward_cost(task: CartpoleTask, x: f64, theta: f64) -> (f64, f64) {
    let out_of_track = x.abs() > CART_POSITION_LIMIT;
    match task {
        CartpoleTask::Move => (
            x * x,
            indicator(theta.abs() > MOVE_ANGLE_LIMIT || out_of_track),
        ),
        CartpoleTask::Swing => (
            theta * theta,
            indicator(theta.abs() > SWING_ANGLE_LIMIT || out_of_track),
        ),
    }
}

#[derive(Debug, Clone)]
pub struct CartpoleEnv {
    pub task: CartpoleTask,
    pub state: CartpoleState,
    t: usize,
    done: bool,
}

impl CartpoleEnv {
    pub fn new(task: CartpoleTask) -> Self {
        Self {
            task,
            state: CartpoleState::default(),
            t: 0,
            done: false,
        }
    }

    pub fn set_state(&mut self, state: CartpoleState) {
        self.state = state;
        self.t = 0;
        self.done = false;
    }
}

impl Env for CartpoleEnv {
    fn kind(&self) -> EnvKind {
        match self.task {
            CartpoleTask::Move => EnvKind::Move,
            CartpoleTask::Swing => EnvKind::Swing,
        }
    }

    fn obs_dim(&self) -> usize {
        4
    }

    fn act_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        CARTPOLE_HORIZON
    }

    fn action_scale(&self) -> f64 {
        CARTPOLE_MAX_FORCE
    }

    fn reset(&mut self, rng: &mut Rng) -> Vec<f64> {
        let mut u = || rng.random_range(-0.05..0.05);
        let state = CartpoleState {
            x: u(),
            theta: u(),
            x_dot: u(),
            theta_dot: u(),
        };
        self.set_state(state);
        self.observation()
    }

    fn observation(&self) -> Vec<f64> {
        let s = &self.state;
        vec![s.x, s.theta, s.x_dot, s.theta_dot]
    }

    fn step_native(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        check_action(1, action)?;
        let force = action[0].clamp(-CARTPOLE_MAX_FORCE, CARTPOLE_MAX_FORCE);
        self.state = cartpole_dynamics(self.state, force);
        self.t += 1;
        self.done = self.t >= CARTPOLE_HORIZON;
        let (reward, cost) = cartpole_reward_cost(self.task, self.state.x, self.state.theta);
        Ok(StepResult {
            obs: self.observation(),
            reward,
            cost,
            done: self.done,
        })
    }
}

// ---------------------------------------------------------------------------
// Point-goal navigation

pub const NAV_ARENA_HALF: f64 = 2.0;
pub const NAV_DT: f64 = 0.1;
pub const NAV_MAX_SPEED: f64 = 2.0;
pub const NAV_MAX_ACCEL: f64 = 1.0;
pub const NAV_GOAL_RADIUS: f64 = 0.3;
pub const NAV_HAZARD_RADIUS: f64 = 0.2;
pub const NAV_HAZARDS: usize = 4;
pub const NAV_SENSORS: usize = 8;
pub const NAV_SENSOR_RANGE: f64 = 2.0;
pub const NAV_GOAL_BONUS: f64 = 1.0;
pub const NAV_HORIZON: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Circle {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        dist(p, self.center) <= self.radius
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointNavState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: Circle,
    pub hazards: Vec<Circle>,
    pub step_count: usize,
}

/// Distance along the ray `origin + t * dir` (unit `dir`) to the circle, if hit.
fn ray_hit(origin: [f64; 2], dir: [f64; 2], c: &Circle) -> Option<f64> {
    let rel = [origin[0] - c.center[0], origin[1] - c.center[1]];
    let b = dir[0] * rel[0] + dir[1] * rel[1];
    let cc = rel[0] * rel[0] + rel[1] * rel[1] - c.radius * c.radius;
    if cc <= 0.0 {
        return Some(0.0);
    }
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

impl PointNavState {
    /// Goal offset followed by eight hazard proximity readings in `[0, 1]`
    /// (1 = touching, 0 = nothing within sensor range).
    pub fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(2 + NAV_SENSORS);
        obs.push(self.goal.center[0] - self.pos[0]);
        obs.push(self.goal.center[1] - self.pos[1]);
        for k in 0..NAV_SENSORS {
            let ang = 2.0 * PI * k as f64 / NAV_SENSORS as f64;
            let dir = [ang.cos(), ang.sin()];
            let nearest = self
                .hazards
                .iter()
                .filter_map(|h| ray_hit(self.pos, dir, h))
                .fold(NAV_SENSOR_RANGE, f64::min);
            obs.push(1.0 - nearest.min(NAV_SENSOR_RANGE) / NAV_SENSOR_RANGE);
        }
        obs
    }

    pub fn goal_distance(&self) -> f64 {
        dist(self.pos, self.goal.center)
    }

    pub fn in_hazard(&self) -> bool {
        self.hazards.iter().any(|h| h.contains(self.pos))
    }
}

/// Advance the point mass by one step with a native acceleration.
pub fn pointnav_step(state: &mut PointNavState, accel: [f64; 2]) -> StepResult {
    let before = state.goal_distance();
    for i in 0..2 {
        let a = accel[i].clamp(-NAV_MAX_ACCEL, NAV_MAX_ACCEL);
        state.vel[i] += a * NAV_DT;
    }
    let speed = state.vel[0].hypot(state.vel[1]);
    if speed > NAV_MAX_SPEED {
        let k = NAV_MAX_SPEED / speed;
        state.vel = [state.vel[0] * k, state.vel[1] * k];
    }
    for i in 0..2 {
        let p = state.pos[i] + state.vel[i] * NAV_DT;
        if p.abs() > NAV_ARENA_HALF {
            state.vel[i] = 0.0;
        }
        state.pos[i] = p.clamp(-NAV_ARENA_HALF, NAV_ARENA_HALF);
    }
    state.step_count += 1;
    let after = state.goal_distance();
    let reached = after <= state.goal.radius;
    let mut reward = before - after;
    if reached {
        reward += NAV_GOAL_BONUS;
    }
    StepResult {
        obs: state.observation(),
        reward,
        cost: indicator(state.in_hazard()),
        done: reached || state.step_count >= NAV_HORIZON,
    }
}

#[derive(Debug, Clone)]
pub struct PointNavEnv {
    pub state: PointNavState,
    done: bool,
}

impl Default for PointNavEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl PointNavEnv {
    pub fn new() -> Self {
        Self {
            state: PointNavState {
                pos: [0.0, 0.0],
                vel: [0.0, 0.0],
                goal: Circle {
                    center: [1.5, 1.5],
                    radius: NAV_GOAL_RADIUS,
                },
                hazards: Vec::new(),
                step_count: 0,
            },
            done: false,
        }
    }

    pub fn set_state(&mut self, state: PointNavState) {
        self.state = state;
        self.done = false;
    }
}

impl Env for PointNavEnv {
    fn kind(&self) -> EnvKind {
        EnvKind::PointNav
    }

    fn obs_dim(&self) -> usize {
        2 + NAV_SENSORS
    }

    fn act_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        NAV_HORIZON
    }

    fn action_scale(&self) -> f64 {
        NAV_MAX_ACCEL
    }

    fn reset(&mut self, rng: &mut Rng) -> Vec<f64> {
        let start = [0.0, 0.0];
        let mut sample = |radius: f64, placed: &[Circle]| loop {
            let c = Circle {
                center: [
                    rng.random_range(-NAV_ARENA_HALF..NAV_ARENA_HALF),
                    rng.random_range(-NAV_ARENA_HALF..NAV_ARENA_HALF),
                ],
                radius,
            };
            let clear_of_start = dist(c.center, start) > radius + 0.1;
            let clear_of_others = placed
                .iter()
                .all(|o| dist(o.center, c.center) > o.radius + c.radius);
            if clear_of_start && clear_of_others {
                return c;
            }
        };
        let goal = sample(NAV_GOAL_RADIUS, &[]);
        let mut placed = vec![goal];
        for _ in 0..NAV_HAZARDS {
            let h = sample(NAV_HAZARD_RADIUS, &placed);
            placed.push(h);
        }
        self.set_state(PointNavState {
            pos: start,
            vel: [0.0, 0.0],
            goal,
            hazards: placed.split_off(1),
            step_count: 0,
        });
        self.observation()
    }

    fn observation(&self) -> Vec<f64> {
        self.state.observation()
    }

    fn step_native(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        check_action(2, action)?;
        let res = pointnav_step(&mut self.state, [action[0], action[1]]);
        self.done = res.done;
        Ok(res)
    }
}

// ---------------------------------------------------------------------------
// Trajectory dump

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
}

/// CSV with columns `step, obs_0.., action_0.., reward, cost, done`. `obs` is
/// the observation the action was taken from.
pub fn write_trajectory<W: Write>(out: W, records: &[TrajectoryRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let (od, ad) = records
        .first()
        .map(|r| (r.obs.len(), r.action.len()))
        .unwrap_or((0, 0));
    let mut header = vec!["step".to_string()];
    header.extend((0..od).map(|i| format!("obs_{i}")));
    header.extend((0..ad).map(|i| format!("action_{i}")));
    header.extend(["reward", "cost", "done"].map(String::from));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.step.to_string()];
        row.extend(r.obs.iter().map(|v| v.to_string()));
        row.extend(r.action.iter().map(|v| v.to_string()));
        row.push(r.reward.to_string());
        row.push(r.cost.to_string());
        row.push(u8::from(r.done).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Run one episode from a fresh reset, choosing normalised actions with `policy`.
pub fn rollout<F>(env: &mut dyn Env, rng: &mut Rng, mut policy: F) -> Result<Vec<TrajectoryRecord>, EnvError>
where
    F: FnMut(usize, &[f64]) -> Vec<f64>,
{
    let mut obs = env.reset(rng);
    let mut out = Vec::with_capacity(env.horizon());
    for step in 0.. {
        let action = policy(step, &obs);
        let res = env.step(&action)?;
        out.push(TrajectoryRecord {
            step,
            obs: std::mem::replace(&mut obs, res.obs),
            action,
            reward: res.reward,
            cost: res.cost,
            done: res.done,
        });
        if res.done {
            break;
        }
    }
    Ok(out)
}
