//! Constrained soft actor-critic toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`barrier`]: log barrier, linear smoothed log barrier, the rectified
//!   and shifted variant used on the safety critic, and the gap bound.
//! - [`nn`]: dense feed-forward networks with hand-written reverse mode,
//!   Adam and polyak averaging.
//! - [`sac`]: squashed Gaussian policy, double-Q critics, critic targets,
//!   entropy temperature and the replay buffer.
//! - [`algos`]: the barrier agent (CSAC-LB), SAC-Lagrangian and
//!   reward-shaped SAC, and the per-step update.
//! - [`envs`]: pendulum and cart-pole control tasks plus a point-goal
//!   navigation stand-in.
//! - [`harness`]: training loop, normalisation, evaluation, configuration
//!   and CSV logging.
//! - [`optbench`]: convex problems checking the barrier optimum against the
//!   true constrained optimum.

pub mod algos;
pub mod barrier;
pub mod envs;
pub mod harness;
pub mod nn;
pub mod optbench;
pub mod rng;
pub mod sac;
