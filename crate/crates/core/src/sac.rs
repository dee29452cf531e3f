//! Soft actor-critic building blocks shared by every agent.

use std::f64::consts::PI;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use thiserror::Error;

use crate::nn::{AdamState, DenseNet, ForwardCache, NnError};
use crate::rng::Rng;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Stabiliser inside the tanh change-of-variables logarithm.
pub const SQUASH_EPS: f64 = 1e-6;
/// Largest double below 1; `tanh` rounds to exactly 1 for |u| > ~19.
const ACTION_BOUND: f64 = 1.0 - f64::EPSILON / 2.0;

fn squash(u: f64) -> f64 {
    u.tanh().clamp(-ACTION_BOUND, ACTION_BOUND)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("replay buffer holds {len} transitions, cannot sample {requested}")]
    Underfilled { len: usize, requested: usize },
    #[error("replay buffer capacity must be positive")]
    ZeroCapacity,
}

/// Squashed Gaussian policy. The trunk maps an observation to the mean and
/// raw log standard deviation of each of the `k` action dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub trunk: DenseNet,
    act_dim: usize,
}

/// Reparameterised actions and log-likelihoods for a batch, with everything
/// the backward pass needs.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub actions: Array2<f64>,
    pub logp: Array1<f64>,
    noise: Array2<f64>,
    std: Array2<f64>,
    // 1.0 where the raw log-std lies inside the clamp range
    ls_pass: Array2<f64>,
    cache: ForwardCache,
}

impl GaussianPolicy {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self, NnError> {
        let trunk = DenseNet::init(&layer_sizes(obs_dim, hidden, 2 * act_dim), rng)?;
        Ok(Self { trunk, act_dim })
    }

    pub fn from_trunk(trunk: DenseNet) -> Result<Self, NnError> {
        let out = trunk.output_dim();
        if !out.is_multiple_of(2) {
            return Err(NnError::ShapeMismatch {
                what: "policy trunk output (must be even)",
                expected: out + 1,
                got: out,
            });
        }
        Ok(Self {
            trunk,
            act_dim: out / 2,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Batched reparameterised sample with standard normal `noise`.
    pub fn sample(&self, obs: ArrayView2<'_, f64>, noise: ArrayView2<'_, f64>) -> Result<PolicySample, NnError> {
        let k = self.act_dim;
        if noise.ncols() != k || noise.nrows() != obs.nrows() {
            return Err(NnError::ShapeMismatch {
                what: "policy noise",
                expected: obs.nrows() * k,
                got: noise.len(),
            });
        }
        let (out, cache) = self.trunk.forward_cached(obs)?;
        let mean = out.slice(s![.., ..k]);
        let raw_ls = out.slice(s![.., k..]);
        let ls = raw_ls.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let ls_pass = raw_ls.mapv(|v| {
            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&v) {
                1.0
            } else {
                0.0
            }
        });
        let std = ls.mapv(f64::exp);
        let mut actions = Array2::zeros((obs.nrows(), k));
        let mut logp = Array1::zeros(obs.nrows());
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        for i in 0..obs.nrows() {
            let mut lp = 0.0;
            for j in 0..k {
                let e = noise[(i, j)];
                let u = mean[(i, j)] + std[(i, j)] * e;
                let a = squash(u);
                actions[(i, j)] = a;
                lp += -0.5 * e * e - ls[(i, j)] - half_ln_2pi;
                lp -= (1.0 - a * a + SQUASH_EPS).ln();
            }
            logp[i] = lp;
        }
        Ok(PolicySample {
            actions,
            logp,
            noise: noise.to_owned(),
            std,
            ls_pass,
            cache,
        })
    }

    /// Parameter gradient of a loss given its partials with respect to the
    /// sampled actions and log-likelihoods.
    pub fn backward(
        &self,
        sample: &PolicySample,
        d_actions: ArrayView2<'_, f64>,
        d_logp: &Array1<f64>,
    ) -> Result<Vec<f64>, NnError> {
        let (n, k) = sample.actions.dim();
        let mut upstream = Array2::zeros((n, 2 * k));
        for i in 0..n {
            for j in 0..k {
                let a = sample.actions[(i, j)];
                let one_m = 1.0 - a * a;
                let du = d_actions[(i, j)] * one_m
                    + d_logp[i] * 2.0 * a * one_m / (one_m + SQUASH_EPS);
                upstream[(i, j)] = du;
                upstream[(i, k + j)] = (du * sample.std[(i, j)] * sample.noise[(i, j)]
                    - d_logp[i])
                    * sample.ls_pass[(i, j)];
            }
        }
        let (grads, _) = self.trunk.backward(&sample.cache, upstream.view(), true)?;
        Ok(grads.expect("requested"))
    }

    pub fn sample_one(&self, obs: &[f64], noise: &[f64]) -> Result<(Vec<f64>, f64), NnError> {
        let o = ArrayView2::from_shape((1, obs.len()), obs).expect("row");
        let e = ArrayView2::from_shape((1, noise.len()), noise).expect("row");
        let s = self.sample(o, e)?;
        Ok((s.actions.row(0).to_vec(), s.logp[0]))
    }

    /// Deterministic action `tanh(mean)`.
    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>, NnError> {
        let out = self.trunk.forward_one(obs)?;
        Ok(out[..self.act_dim].iter().map(|&m| squash(m)).collect())
    }
}

pub fn policy_sample(policy: &GaussianPolicy, obs: &[f64], noise: &[f64]) -> Result<(Vec<f64>, f64), NnError> {
    policy.sample_one(obs, noise)
}

pub fn policy_mean_action(policy: &GaussianPolicy, obs: &[f64]) -> Result<Vec<f64>, NnError> {
    policy.mean_action(obs)
}

pub fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

pub fn standard_normal(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(rand_distr::StandardNormal))
}

/// Pair of critics over the concatenated observation and action.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleQ {
    pub q1: DenseNet,
    pub q2: DenseNet,
}

impl DoubleQ {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self, NnError> {
        let sizes = layer_sizes(obs_dim + act_dim, hidden, 1);
        Ok(Self {
            q1: DenseNet::init(&sizes, rng)?,
            q2: DenseNet::init(&sizes, rng)?,
        })
    }

    pub fn from_nets(q1: DenseNet, q2: DenseNet) -> Result<Self, NnError> {
        if q1.layer_sizes() != q2.layer_sizes() || q1.output_dim() != 1 {
            return Err(NnError::ShapeMismatch {
                what: "double-Q critic pair",
                expected: q1.params().len(),
                got: q2.params().len(),
            });
        }
        Ok(Self { q1, q2 })
    }

    pub fn values(&self, obs: ArrayView2<'_, f64>, act: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array1<f64>), NnError> {
        let x = join(obs, act);
        let v1 = self.q1.forward(x.view())?.column(0).to_owned();
        let v2 = self.q2.forward(x.view())?.column(0).to_owned();
        Ok((v1, v2))
    }

    pub fn min(&self, obs: ArrayView2<'_, f64>, act: ArrayView2<'_, f64>) -> Result<Array1<f64>, NnError> {
        let (a, b) = self.values(obs, act)?;
        Ok(Zip::from(&a).and(&b).map_collect(|&x, &y| x.min(y)))
    }

    pub fn max(&self, obs: ArrayView2<'_, f64>, act: ArrayView2<'_, f64>) -> Result<Array1<f64>, NnError> {
        let (a, b) = self.values(obs, act)?;
        Ok(Zip::from(&a).and(&b).map_collect(|&x, &y| x.max(y)))
    }
}

pub fn join(obs: ArrayView2<'_, f64>, act: ArrayView2<'_, f64>) -> Array2<f64> {
    concatenate(Axis(1), &[obs, act]).expect("row counts agree")
}

/// Entropy temperature, optimised in log space so `alpha` stays positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTemperature {
    pub log_alpha: f64,
    pub target_entropy: f64,
    optimizer: AdamState,
}

impl EntropyTemperature {
    pub fn new(init_alpha: f64, target_entropy: f64) -> Self {
        Self {
            log_alpha: init_alpha.ln(),
            target_entropy,
            optimizer: AdamState::new(1),
        }
    }

    /// Default target entropy `-k` for a `k`-dimensional action.
    pub fn for_action_dim(init_alpha: f64, act_dim: usize) -> Self {
        Self::new(init_alpha, -(act_dim as f64))
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Derivative of `-log_alpha * (mean_logp + target_entropy)`.
    pub fn grad(&self, mean_logp: f64) -> f64 {
        -(mean_logp + self.target_entropy)
    }

    /// Adam step on the temperature loss.
    pub fn update(&mut self, mean_logp: f64, lr: f64) -> Result<(), NnError> {
        let g = [self.grad(mean_logp)];
        let mut p = [self.log_alpha];
        self.optimizer.step(&mut p, &g, lr)?;
        self.log_alpha = p[0];
        Ok(())
    }

    /// Plain gradient step on the temperature loss.
    pub fn sgd_update(&mut self, mean_logp: f64, lr: f64) {
        self.log_alpha -= lr * self.grad(mean_logp);
    }
}

pub fn temperature_update(temp: &mut EntropyTemperature, logp: &Array1<f64>, lr: f64) -> Result<(), NnError> {
    temp.update(logp.mean().unwrap_or(0.0), lr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// A sampled minibatch, one row per transition. `dones` holds 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub costs: Array1<f64>,
    pub next_obs: Array2<f64>,
    pub dones: Array1<f64>,
}

impl Batch {
    pub fn from_transitions<'a, I>(items: I) -> Self
    where
        I: IntoIterator<Item = &'a Transition>,
        I::IntoIter: ExactSizeIterator,
    {
        let items = items.into_iter();
        let n = items.len();
        let mut obs = Vec::new();
        let mut actions = Vec::new();
        let mut next_obs = Vec::new();
        let mut rewards = Vec::with_capacity(n);
        let mut costs = Vec::with_capacity(n);
        let mut dones = Vec::with_capacity(n);
        let (mut od, mut ad) = (0, 0);
        for t in items {
            od = t.obs.len();
            ad = t.action.len();
            obs.extend_from_slice(&t.obs);
            actions.extend_from_slice(&t.action);
            next_obs.extend_from_slice(&t.next_obs);
            rewards.push(t.reward);
            costs.push(t.cost);
            dones.push(if t.done { 1.0 } else { 0.0 });
        }
        Self {
            obs: Array2::from_shape_vec((n, od), obs).expect("uniform widths"),
            actions: Array2::from_shape_vec((n, ad), actions).expect("uniform widths"),
            rewards: Array1::from(rewards),
            costs: Array1::from(costs),
            next_obs: Array2::from_shape_vec((n, od), next_obs).expect("uniform widths"),
            dones: Array1::from(dones),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Ring buffer of transitions with uniform sampling with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        Ok(Self {
            items: Vec::new(),
            capacity,
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Oldest-first view of the stored transitions.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    pub fn sample_indices(&self, n: usize, rng: &mut Rng) -> Result<Vec<usize>, ReplayError> {
        if self.items.len() < n || self.items.is_empty() {
            return Err(ReplayError::Underfilled {
                len: self.items.len(),
                requested: n,
            });
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Batch, ReplayError> {
        let idx = self.sample_indices(n, rng)?;
        Ok(Batch::from_transitions(idx.iter().map(|&i| &self.items[i]).collect::<Vec<_>>()))
    }
}

/// Soft Bellman target for the reward critics:
/// `r + (1 - done) * gamma * (min(q1', q2')(s', a') - alpha * log pi(a'|s'))`
/// with `a'` drawn from the current policy at `s'` (`next`).
pub fn reward_critic_target(
    batch: &Batch,
    target: &DoubleQ,
    next: &PolicySample,
    gamma: f64,
    alpha: f64,
) -> Result<Array1<f64>, NnError> {
    let q_next = target.min(batch.next_obs.view(), next.actions.view())?;
    let mut y = batch.rewards.clone();
    Zip::from(&mut y)
        .and(&batch.dones)
        .and(&q_next)
        .and(&next.logp)
        .for_each(|y, &d, &q, &lp| *y += (1.0 - d) * gamma * (q - alpha * lp));
    Ok(y)
}

/// Cost critic target `c + (1 - done) * gamma_c * max(q1', q2')(s', a')`.
pub fn cost_critic_target(
    batch: &Batch,
    target: &DoubleQ,
    next: &PolicySample,
    gamma_c: f64,
) -> Result<Array1<f64>, NnError> {
    let q_next = target.max(batch.next_obs.view(), next.actions.view())?;
    let mut y = batch.costs.clone();
    Zip::from(&mut y)
        .and(&batch.dones)
        .and(&q_next)
        .for_each(|y, &d, &q| *y += (1.0 - d) * gamma_c * q);
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Rng, Stream};
    use ndarray::array;
    use proptest::prelude::*;

    fn rng(seed: u64) -> Rng {
        substream(seed, Stream::NetInit)
    }

    /// Policy whose trunk ignores the observation and emits fixed outputs.
    fn constant_policy(obs_dim: usize, mean: &[f64], log_std: &[f64]) -> GaussianPolicy {
        let k = mean.len();
        let mut trunk = DenseNet::zeros(&[obs_dim, 4, 2 * k]).unwrap();
        let (_, b) = trunk.layer_mut(1);
        b[..k].copy_from_slice(mean);
        b[k..].copy_from_slice(log_std);
        GaussianPolicy::from_trunk(trunk).unwrap()
    }

    /// Critic pair returning constants `c1`, `c2`.
    pub(crate) fn constant_double_q(in_dim: usize, c1: f64, c2: f64) -> DoubleQ {
        let mut q1 = DenseNet::zeros(&[in_dim, 4, 1]).unwrap();
        q1.layer_mut(1).1[0] = c1;
        let mut q2 = DenseNet::zeros(&[in_dim, 4, 1]).unwrap();
        q2.layer_mut(1).1[0] = c2;
        DoubleQ::from_nets(q1, q2).unwrap()
    }

    fn one_transition(r: f64, c: f64, done: bool) -> Batch {
        Batch::from_transitions(&[Transition {
            obs: vec![0.1, 0.2],
            action: vec![0.3],
            reward: r,
            cost: c,
            next_obs: vec![0.4, 0.5],
            done,
        }])
    }

    #[test]
    fn zero_mean_zero_noise_gives_zero_action() {
        let p = constant_policy(2, &[0.0], &[0.3]);
        let (a, logp) = p.sample_one(&[1.0, 2.0], &[0.0]).unwrap();
        assert_eq!(a, vec![0.0]);
        // only the Gaussian term remains (squash term ln(1 + eps) ~ 1e-6)
        let expect = -0.3 - 0.5 * (2.0 * PI).ln();
        assert!((logp - expect).abs() < 2e-6);
    }

    #[test]
    fn vanishing_noise_scale_gives_tanh_mean() {
        let p = constant_policy(2, &[0.7, -1.2], &[-20.0, -25.0]);
        let (a, _) = p.sample_one(&[0.0, 0.0], &[3.0, -3.0]).unwrap();
        assert!((a[0] - 0.7f64.tanh()).abs() < 1e-8);
        assert!((a[1] - (-1.2f64).tanh()).abs() < 1e-8);
        assert_eq!(p.mean_action(&[0.0, 0.0]).unwrap(), vec![0.7f64.tanh(), (-1.2f64).tanh()]);
    }

    #[test]
    fn log_std_is_clamped() {
        let wide = constant_policy(1, &[0.0], &[9.0]);
        let capped = constant_policy(1, &[0.0], &[2.0]);
        let a = wide.sample_one(&[0.0], &[0.1]).unwrap();
        let b = capped.sample_one(&[0.0], &[0.1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn induced_density_integrates_to_one() {
        // a = tanh(u): integrate p(a) da over (-1, 1) via u, da = (1 - a^2) du
        for &(m, ls) in &[(0.0, 0.0), (0.5, -0.7), (-1.0, 0.4)] {
            let p = constant_policy(1, &[m], &[ls]);
            let sigma = f64::exp(ls);
            let (lo, hi) = (m - 12.0 * sigma, m + 12.0 * sigma);
            let n = 20_000;
            let h = (hi - lo) / n as f64;
            let mut total = 0.0;
            for i in 0..n {
                let u = lo + (i as f64 + 0.5) * h;
                let e = (u - m) / sigma;
                let (a, logp) = p.sample_one(&[0.0], &[e]).unwrap();
                total += logp.exp() * (1.0 - a[0] * a[0]) * h;
            }
            assert!((total - 1.0).abs() < 1e-3, "mass {total} for ({m}, {ls})");
        }
    }

    #[test]
    fn mean_action_of_zero_trunk_is_zero() {
        let p = GaussianPolicy::from_trunk(DenseNet::zeros(&[3, 8, 2]).unwrap()).unwrap();
        assert_eq!(p.mean_action(&[1.0, -1.0, 0.5]).unwrap(), vec![0.0]);
    }

    #[test]
    fn mean_action_is_zero_noise_limit() {
        let p = GaussianPolicy::new(3, 2, &[16, 16], &mut rng(1)).unwrap();
        let obs = [0.2, -0.4, 0.9];
        let (a, _) = p.sample_one(&obs, &[0.0, 0.0]).unwrap();
        let m = p.mean_action(&obs).unwrap();
        for (x, y) in a.iter().zip(&m) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        let p = GaussianPolicy::new(3, 2, &[8, 8], &mut rng(2)).unwrap();
        let mut r = rng(3);
        let obs = Array2::from_shape_fn((5, 3), |_| r.random_range(-1.0..1.0));
        let noise = standard_normal(&mut r, 5, 2);
        let wa = array![0.3, -1.1];
        // loss = mean_i [ sum_j wa_j a_ij + 0.7 logp_i ]
        let loss = |pol: &GaussianPolicy| {
            let s = pol.sample(obs.view(), noise.view()).unwrap();
            (s.actions.dot(&wa) + &s.logp * 0.7).mean().unwrap()
        };
        let s = p.sample(obs.view(), noise.view()).unwrap();
        let n = 5.0;
        let d_a = Array2::from_shape_fn((5, 2), |(_, j)| wa[j] / n);
        let d_lp = Array1::from_elem(5, 0.7 / n);
        let g = p.backward(&s, d_a.view(), &d_lp).unwrap();
        let h = 1e-6;
        let mut probe = p.clone();
        for i in 0..g.len() {
            let orig = probe.trunk.params()[i];
            probe.trunk.params_mut()[i] = orig + h;
            let lp = loss(&probe);
            probe.trunk.params_mut()[i] = orig - h;
            let lm = loss(&probe);
            probe.trunk.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn reward_target_cases() {
        let q = constant_double_q(3, 1.0, 2.0);
        let p = constant_policy(2, &[0.0], &[0.0]);
        let b = one_transition(1.0, 0.0, false);
        let next = p.sample(b.next_obs.view(), array![[0.4]].view()).unwrap();
        let y = reward_critic_target(&b, &q, &next, 0.99, 0.0).unwrap();
        assert!((y[0] - 1.99).abs() < 1e-12);
        let y = reward_critic_target(&b, &q, &next, 0.0, 0.5).unwrap();
        assert_eq!(y[0], 1.0);
        let done = one_transition(1.0, 0.0, true);
        let y = reward_critic_target(&done, &q, &next, 0.99, 0.5).unwrap();
        assert_eq!(y[0], 1.0);
        // entropy bonus enters the bootstrapped value
        let y = reward_critic_target(&b, &q, &next, 0.99, 0.5).unwrap();
        assert!((y[0] - (1.0 + 0.99 * (1.0 - 0.5 * next.logp[0]))).abs() < 1e-12);
    }

    #[test]
    fn cost_target_cases() {
        let q = constant_double_q(3, 1.0, 2.0);
        let p = constant_policy(2, &[0.0], &[0.0]);
        let b = one_transition(0.0, 0.0, false);
        let next = p.sample(b.next_obs.view(), array![[0.0]].view()).unwrap();
        assert!((cost_critic_target(&b, &q, &next, 0.99).unwrap()[0] - 1.98).abs() < 1e-12);
        let b = one_transition(0.0, 1.0, false);
        assert_eq!(cost_critic_target(&b, &q, &next, 0.0).unwrap()[0], 1.0);
        let b = one_transition(0.0, 1.0, true);
        assert_eq!(cost_critic_target(&b, &q, &next, 0.99).unwrap()[0], 1.0);
    }

    #[test]
    fn targets_do_not_depend_on_row_order() {
        let mut r = rng(8);
        let p = GaussianPolicy::new(2, 1, &[8], &mut r).unwrap();
        let q = DoubleQ::new(2, 1, &[8], &mut r).unwrap();
        let ts: Vec<Transition> = (0..6)
            .map(|i| Transition {
                obs: vec![i as f64 * 0.1, 0.3],
                action: vec![0.1],
                reward: i as f64,
                cost: (i % 2) as f64,
                next_obs: vec![0.2, i as f64 * -0.1],
                done: i == 3,
            })
            .collect();
        let fwd = Batch::from_transitions(&ts);
        let rev_ts: Vec<_> = ts.iter().rev().cloned().collect();
        let rev = Batch::from_transitions(&rev_ts);
        let noise = standard_normal(&mut r, 6, 1);
        let noise_rev = Array2::from_shape_fn((6, 1), |(i, j)| noise[(5 - i, j)]);
        let nf = p.sample(fwd.next_obs.view(), noise.view()).unwrap();
        let nr = p.sample(rev.next_obs.view(), noise_rev.view()).unwrap();
        let yf = reward_critic_target(&fwd, &q, &nf, 0.99, 0.2).unwrap();
        let yr = reward_critic_target(&rev, &q, &nr, 0.99, 0.2).unwrap();
        let cf = cost_critic_target(&fwd, &q, &nf, 0.99).unwrap();
        let cr = cost_critic_target(&rev, &q, &nr, 0.99).unwrap();
        for i in 0..6 {
            assert_eq!(yf[i], yr[5 - i]);
            assert_eq!(cf[i], cr[5 - i]);
        }
    }

    #[test]
    fn temperature_cases() {
        let mut t = EntropyTemperature::for_action_dim(1.0, 2);
        assert_eq!(t.target_entropy, -2.0);
        t.update(2.0, 3e-4).unwrap();
        assert_eq!(t.log_alpha, 0.0);

        let mut t = EntropyTemperature::for_action_dim(1.0, 1);
        t.update(1.5, 3e-4).unwrap();
        assert!(t.alpha() > 1.0);

        // mean(logp) + target_entropy = 1
        let mut plain = EntropyTemperature::new(1.0, -1.0);
        plain.sgd_update(2.0, 3e-4);
        assert!((plain.log_alpha - 3e-4).abs() < 1e-18);
        let mut adam = EntropyTemperature::new(1.0, -1.0);
        adam.update(2.0, 3e-4).unwrap();
        // first Adam step: m_hat = g, v_hat = g^2
        let expect = 3e-4 * 1.0 / (1.0 + 1e-8);
        assert!((adam.log_alpha - expect).abs() < 1e-18);
    }

    #[test]
    fn ring_semantics() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for i in 0..4 {
            buf.push(Transition {
                obs: vec![i as f64],
                action: vec![0.0],
                reward: i as f64,
                cost: 0.0,
                next_obs: vec![0.0],
                done: false,
            });
        }
        assert_eq!(buf.len(), 3);
        let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![1.0, 2.0, 3.0]);
        assert!(ReplayBuffer::new(0).is_err());
    }

    fn filled(n: usize) -> ReplayBuffer {
        let mut buf = ReplayBuffer::new(100).unwrap();
        for i in 0..n {
            buf.push(Transition {
                obs: vec![i as f64],
                action: vec![0.0],
                reward: i as f64,
                cost: 0.0,
                next_obs: vec![0.0],
                done: false,
            });
        }
        buf
    }

    #[test]
    fn sampling_is_seeded_and_checked() {
        let buf = filled(10);
        let a = buf.sample(5, &mut substream(4, Stream::BufferSampling)).unwrap();
        let b = buf.sample(5, &mut substream(4, Stream::BufferSampling)).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            buf.sample(11, &mut rng(0)).unwrap_err(),
            ReplayError::Underfilled { len: 10, requested: 11 }
        );
    }

    #[test]
    fn sampling_is_uniform() {
        let buf = filled(10);
        let draws = 100_000;
        let mut r = substream(17, Stream::BufferSampling);
        let mut counts = [0usize; 10];
        for _ in 0..draws / 10 {
            for i in buf.sample_indices(10, &mut r).unwrap() {
                counts[i] += 1;
            }
        }
        let expect = draws as f64 / 10.0;
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - expect).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn actions_stay_inside_the_open_box(seed in 0u64..500, scale in 0.0f64..5.0) {
            let mut r = rng(seed);
            let p = GaussianPolicy::new(3, 2, &[8], &mut r).unwrap();
            let obs = Array2::from_shape_fn((4, 3), |_| r.random_range(-10.0..10.0) * scale);
            let noise = standard_normal(&mut r, 4, 2) * scale;
            let s = p.sample(obs.view(), noise.view()).unwrap();
            prop_assert!(s.actions.iter().all(|a| a.abs() < 1.0));
            prop_assert!(s.logp.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn temperature_stays_positive(steps in proptest::collection::vec(-50.0f64..50.0, 1..50)) {
            let mut t = EntropyTemperature::for_action_dim(1.0, 1);
            for lp in steps {
                t.update(lp, 0.1).unwrap();
                prop_assert!(t.alpha() > 0.0);
            }
        }

        #[test]
        fn min_max_bracket_the_pair(seed in 0u64..200) {
            let mut r = rng(seed);
            let q = DoubleQ::new(2, 1, &[4], &mut r).unwrap();
            let o = Array2::from_shape_fn((3, 2), |_| r.random_range(-1.0..1.0));
            let a = Array2::from_shape_fn((3, 1), |_| r.random_range(-1.0..1.0));
            let (v1, v2) = q.values(o.view(), a.view()).unwrap();
            let lo = q.min(o.view(), a.view()).unwrap();
            let hi = q.max(o.view(), a.view()).unwrap();
            for i in 0..3 {
                prop_assert!(lo[i] <= v1[i] && lo[i] <= v2[i]);
                prop_assert!(hi[i] >= v1[i] && hi[i] >= v2[i]);
            }
        }
    }
}
