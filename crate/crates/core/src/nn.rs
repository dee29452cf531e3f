//! Dense feed-forward networks with hand-written reverse mode.
//!
//! A [`DenseNet`] keeps all parameters in one flat buffer. Layer `l` occupies
//! a row-major `(fan_out, fan_in)` weight block followed by its `fan_out`
//! biases. Hidden layers use the rectifier; the output layer is linear.
//! Gradients use the same flat layout, which keeps [`AdamState`] and
//! [`polyak_update`] plain elementwise loops.

use ndarray::{linalg::general_mat_mul, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("a network needs at least two layer sizes, all positive: {0:?}")]
    InvalidLayerSizes(Vec<usize>),
    #[error("polyak factor must lie in [0, 1], got {0}")]
    InvalidTau(f64),
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("malformed network document: {0}")]
    Document(String),
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), NnError> {
    if expected != got {
        return Err(NnError::ShapeMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Default hidden layer widths.
pub const DEFAULT_HIDDEN: [usize; 2] = [256, 256];

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`DenseNet::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    // inputs[l] is the input of layer l (post-activation of layer l-1)
    inputs: Vec<Array2<f64>>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl DenseNet {
    /// All-zero network.
    pub fn zeros(sizes: &[usize]) -> Result<Self, NnError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NnError::InvalidLayerSizes(sizes.to_vec()));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        })
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn init(sizes: &[usize], rng: &mut Rng) -> Result<Self, NnError> {
        let mut net = Self::zeros(sizes)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = fan_out * fan_in + fan_out;
            for p in &mut net.params[offset..offset + n] {
                *p = rng.random_range(-bound..bound);
            }
            offset += n;
        }
        Ok(net)
    }

    pub fn from_parts(sizes: &[usize], params: Vec<f64>) -> Result<Self, NnError> {
        let mut net = Self::zeros(sizes)?;
        check_len("parameter vector", net.params.len(), params.len())?;
        net.params = params;
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    /// Weight matrix `(fan_out, fan_in)` and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let o = self.layer_offset(l);
        let w = ArrayView2::from_shape((fan_out, fan_in), &self.params[o..o + fan_out * fan_in])
            .expect("layout");
        let b = ArrayView1::from(&self.params[o + fan_out * fan_in..o + fan_out * fan_in + fan_out]);
        (w, b)
    }

    /// Mutable weight block and bias slice of layer `l`.
    pub fn layer_mut(&mut self, l: usize) -> (ArrayViewMut2<'_, f64>, &mut [f64]) {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let o = self.layer_offset(l);
        let (w, rest) = self.params[o..].split_at_mut(fan_out * fan_in);
        let w = ArrayViewMut2::from_shape((fan_out, fan_in), w).expect("layout");
        (w, &mut rest[..fan_out])
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<(), NnError> {
        check_len("network input width", self.input_dim(), x.ncols())
    }

    fn affine(&self, l: usize, x: &ArrayView2<'_, f64>, relu: bool) -> Array2<f64> {
        let (w, b) = self.layer(l);
        let mut z = x.dot(&w.t());
        z += &b;
        if relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
        z
    }

    /// Batched forward pass: `x` is `(batch, input_dim)`.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(&x)?;
        let last = self.num_layers() - 1;
        let mut h = self.affine(0, &x, last != 0);
        for l in 1..=last {
            h = self.affine(l, &h.view(), l != last);
        }
        Ok(h)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.forward(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_cached(
        &self,
        x: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, ForwardCache), NnError> {
        self.check_input(&x)?;
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        inputs.push(x.to_owned());
        for l in 0..last {
            let h = self.affine(l, &inputs[l].view(), true);
            inputs.push(h);
        }
        let out = self.affine(last, &inputs[last].view(), false);
        Ok((out, ForwardCache { inputs }))
    }

    /// Reverse pass. `upstream` is `dL/d(output)` per batch row; parameter
    /// gradients are summed over rows, so callers fold any batch averaging
    /// into `upstream`. Returns the flat parameter gradient (when requested)
    /// and `dL/d(input)`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
        param_grads: bool,
    ) -> Result<(Option<Vec<f64>>, Array2<f64>), NnError> {
        let batch = cache.inputs[0].nrows();
        check_len("upstream batch", batch, upstream.nrows())?;
        check_len("upstream width", self.output_dim(), upstream.ncols())?;
        let mut grads = param_grads.then(|| vec![0.0; self.params.len()]);
        let mut delta = upstream.to_owned();
        for l in (0..self.num_layers()).rev() {
            let input = &cache.inputs[l];
            let (w, _) = self.layer(l);
            if let Some(g) = grads.as_mut() {
                let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
                let o = self.layer_offset(l);
                let (gw, gb) = g[o..o + fan_out * fan_in + fan_out].split_at_mut(fan_out * fan_in);
                let mut gw = ArrayViewMut2::from_shape((fan_out, fan_in), gw).expect("layout");
                general_mat_mul(1.0, &delta.t(), input, 0.0, &mut gw);
                for (gb, col) in gb.iter_mut().zip(delta.axis_iter(Axis(1))) {
                    *gb = col.sum();
                }
            }
            let mut d_input = delta.dot(&w);
            if l > 0 {
                ndarray::Zip::from(&mut d_input)
                    .and(input)
                    .for_each(|d, &h| {
                        if h <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            delta = d_input;
        }
        Ok((grads, delta))
    }

    /// Outputs and flat parameter gradients for a batch.
    pub fn value_and_grad(
        &self,
        x: ArrayView2<'_, f64>,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Vec<f64>), NnError> {
        let (out, cache) = self.forward_cached(x)?;
        let (grads, _) = self.backward(&cache, upstream, true)?;
        Ok((out, grads.expect("requested")))
    }

    pub fn to_document(&self) -> NetDocument {
        let mut weights = Vec::with_capacity(self.num_layers());
        let mut biases = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            weights.push(w.outer_iter().map(|r| r.to_vec()).collect());
            biases.push(b.to_vec());
        }
        NetDocument {
            layer_sizes: self.sizes.clone(),
            weights,
            biases,
        }
    }

    pub fn from_document(doc: &NetDocument) -> Result<Self, NnError> {
        let mut net = Self::zeros(&doc.layer_sizes)
            .map_err(|e| NnError::Document(e.to_string()))?;
        let layers = net.num_layers();
        if doc.weights.len() != layers || doc.biases.len() != layers {
            return Err(NnError::Document(format!(
                "expected {layers} weight and bias blocks"
            )));
        }
        for l in 0..layers {
            let (fan_in, fan_out) = (net.sizes[l], net.sizes[l + 1]);
            let rows = &doc.weights[l];
            if rows.len() != fan_out || rows.iter().any(|r| r.len() != fan_in) {
                return Err(NnError::Document(format!(
                    "layer {l} weights must be {fan_out}x{fan_in}"
                )));
            }
            if doc.biases[l].len() != fan_out {
                return Err(NnError::Document(format!(
                    "layer {l} bias must have {fan_out} entries"
                )));
            }
            let (mut w, b) = net.layer_mut(l);
            for (i, row) in rows.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    w[(i, j)] = v;
                }
            }
            b.copy_from_slice(&doc.biases[l]);
        }
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("serialisable")
    }

    pub fn from_json(s: &str) -> Result<Self, NnError> {
        let doc: NetDocument =
            serde_json::from_str(s).map_err(|e| NnError::Document(e.to_string()))?;
        Self::from_document(&doc)
    }
}

/// JSON weight format: row-major nested weight arrays and bias vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetDocument {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

/// Bias-corrected Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), NnError> {
        check_len("adam parameters", self.first_moment.len(), params.len())?;
        check_len("adam gradients", self.first_moment.len(), grads.len())?;
        if !(lr > 0.0) {
            return Err(NnError::InvalidLearningRate(lr));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
) -> Result<(), NnError> {
    state.step(params, grads, lr)
}

/// `target <- tau * online + (1 - tau) * target`, elementwise.
pub fn polyak_update(target: &mut [f64], online: &[f64], tau: f64) -> Result<(), NnError> {
    check_len("polyak target", target.len(), online.len())?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(NnError::InvalidTau(tau));
    }
    for (t, &o) in target.iter_mut().zip(online) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}
