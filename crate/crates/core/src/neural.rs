//! Feed-forward networks with hand-written backward passes, the Adam
//! optimizer and a diagonal Gaussian policy head.
//!
//! All parameters of an [`Mlp`] live in one flat vector. Layer `k` occupies
//! an `in × out` row-major weight block followed by `out` biases, so
//! gradients, optimizer moments and Polyak averaging all work on plain
//! slices.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_shapes: Vec<(usize, usize)>,
    params: Vec<f64>,
}

/// Activations of every layer for a batch, kept for the backward pass.
/// `layers[0]` is the input and the last entry is the network output.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub layers: Vec<Array2<f64>>,
}

impl BatchForward {
    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().expect("at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient {
    /// Same layout as [`Mlp::params`].
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(sizes);
        for k in 0..net.layer_shapes.len() {
            let (n_in, n_out) = net.layer_shapes[k];
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            let start = net.offset(k);
            for w in &mut net.params[start..start + n_in * n_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        net
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layer_shapes: Vec<_> = sizes.windows(2).map(|w| (w[0], w[1])).collect();
        let n = layer_shapes.iter().map(|(i, o)| i * o + o).sum();
        Mlp {
            layer_shapes,
            params: vec![0.0; n],
        }
    }

    pub fn from_layers(layer_shapes: Vec<(usize, usize)>, params: Vec<f64>) -> Result<Self> {
        if layer_shapes.is_empty() {
            return Err(Error::Contract("network has no layers".into()));
        }
        if layer_shapes.windows(2).any(|w| w[0].1 != w[1].0) {
            return Err(Error::Contract("layer shapes do not chain".into()));
        }
        let n: usize = layer_shapes.iter().map(|(i, o)| i * o + o).sum();
        if params.len() != n {
            return Err(Error::Contract(format!(
                "expected {n} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite network parameter".into()));
        }
        Ok(Mlp {
            layer_shapes,
            params,
        })
    }

    pub fn layer_shapes(&self) -> &[(usize, usize)] {
        &self.layer_shapes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_shapes[0].0
    }

    pub fn output_dim(&self) -> usize {
        self.layer_shapes.last().unwrap().1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn offset(&self, layer: usize) -> usize {
        self.layer_shapes[..layer].iter().map(|(i, o)| i * o + o).sum()
    }

    /// Weight block (in × out) and bias of layer `k`.
    pub fn layer(&self, k: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (n_in, n_out) = self.layer_shapes[k];
        let start = self.offset(k);
        let w = ArrayView2::from_shape((n_in, n_out), &self.params[start..start + n_in * n_out])
            .expect("block sized by shape");
        let b = ArrayView1::from(&self.params[start + n_in * n_out..start + n_in * n_out + n_out]);
        (w, b)
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::Contract(format!(
                "network input has length {len}, expected {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Single-sample forward pass: tanh on hidden layers, identity output.
    /// Goes through the batched kernel so results are bitwise identical to
    /// the same row inside any batch.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row");
        let fwd = self.forward_batch(x)?;
        Ok(fwd.output().row(0).to_vec())
    }

    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<BatchForward> {
        self.check_input(input.ncols())?;
        let last = self.layer_shapes.len() - 1;
        let mut layers = Vec::with_capacity(self.layer_shapes.len() + 1);
        layers.push(input.to_owned());
        for k in 0..self.layer_shapes.len() {
            let (w, b) = self.layer(k);
            let mut z = layers[k].dot(&w);
            z += &b;
            if k != last {
                tanh_in_place(z.as_slice_mut().expect("fresh matrix is contiguous"));
            }
            layers.push(z);
        }
        Ok(BatchForward { layers })
    }

    /// Gradients of `Σ_rows output · output_grad` with respect to every
    /// parameter (summed over the batch) and to each input row.
    pub fn backward_batch(
        &self,
        forward: &BatchForward,
        output_grad: ArrayView2<'_, f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let out = forward.output();
        if output_grad.dim() != out.dim() || forward.layers.len() != self.layer_shapes.len() + 1 {
            return Err(Error::Contract(format!(
                "output gradient shape {:?} does not match forward output {:?}",
                output_grad.dim(),
                out.dim()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let last = self.layer_shapes.len() - 1;
        let mut delta = output_grad.to_owned();
        for k in (0..self.layer_shapes.len()).rev() {
            if k != last {
                // tanh'(z) = 1 - tanh(z)^2, using the stored activation
                ndarray::Zip::from(&mut delta)
                    .and(&forward.layers[k + 1])
                    .for_each(|d, &a| *d *= 1.0 - a * a);
            }
            let (n_in, n_out) = self.layer_shapes[k];
            let start = self.offset(k);
            let gw = forward.layers[k].t().dot(&delta);
            grads[start..start + n_in * n_out]
                .iter_mut()
                .zip(gw.iter())
                .for_each(|(g, v)| *g = *v);
            let gb = delta.sum_axis(Axis(0));
            grads[start + n_in * n_out..start + n_in * n_out + n_out]
                .iter_mut()
                .zip(gb.iter())
                .for_each(|(g, v)| *g = *v);
            let (w, _) = self.layer(k);
            delta = delta.dot(&w.t());
        }
        Ok((grads, delta))
    }

    /// Single-sample backward pass (runs its own forward pass).
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<MlpGradient> {
        self.check_input(input.len())?;
        if output_grad.len() != self.output_dim() {
            return Err(Error::Contract(format!(
                "output gradient has length {}, expected {}",
                output_grad.len(),
                self.output_dim()
            )));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row");
        let g = ArrayView2::from_shape((1, output_grad.len()), output_grad).expect("row");
        let fwd = self.forward_batch(x)?;
        let (params, input_grad) = self.backward_batch(&fwd, g)?;
        Ok(MlpGradient {
            params,
            input: input_grad.row(0).to_vec(),
        })
    }

    /// `self ← tau·source + (1 − tau)·self`.
    pub fn polyak_update(&mut self, source: &Mlp, tau: f64) {
        debug_assert_eq!(self.layer_shapes, source.layer_shapes);
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = tau * s + (1.0 - tau) * *t;
        }
    }
}

/// `tanh(x) = 1 − 2/(e^{2|x|} + 1)` with the sign restored. Absolute error
/// stays within a few ulp of 1, and the body is branch-free so it
/// vectorises.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    // not `min`: NaN must propagate
    let a = if a > 20.0 { 20.0 } else { a };
    let e = exp_reduced(2.0 * a);
    (1.0 - 2.0 / (e + 1.0)).copysign(x)
}

/// `e^x` for `x` in `[0, 40]`: Cody–Waite reduction by ln 2 and a
/// degree-12 Taylor polynomial on the remainder.
#[inline(always)]
fn exp_reduced(x: f64) -> f64 {
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52, rounds to integer
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    const COEFFS: [f64; 12] = [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ];
    let t = x * std::f64::consts::LOG2_E + SHIFT;
    let k = t - SHIFT;
    let r = x - k * LN2_HI - k * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    for c in COEFFS {
        p = p * r + c;
    }
    let n = t.to_bits().wrapping_sub(SHIFT.to_bits());
    p * f64::from_bits(n.wrapping_add(1023) << 52)
}

fn tanh_slice(xs: &mut [f64]) {
    xs.iter_mut().for_each(|x| *x = tanh(*x));
}

// Same code compiled for wider vectors. Without fast-math LLVM does not
// contract mul+add into FMA, so results are bitwise identical to the
// baseline build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tanh_slice_avx2(xs: &mut [f64]) {
    xs.iter_mut().for_each(|x| *x = tanh(*x));
}

pub fn tanh_in_place(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { tanh_slice_avx2(xs) };
        return;
    }
    tanh_slice(xs)
}

/// Copies rows `rows` of `src` into a new matrix.
pub fn gather_rows(src: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), src.ncols()));
    for (dst, &r) in out.outer_iter_mut().zip(rows) {
        let mut dst = dst;
        dst.assign(&src.slice(s![r, ..]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Bias-corrected Adam update. Non-finite gradients are rejected before
    /// anything is modified.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Contract(format!(
                "Adam shapes differ: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Scales all gradient slices together so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|v| *v *= scale);
    }
    norm
}

pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum()
}

pub fn gaussian_sample(mean: &[f64], log_std: &[f64], rng: &mut impl Rng) -> (Vec<f64>, f64) {
    let action: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .map(|(m, ls)| {
            let z: f64 = rng.sample(StandardNormal);
            m + ls.exp() * z
        })
        .collect();
    let lp = gaussian_log_prob(mean, log_std, &action);
    (action, lp)
}

/// State-independent log standard deviations of a Gaussian policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub log_std: Vec<f64>,
}

impl GaussianHead {
    pub fn new(dim: usize) -> Self {
        GaussianHead {
            log_std: vec![0.0; dim],
        }
    }

    pub fn clamp(&mut self) {
        self.log_std
            .iter_mut()
            .for_each(|v| *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Identity,
    Tanh,
}

/// A policy network: MLP mean, optional output squashing and a Gaussian head.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub mlp: Mlp,
    pub head: GaussianHead,
    pub output_activation: OutputActivation,
}

impl PolicyNet {
    pub fn new(mlp: Mlp, output_activation: OutputActivation) -> Self {
        let head = GaussianHead::new(mlp.output_dim());
        PolicyNet {
            mlp,
            head,
            output_activation,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.mlp.forward(obs)?;
        if self.output_activation == OutputActivation::Tanh {
            tanh_in_place(&mut out);
        }
        Ok(out)
    }

    pub fn to_document(&self) -> NetDocument {
        NetDocument::from_mlp(&self.mlp, self.head.log_std.clone(), self.output_activation)
    }

    pub fn from_document(doc: NetDocument) -> Result<Self> {
        let output_activation = doc.output_activation;
        let log_std = doc.log_std.clone();
        let mlp = doc.into_mlp()?;
        if log_std.len() != mlp.output_dim() {
            return Err(Error::Contract(format!(
                "log_std has length {}, policy outputs {}",
                log_std.len(),
                mlp.output_dim()
            )));
        }
        Ok(PolicyNet {
            mlp,
            head: GaussianHead { log_std },
            output_activation,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("plain data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetDocument = serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("malformed policy document: {e}")))?;
        Self::from_document(doc)
    }
}

/// Portable JSON form of a network. Weight arrays are the row-major
/// `in × out` blocks of each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetDocument {
    pub layer_shapes: Vec<[usize; 2]>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(default)]
    pub log_std: Vec<f64>,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl NetDocument {
    pub fn from_mlp(mlp: &Mlp, log_std: Vec<f64>, output_activation: OutputActivation) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for k in 0..mlp.layer_shapes.len() {
            let (w, b) = mlp.layer(k);
            weights.push(w.iter().copied().collect());
            biases.push(b.to_vec());
        }
        NetDocument {
            layer_shapes: mlp.layer_shapes.iter().map(|&(i, o)| [i, o]).collect(),
            weights,
            biases,
            log_std,
            output_activation,
        }
    }

    pub fn into_mlp(self) -> Result<Mlp> {
        if self.weights.len() != self.layer_shapes.len() || self.biases.len() != self.layer_shapes.len()
        {
            return Err(Error::Contract("weights/biases count differs from layer count".into()));
        }
        let mut params = Vec::new();
        for ((shape, w), b) in self.layer_shapes.iter().zip(self.weights).zip(self.biases) {
            if w.len() != shape[0] * shape[1] || b.len() != shape[1] {
                return Err(Error::Contract(format!(
                    "layer {shape:?} has {} weights and {} biases",
                    w.len(),
                    b.len()
                )));
            }
            params.extend(w);
            params.extend(b);
        }
        Mlp::from_layers(self.layer_shapes.iter().map(|s| (s[0], s[1])).collect(), params)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
