//! Minimal fully-connected classifier with exact manual backpropagation.
//!
//! Networks are alternating affine layers and pointwise activations, with a
//! linear head producing logits. Parameters live in one flat `f64` vector so
//! particle code can treat a network as a point `w` in parameter space:
//! gradients, optimizer state, and EMA shadows are all flat vectors of the
//! same length. Layout per layer: `fan_in·fan_out` weights (row-major, input
//! index first), then `fan_out` biases.
//!
//! Backward passes consume a [`ForwardCache`] recorded by the matching
//! forward call. Caches are versioned against the network's parameters, so
//! using a cache after an update is an error rather than a silent wrong
//! gradient. A detached forward carries probabilities for use inside losses
//! while contributing exactly zero gradient.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pointwise activation choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `clamp(z, -1, 1)`; slope 0 outside the clamp, kinks at ±1.
    HardTanh,
    /// Slope 1 for positive inputs, 0.1 otherwise; kink at 0.
    LeakyRelu,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::HardTanh => z.clamp(-1.0, 1.0),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    0.1 * z
                }
            }
        }
    }

    /// Subgradient at `z`; the value at a kink is the one-sided choice
    /// documented on each variant (0 at hardtanh's |z| = 1, 0.1 at leaky 0).
    pub fn slope(self, z: f64) -> f64 {
        match self {
            Activation::HardTanh => {
                if z.abs() < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.1
                }
            }
        }
    }

    /// Distance from `z` to the nearest non-differentiable point.
    pub fn kink_gap(self, z: f64) -> f64 {
        match self {
            Activation::HardTanh => (z - 1.0).abs().min((z + 1.0).abs()),
            Activation::LeakyRelu => z.abs(),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::HardTanh => "hardtanh",
            Activation::LeakyRelu => "leaky_relu",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "hardtanh" => Ok(Activation::HardTanh),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            other => Err(Error::Usage(format!("unknown activation tag '{other}'"))),
        }
    }
}

/// Fully-connected network over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct MlpNetwork {
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    version: u64,
}

/// Total parameter count for a layer stack: Σ (fan_in + 1)·fan_out.
pub fn param_count_for(layer_sizes: &[usize]) -> usize {
    layer_sizes
        .windows(2)
        .map(|pair| (pair[0] + 1) * pair[1])
        .sum()
}

impl MlpNetwork {
    /// Seeded initialization: weights normal with scale `1/sqrt(fan_in)`,
    /// biases zero.
    pub fn init(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Usage(
                "a network needs at least input and output sizes".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Usage("layer sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; param_count_for(layer_sizes)];
        let mut offset = 0;
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            for w in &mut params[offset..offset + fan_in * fan_out] {
                let draw: f64 = StandardNormal.sample(&mut rng);
                *w = draw * scale;
            }
            // Biases stay zero.
            offset += (fan_in + 1) * fan_out;
        }
        Ok(Self { layer_sizes: layer_sizes.to_vec(), activation, params, version: 0 })
    }

    /// Wraps an existing flat parameter vector.
    pub fn from_params(
        layer_sizes: &[usize],
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Usage("invalid layer sizes".into()));
        }
        let expect = param_count_for(layer_sizes);
        if params.len() != expect {
            return Err(Error::Usage(format!(
                "parameter vector has length {}, layer sizes need {expect}",
                params.len()
            )));
        }
        Ok(Self { layer_sizes: layer_sizes.to_vec(), activation, params, version: 0 })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates all outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    fn weight_view(&self, offset: usize, fan_in: usize, fan_out: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((fan_in, fan_out), &self.params[offset..offset + fan_in * fan_out])
            .expect("layout offsets are consistent with layer sizes")
    }

    /// Forward pass over a batch (rows are samples).
    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.run_forward(inputs, false)
    }

    /// Forward pass whose outputs are excluded from gradients: backward on
    /// the returned cache is identically zero.
    pub fn forward_detached(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.run_forward(inputs, true)
    }

    fn run_forward(&self, inputs: ArrayView2<'_, f64>, detached: bool) -> Result<ForwardCache> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Usage(format!(
                "input width {} does not match network input size {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        let layers = self.layer_sizes.len() - 1;
        let mut pre: Vec<Array2<f64>> = Vec::with_capacity(layers.saturating_sub(1));
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(layers.saturating_sub(1));
        let mut current = inputs.to_owned();
        let mut offset = 0;
        for (l, pair) in self.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weights = self.weight_view(offset, fan_in, fan_out);
            let biases = &self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            let mut z = current.dot(&weights);
            let bias = Array1::from_iter(biases.iter().copied());
            z += &bias;
            offset += (fan_in + 1) * fan_out;
            if l + 1 < layers {
                let activated = z.mapv(|v| self.activation.apply(v));
                pre.push(z);
                post.push(activated.clone());
                current = activated;
            } else {
                current = z;
            }
        }
        Ok(ForwardCache {
            version: self.version,
            detached,
            inputs: inputs.to_owned(),
            pre,
            post,
            logits: current,
        })
    }

    /// Exact gradient of the scalar loss whose logit gradients are supplied.
    ///
    /// No batch averaging happens here: the caller bakes any `1/B` factor
    /// into `logit_grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        logit_grads: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>> {
        if cache.version != self.version {
            return Err(Error::Usage(
                "stale forward cache: parameters changed since the forward pass".into(),
            ));
        }
        if logit_grads.dim() != cache.logits.dim() {
            return Err(Error::Usage("logit gradient shape mismatch".into()));
        }
        let mut grad = vec![0.0; self.params.len()];
        if cache.detached {
            return Ok(grad);
        }
        let layers = self.layer_sizes.len() - 1;
        // Offsets of every layer, to walk backwards.
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for pair in self.layer_sizes.windows(2) {
            offsets.push(offset);
            offset += (pair[0] + 1) * pair[1];
        }
        let mut g = logit_grads.to_owned();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let input = if l == 0 { &cache.inputs } else { &cache.post[l - 1] };
            let grad_w = input.t().dot(&g);
            let grad_b = g.sum_axis(Axis(0));
            let o = offsets[l];
            grad[o..o + fan_in * fan_out].copy_from_slice(grad_w.as_slice().unwrap());
            grad[o + fan_in * fan_out..o + (fan_in + 1) * fan_out]
                .copy_from_slice(grad_b.as_slice().unwrap());
            if l > 0 {
                let weights = self.weight_view(o, fan_in, fan_out);
                let back = g.dot(&weights.t());
                g = back * cache.pre[l - 1].mapv(|z| self.activation.slope(z));
            }
        }
        Ok(grad)
    }
}

/// Intermediate activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    detached: bool,
    inputs: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl ForwardCache {
    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.logits.view()
    }

    pub fn probabilities(&self) -> Array2<f64> {
        softmax_rows(self.logits.view())
    }

    pub fn log_probabilities(&self) -> Array2<f64> {
        log_softmax_rows(self.logits.view())
    }

    pub fn is_detached(&self) -> bool {
        self.detached
    }

    /// Distance from the nearest pre-activation to an activation kink;
    /// infinite for purely linear networks.
    pub fn min_kink_gap(&self, activation: Activation) -> f64 {
        self.pre
            .iter()
            .flat_map(|z| z.iter())
            .map(|&z| activation.kink_gap(z))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Row-wise softmax, max-shifted for stability.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

/// Row-wise log-softmax, max-shifted for stability.
pub fn log_softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|z| z - lse);
    }
    out
}

/// Chain rule through a row-wise softmax.
///
/// Given the loss gradients with respect to probabilities (`prob_grads`) and
/// log-probabilities (`logprob_grads`), returns the gradient with respect to
/// the logits:
/// `dz_c = p_c·(gp_c − Σ_y gp_y p_y) + gl_c − p_c·Σ_y gl_y`.
///
/// Probability-channel products use the convention `0·g = 0`: where the
/// softmax puts zero mass its Jacobian row vanishes, so even an infinite
/// upstream gradient (a log evaluated at that zero) contributes nothing.
pub fn softmax_backward(
    probs: ArrayView2<'_, f64>,
    prob_grads: ArrayView2<'_, f64>,
    logprob_grads: ArrayView2<'_, f64>,
) -> Array2<f64> {
    fn pmul(p: f64, g: f64) -> f64 {
        if p == 0.0 {
            0.0
        } else {
            p * g
        }
    }
    let mut out = Array2::zeros(probs.dim());
    for ((p_row, gp_row), (gl_row, mut out_row)) in probs
        .rows()
        .into_iter()
        .zip(prob_grads.rows())
        .zip(logprob_grads.rows().into_iter().zip(out.rows_mut()))
    {
        let dot_p: f64 = p_row.iter().zip(gp_row.iter()).map(|(&p, &g)| pmul(p, g)).sum();
        let sum_gl: f64 = gl_row.sum();
        for (c, o) in out_row.iter_mut().enumerate() {
            *o = pmul(p_row[c], gp_row[c] - dot_p) + gl_row[c] - pmul(p_row[c], sum_gl);
        }
    }
    out
}

/// Cosine-annealed learning rate with linear warmup. Steps are counted
/// post-increment: the first update sees `step = 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Momentum buffer plus step counter for one network.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: Vec<f64>,
    step_count: u64,
    pub schedule: LrSchedule,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(param_count: usize, schedule: LrSchedule, momentum: f64) -> Self {
        Self { velocity: vec![0.0; param_count], step_count: 0, schedule, momentum }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step_count = step;
    }
}

/// One Nesterov SGD update with weight decay folded into the gradient.
///
/// `v ← µ·v + g` and `p ← p − lr·(g + µ·v)` with `g = grad + wd·p`, the
/// convention of mainstream deep-learning optimizers.
pub fn sgd_step(
    net: &mut MlpNetwork,
    grad: &[f64],
    opt: &mut OptimizerState,
    weight_decay: f64,
) -> Result<()> {
    if grad.len() != net.param_count() || opt.velocity.len() != net.param_count() {
        return Err(Error::Usage("gradient/velocity length mismatch".into()));
    }
    opt.step_count += 1;
    let lr = opt.schedule.lr_at(opt.step_count);
    let momentum = opt.momentum;
    let params = net.params_mut();
    for i in 0..params.len() {
        let g = grad[i] + weight_decay * params[i];
        opt.velocity[i] = momentum * opt.velocity[i] + g;
        params[i] -= lr * (g + momentum * opt.velocity[i]);
    }
    Ok(())
}

/// Exponentially averaged copy of a parameter vector.
#[derive(Debug, Clone)]
pub struct EmaShadow {
    shadow: Vec<f64>,
    pub decay: f64,
}

impl EmaShadow {
    /// Starts the shadow at the current parameters.
    pub fn new(params: &[f64], decay: f64) -> Self {
        Self { shadow: params.to_vec(), decay }
    }

    pub fn from_raw(shadow: Vec<f64>, decay: f64) -> Self {
        Self { shadow, decay }
    }

    pub fn params(&self) -> &[f64] {
        &self.shadow
    }

    /// `shadow ← decay·shadow + (1 − decay)·params`.
    pub fn update(&mut self, params: &[f64]) {
        for (s, &p) in self.shadow.iter_mut().zip(params) {
            *s = self.decay * *s + (1.0 - self.decay) * p;
        }
    }

    /// A network evaluating at the shadow parameters.
    pub fn as_network(&self, reference: &MlpNetwork) -> MlpNetwork {
        MlpNetwork::from_params(reference.layer_sizes(), reference.activation(), self.shadow.clone())
            .expect("shadow length matches the reference network")
    }
}

/// Result of a finite-difference gradient audit.
#[derive(Debug, Clone, Copy)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub probed: usize,
    pub skipped: usize,
}

/// Loss evaluation for gradient probing: the scalar value plus the distance
/// of the nearest live pre-activation to an activation kink.
#[derive(Debug, Clone, Copy)]
pub struct ProbeEval {
    pub value: f64,
    pub kink_gap: f64,
}

/// Pre-activations closer to a kink than this skip the probe: central
/// differences straddle the kink and disagree with any one-sided subgradient.
pub const KINK_GUARD: f64 = 1e-4;

/// Compares `analytic_grad` against central differences of `loss` on
/// randomly chosen coordinates.
///
/// A probe counts only when all three evaluations (center, ±eps) stay at
/// least [`KINK_GUARD`] away from every activation kink; others are skipped
/// and redrawn, up to ten attempts per requested probe. Relative error uses
/// a denominator floor of 1e-6, far above central-difference noise but far
/// below any real gradient defect.
pub fn finite_diff_check(
    net: &mut MlpNetwork,
    loss: impl Fn(&MlpNetwork) -> ProbeEval,
    analytic_grad: &[f64],
    probes: usize,
    eps: f64,
    seed: u64,
) -> Result<FiniteDiffReport> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Usage(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    if analytic_grad.len() != net.param_count() {
        return Err(Error::Usage("analytic gradient length mismatch".into()));
    }
    let base = loss(net);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err = 0.0f64;
    let mut probed = 0usize;
    let mut skipped = 0usize;
    let mut attempts = 0usize;
    let budget = probes.saturating_mul(10);
    while probed < probes && attempts < budget {
        attempts += 1;
        let i = rand::Rng::gen_range(&mut rng, 0..net.param_count());
        let original = net.params()[i];
        net.params_mut()[i] = original + eps;
        let plus = loss(net);
        net.params_mut()[i] = original - eps;
        let minus = loss(net);
        net.params_mut()[i] = original;
        if base.kink_gap < KINK_GUARD
            || plus.kink_gap < KINK_GUARD
            || minus.kink_gap < KINK_GUARD
        {
            skipped += 1;
            continue;
        }
        let fd = (plus.value - minus.value) / (2.0 * eps);
        let an = analytic_grad[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        max_rel_err = max_rel_err.max(rel);
        probed += 1;
    }
    Ok(FiniteDiffReport { max_rel_err, probed, skipped })
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    layer_sizes: Vec<usize>,
    activation: String,
    params: Vec<f64>,
    ema: Vec<f64>,
    ema_decay: f64,
    step_count: u64,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Writes a network, its EMA shadow, and the optimizer step count as JSON.
pub fn save_checkpoint(
    path: &std::path::Path,
    net: &MlpNetwork,
    ema: &EmaShadow,
    step_count: u64,
) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        layer_sizes: net.layer_sizes().to_vec(),
        activation: net.activation().tag().to_string(),
        params: net.params().to_vec(),
        ema: ema.params().to_vec(),
        ema_decay: ema.decay,
        step_count,
    };
    let json = serde_json::to_string(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &std::path::Path) -> Result<(MlpNetwork, EmaShadow, u64)> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Serialization(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    let activation = Activation::from_tag(&file.activation)?;
    let net = MlpNetwork::from_params(&file.layer_sizes, activation, file.params)?;
    if file.ema.len() != net.param_count() {
        return Err(Error::Serialization("EMA shadow length mismatch".into()));
    }
    let ema = EmaShadow::from_raw(file.ema, file.ema_decay);
    Ok((net, ema, file.step_count))
}
