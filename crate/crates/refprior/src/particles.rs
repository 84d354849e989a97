//! Ensembles of network particles trained to be maximally informative.
//!
//! A prior over networks is carried as K equally weighted particles. The
//! training signal has two parts: a mutual-information term measured on
//! unlabeled data — the entropy of the ensemble's mixture prediction on
//! small tuples of samples, minus the particles' own prediction entropies —
//! and ordinary log-likelihood on whatever labeled data exists. Diversity
//! among particles raises the mixture entropy without touching the
//! conditional term, so the objective pushes the ensemble to spread out
//! exactly where the labels do not pin it down.
//!
//! The conditional-entropy term is not used in its exact form during
//! training; it is replaced by an augmentation-based upper bound
//! ([`augmented_entropy_term`]) that doubles as a pseudo-labeling loss:
//! confident predictions on a weak view become targets for a strong view.
//!
//! All objectives return the value being *maximized* together with its exact
//! per-particle parameter gradients; [`train`] negates them into descent
//! steps.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::info::Distribution;
use crate::nn::{
    sgd_step, softmax_backward, Activation, EmaShadow, FiniteDiffReport, ForwardCache,
    LrSchedule, MlpNetwork, OptimizerState, KINK_GUARD,
};

/// Largest label-tuple enumeration the exact mixture terms will attempt.
pub const ENUMERATION_LIMIT: usize = 4096;

/// `x ln x` with the measure-theoretic convention `0 ln 0 = 0`.
fn xlnx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `x ln y` with `0 ln y = 0` regardless of `y`.
fn xlny(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Hyper-parameters for particle training.
///
/// The learning rate and weight decay scale with the particle count so the
/// per-particle step size stays constant when K changes: the objective
/// averages over particles, shrinking each particle's gradient by 1/K.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Particle count K.
    pub k: usize,
    /// Tuple order n: unlabeled samples are grouped n at a time for the
    /// mixture-entropy term.
    pub order_n: usize,
    /// Weight on the mixture-entropy term inside the information objective.
    pub alpha: f64,
    /// Weight on the whole information term relative to the likelihood.
    pub gamma: f64,
    /// Transfer interpolation: the source likelihood enters with weight 1−β.
    pub beta: f64,
    /// Augmentation mixing rate in the entropy bound.
    pub tau: f64,
    /// Weak-view confidence required for a sample to contribute to the
    /// pseudo-labeling loss.
    pub conf_threshold: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for a K-particle ensemble; τ = 1/3 and γ = 1/(1−τ²) = 9/8.
    pub fn new(k: usize) -> Self {
        let tau = 1.0 / 3.0;
        Self {
            k,
            order_n: 2,
            alpha: 0.1,
            gamma: 1.0 / (1.0 - tau * tau),
            beta: 0.5,
            tau,
            conf_threshold: 0.95,
            epochs: 1,
            steps_per_epoch: 1024,
            labeled_batch: 64,
            unlabeled_batch: 448,
            base_lr: 0.03 * k as f64,
            momentum: 0.9,
            weight_decay: 5e-4 / k as f64,
            warmup_steps: 0,
            ema_decay: 0.999,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Usage("particle count must be at least 1".into()));
        }
        if self.order_n < 1 {
            return Err(Error::Usage("tuple order must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Usage(format!("tau {} outside (0, 1)", self.tau)));
        }
        if !(self.conf_threshold > 0.0 && self.conf_threshold <= 1.0) {
            return Err(Error::Usage(format!(
                "confidence threshold {} outside (0, 1]",
                self.conf_threshold
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Usage(format!("gamma {} must be positive", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Usage(format!("beta {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }
}

/// K networks sharing one architecture, with their EMA shadows and the
/// random stream used for batching and view sampling.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    particles: Vec<MlpNetwork>,
    shadows: Vec<EmaShadow>,
    config: TrainConfig,
    rng: ChaCha8Rng,
}

impl ParticleEnsemble {
    /// Freshly initialized particles with per-particle seeds drawn from
    /// `config.seed`.
    pub fn new(layer_sizes: &[usize], activation: Activation, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut particles = Vec::with_capacity(config.k);
        for _ in 0..config.k {
            let seed: u64 = rng.gen();
            particles.push(MlpNetwork::init(layer_sizes, activation, seed)?);
        }
        let shadows =
            particles.iter().map(|p| EmaShadow::new(p.params(), config.ema_decay)).collect();
        Ok(Self { particles, shadows, config, rng })
    }

    /// Wraps existing particles; shadows start at each particle's params.
    pub fn from_particles(particles: Vec<MlpNetwork>, config: TrainConfig) -> Result<Self> {
        let shadows = particles
            .iter()
            .map(|p| EmaShadow::new(p.params(), config.ema_decay))
            .collect();
        Self::from_parts(particles, shadows, config)
    }

    /// Wraps existing particles and shadows, validating shared architecture.
    pub fn from_parts(
        particles: Vec<MlpNetwork>,
        shadows: Vec<EmaShadow>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if particles.len() != config.k {
            return Err(Error::Usage(format!(
                "{} particles but config says K = {}",
                particles.len(),
                config.k
            )));
        }
        if shadows.len() != particles.len() {
            return Err(Error::Usage("one EMA shadow per particle required".into()));
        }
        let first = &particles[0];
        for p in &particles[1..] {
            if p.layer_sizes() != first.layer_sizes() || p.activation() != first.activation() {
                return Err(Error::Usage(
                    "all particles must share layer sizes and activation".into(),
                ));
            }
        }
        for (s, p) in shadows.iter().zip(&particles) {
            if s.params().len() != p.param_count() {
                return Err(Error::Usage("EMA shadow length mismatch".into()));
            }
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { particles, shadows, config, rng })
    }

    pub fn particles(&self) -> &[MlpNetwork] {
        &self.particles
    }

    pub fn particle_mut(&mut self, k: usize) -> &mut MlpNetwork {
        &mut self.particles[k]
    }

    pub fn shadows(&self) -> &[EmaShadow] {
        &self.shadows
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn k(&self) -> usize {
        self.particles.len()
    }

    pub fn class_count(&self) -> usize {
        self.particles[0].class_count()
    }

    fn forward_all(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<ForwardCache>> {
        self.particles.iter().map(|p| p.forward(inputs)).collect()
    }
}

/// Checks the label-tuple enumeration guard and returns `C^n`.
fn enumeration_size(class_count: usize, order_n: usize) -> Result<usize> {
    let size = class_count
        .checked_pow(order_n as u32)
        .filter(|&s| s <= ENUMERATION_LIMIT)
        .ok_or_else(|| {
            Error::Usage(format!(
                "label enumeration {class_count}^{order_n} exceeds the limit {ENUMERATION_LIMIT}"
            ))
        })?;
    Ok(size)
}

/// Digit table for decoding tuple indices: entry `[y][j]` is the label of
/// slot j in tuple index y, with slot 0 most significant.
fn digit_table(class_count: usize, order_n: usize, size: usize) -> Vec<Vec<usize>> {
    let mut table = vec![vec![0usize; order_n]; size];
    for (y, digits) in table.iter_mut().enumerate() {
        let mut rem = y;
        for j in (0..order_n).rev() {
            digits[j] = rem % class_count;
            rem /= class_count;
        }
    }
    table
}

/// Mixture prediction over label tuples: the average over particles of the
/// product of per-sample class probabilities.
///
/// All rows of `tuple_inputs` form one tuple; the outcome index encodes the
/// labels with the first row most significant.
pub fn joint_marginal(
    ensemble: &ParticleEnsemble,
    tuple_inputs: ArrayView2<'_, f64>,
) -> Result<Distribution<f64>> {
    let n = tuple_inputs.nrows();
    if n == 0 {
        return Err(Error::Usage("a tuple needs at least one sample".into()));
    }
    let c = ensemble.class_count();
    let size = enumeration_size(c, n)?;
    let caches = ensemble.forward_all(tuple_inputs)?;
    let mut mixture = vec![0.0; size];
    for cache in &caches {
        let probs = cache.probabilities();
        let mut products = vec![1.0];
        for j in 0..n {
            let mut next = Vec::with_capacity(products.len() * c);
            for &prefix in &products {
                for y in 0..c {
                    next.push(prefix * probs[[j, y]]);
                }
            }
            products = next;
        }
        for (m, p) in mixture.iter_mut().zip(&products) {
            *m += p;
        }
    }
    let k = ensemble.k() as f64;
    for m in &mut mixture {
        *m /= k;
    }
    Distribution::from_weights(mixture)
}

/// The two entropy terms of the information objective, with their exact
/// gradients in probability space.
struct MixtureTerms {
    /// Mean over tuples of the mixture prediction's entropy.
    mixture_entropy: f64,
    /// Mean over tuples and particles of the per-particle prediction
    /// entropy (summed over the tuple's slots).
    conditional_entropy: f64,
    mixture_prob_grads: Vec<Array2<f64>>,
    conditional_prob_grads: Vec<Array2<f64>>,
}

/// Exact entropies over consecutive order-n chunks of the batch. Rows
/// beyond the last full tuple are dropped.
fn mixture_terms(probs: &[Array2<f64>], order_n: usize) -> Result<MixtureTerms> {
    let k = probs.len();
    let rows = probs[0].nrows();
    let c = probs[0].ncols();
    let tuples = rows / order_n;
    if tuples == 0 {
        return Err(Error::Usage(format!(
            "batch of {rows} rows is smaller than one tuple of {order_n}"
        )));
    }
    let size = enumeration_size(c, order_n)?;
    let digits = digit_table(c, order_n, size);
    let t_norm = 1.0 / tuples as f64;
    let k_norm = 1.0 / k as f64;
    let mut mixture_entropy = 0.0;
    // Per-particle partials so a particle permutation only permutes the
    // final commutative sum instead of reordering every addition.
    let mut conditional_parts = vec![0.0; k];
    let mut mixture_grads = vec![Array2::zeros((rows, c)); k];
    let mut conditional_grads = vec![Array2::zeros((rows, c)); k];
    let mut products = vec![vec![0.0; size]; k];
    for t in 0..tuples {
        let base = t * order_n;
        // Per-particle product distribution over the tuple's label space.
        for (kk, prod) in products.iter_mut().enumerate() {
            for (y, slot) in prod.iter_mut().enumerate() {
                let mut v = 1.0;
                for (j, &d) in digits[y].iter().enumerate() {
                    v *= probs[kk][[base + j, d]];
                }
                *slot = v;
            }
        }
        for y in 0..size {
            let m: f64 = products.iter().map(|p| p[y]).sum::<f64>() * k_norm;
            mixture_entropy -= xlnx(m) * t_norm;
            // d(mixture entropy)/dp through m: the leave-one-out product is
            // the slot's sensitivity; a zero product means zero sensitivity
            // even when ln m diverges.
            let factor = 1.0 + m.ln();
            for kk in 0..k {
                for j in 0..order_n {
                    let mut loo = 1.0;
                    for (jj, &d) in digits[y].iter().enumerate() {
                        if jj != j {
                            loo *= probs[kk][[base + jj, d]];
                        }
                    }
                    if loo == 0.0 {
                        continue;
                    }
                    mixture_grads[kk][[base + j, digits[y][j]]] -=
                        factor * loo * t_norm * k_norm;
                }
            }
        }
        for kk in 0..k {
            for j in 0..order_n {
                for cc in 0..c {
                    let p = probs[kk][[base + j, cc]];
                    conditional_parts[kk] -= xlnx(p) * t_norm * k_norm;
                    conditional_grads[kk][[base + j, cc]] -=
                        (1.0 + p.ln()) * t_norm * k_norm;
                }
            }
        }
    }
    Ok(MixtureTerms {
        mixture_entropy,
        conditional_entropy: conditional_parts.iter().sum(),
        mixture_prob_grads: mixture_grads,
        conditional_prob_grads: conditional_grads,
    })
}

/// Value and gradients of the exact information objective on unlabeled data.
#[derive(Debug, Clone)]
pub struct SslMiEval {
    /// `alpha·mixture_entropy − conditional_entropy`.
    pub value: f64,
    pub mixture_entropy: f64,
    pub conditional_entropy: f64,
    /// Per-particle gradients with respect to that particle's logits on the
    /// flattened batch.
    pub logit_grads: Vec<Array2<f64>>,
    /// The same gradients pushed through each particle's backward pass.
    pub param_grads: Vec<Vec<f64>>,
}

/// Exact mutual-information objective between particle index and label
/// tuples, with gradients. Rows are grouped into consecutive tuples of the
/// configured order; leftover rows are ignored.
pub fn ssl_mi(
    ensemble: &ParticleEnsemble,
    inputs: ArrayView2<'_, f64>,
    alpha: f64,
) -> Result<SslMiEval> {
    let caches = ensemble.forward_all(inputs)?;
    let probs: Vec<Array2<f64>> = caches.iter().map(|c| c.probabilities()).collect();
    let terms = mixture_terms(&probs, ensemble.config.order_n)?;
    let value = alpha * terms.mixture_entropy - terms.conditional_entropy;
    let zeros = Array2::zeros(probs[0].dim());
    let mut logit_grads = Vec::with_capacity(ensemble.k());
    let mut param_grads = Vec::with_capacity(ensemble.k());
    for (kk, cache) in caches.iter().enumerate() {
        let prob_grad =
            &terms.mixture_prob_grads[kk] * alpha - &terms.conditional_prob_grads[kk];
        let lg = softmax_backward(probs[kk].view(), prob_grad.view(), zeros.view());
        param_grads.push(ensemble.particles[kk].backward(cache, lg.view())?);
        logit_grads.push(lg);
    }
    Ok(SslMiEval {
        value,
        mixture_entropy: terms.mixture_entropy,
        conditional_entropy: terms.conditional_entropy,
        logit_grads,
        param_grads,
    })
}

/// Augmentation bound pieces computed from probabilities alone: the weak
/// view enters only as constants (its gradient path is severed), so the
/// returned gradients are with respect to the strong view's outputs.
struct AugCore {
    value: f64,
    surviving: usize,
    /// Smallest distance between any weak-view confidence and the mask
    /// threshold; a probe closer than this to the mask boundary is not
    /// differentiable.
    mask_margin: f64,
    strong_prob_grads: Vec<Array2<f64>>,
    strong_logprob_grads: Vec<Array2<f64>>,
}

fn augmented_core(
    weak_probs: &[Array2<f64>],
    strong_probs: &[Array2<f64>],
    strong_logprobs: &[Array2<f64>],
    tau: f64,
    conf_threshold: f64,
) -> AugCore {
    let k = weak_probs.len();
    let rows = weak_probs[0].nrows();
    let c = weak_probs[0].ncols();
    let cross = tau * (1.0 - tau);
    let strong_self = (1.0 - tau) * (1.0 - tau);
    // First pass: find the surviving (particle, sample) pairs so the
    // average's denominator is known before gradients are scaled.
    let mut survivors: Vec<(usize, usize)> = Vec::new();
    let mut mask_margin = f64::INFINITY;
    for kk in 0..k {
        for i in 0..rows {
            let conf = weak_probs[kk].row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mask_margin = mask_margin.min((conf - conf_threshold).abs());
            if conf > conf_threshold {
                survivors.push((kk, i));
            }
        }
    }
    let mut gp = vec![Array2::zeros((rows, c)); k];
    let mut gl = vec![Array2::zeros((rows, c)); k];
    if survivors.is_empty() {
        return AugCore {
            value: 0.0,
            surviving: 0,
            mask_margin,
            strong_prob_grads: gp,
            strong_logprob_grads: gl,
        };
    }
    let norm = 1.0 / survivors.len() as f64;
    let mut value = 0.0;
    for &(kk, i) in &survivors {
        for cc in 0..c {
            let p1 = weak_probs[kk][[i, cc]];
            let p2 = strong_probs[kk][[i, cc]];
            let l2 = strong_logprobs[kk][[i, cc]];
            value -= cross * xlny(p2, p1) * norm;
            value -= (cross * p1 + strong_self * p2) * l2 * norm;
            gp[kk][[i, cc]] = -(cross * p1.ln() + strong_self * l2) * norm;
            gl[kk][[i, cc]] = -(cross * p1 + strong_self * p2) * norm;
        }
    }
    AugCore {
        value,
        surviving: survivors.len(),
        mask_margin,
        strong_prob_grads: gp,
        strong_logprob_grads: gl,
    }
}

/// Augmentation-based upper bound on the conditional-entropy term.
#[derive(Debug, Clone)]
pub struct AugmentedEntropy {
    /// Mean over surviving (particle, sample) pairs of the three-term
    /// cross-entropy bound; 0 when nothing survives the mask.
    pub value: f64,
    /// Gradients of `value`; zero along the weak-view branch by
    /// construction (stop-gradient).
    pub param_grads: Vec<Vec<f64>>,
    pub surviving: usize,
    /// True when no sample cleared the confidence mask for any particle.
    pub no_confident: bool,
}

/// Pseudo-labeling entropy bound: confident weak-view predictions become
/// fixed targets for the strong view.
///
/// Per surviving sample the loss is
/// `−τ(1−τ)·Σ p₂ ln p₁ − τ(1−τ)·Σ p₁ ln p₂ − (1−τ)²·Σ p₂ ln p₂`,
/// where `p₁` (weak) is detached and `p₂` (strong) carries gradients. A
/// sample survives for a particle when that particle's weak-view confidence
/// `max_y p₁(y)` exceeds `conf_threshold`.
pub fn augmented_entropy_term(
    ensemble: &ParticleEnsemble,
    weak_views: ArrayView2<'_, f64>,
    strong_views: ArrayView2<'_, f64>,
    tau: f64,
    conf_threshold: f64,
) -> Result<AugmentedEntropy> {
    if weak_views.nrows() != strong_views.nrows() {
        return Err(Error::Usage("weak and strong views must pair one-to-one".into()));
    }
    let weak_probs: Vec<Array2<f64>> = ensemble
        .particles
        .iter()
        .map(|p| Ok(p.forward_detached(weak_views)?.probabilities()))
        .collect::<Result<_>>()?;
    let strong_caches = ensemble.forward_all(strong_views)?;
    let strong_probs: Vec<Array2<f64>> =
        strong_caches.iter().map(|c| c.probabilities()).collect();
    let strong_logprobs: Vec<Array2<f64>> =
        strong_caches.iter().map(|c| c.log_probabilities()).collect();
    let core = augmented_core(&weak_probs, &strong_probs, &strong_logprobs, tau, conf_threshold);
    let mut param_grads = Vec::with_capacity(ensemble.k());
    for (kk, cache) in strong_caches.iter().enumerate() {
        let lg = softmax_backward(
            strong_probs[kk].view(),
            core.strong_prob_grads[kk].view(),
            core.strong_logprob_grads[kk].view(),
        );
        param_grads.push(ensemble.particles[kk].backward(cache, lg.view())?);
    }
    Ok(AugmentedEntropy {
        value: core.value,
        param_grads,
        surviving: core.surviving,
        no_confident: core.surviving == 0,
    })
}

/// A training objective's value, its pieces, and exact ascent gradients.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub mixture_entropy: f64,
    pub augmented_entropy: f64,
    /// Mean per-particle log-likelihood on the (target-)labeled batch; 0
    /// when the objective has no such term.
    pub labeled_loglik: f64,
    /// Mean per-particle log-likelihood on the source batch; 0 when absent.
    pub source_loglik: f64,
    /// Per-particle gradients of `value` (ascent direction).
    pub param_grads: Vec<Vec<f64>>,
    pub no_confident: bool,
    /// Distance to the nearest non-differentiable point seen during the
    /// evaluation: activation kinks and the confidence-mask boundary.
    pub min_kink_gap: f64,
}

/// Mean per-particle log-likelihood of labels with per-particle logit-space
/// gradients of that mean.
fn labeled_term(
    ensemble: &ParticleEnsemble,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<(f64, Vec<ForwardCache>, Vec<Array2<f64>>)> {
    if labels.len() != inputs.nrows() {
        return Err(Error::Usage("one label per row required".into()));
    }
    let c = ensemble.class_count();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Usage(format!("label {bad} out of range for {c} classes")));
    }
    if labels.is_empty() {
        return Err(Error::Usage("labeled batch is empty".into()));
    }
    let caches = ensemble.forward_all(inputs)?;
    let norm = 1.0 / (ensemble.k() as f64 * labels.len() as f64);
    let mut value = 0.0;
    let mut logit_grads = Vec::with_capacity(ensemble.k());
    for cache in &caches {
        let logp = cache.log_probabilities();
        let probs = cache.probabilities();
        let mut gl = Array2::zeros(logp.dim());
        for (i, &y) in labels.iter().enumerate() {
            value += logp[[i, y]] * norm;
            gl[[i, y]] = norm;
        }
        logit_grads.push(softmax_backward(
            probs.view(),
            Array2::zeros(logp.dim()).view(),
            gl.view(),
        ));
    }
    Ok((value, caches, logit_grads))
}

fn add_assign(acc: &mut [f64], inc: &[f64]) {
    for (a, b) in acc.iter_mut().zip(inc) {
        *a += b;
    }
}

/// Shared body of the SSL and transfer objectives:
/// `γ·(α·mixture − bound) + labeled + coef·source` with any of the
/// likelihood terms absent.
fn build_objective(
    ensemble: &ParticleEnsemble,
    labeled: Option<(ArrayView2<'_, f64>, &[usize])>,
    source: Option<(ArrayView2<'_, f64>, &[usize], f64)>,
    weak_views: ArrayView2<'_, f64>,
    strong_views: ArrayView2<'_, f64>,
) -> Result<ObjectiveEval> {
    if weak_views.nrows() != strong_views.nrows() {
        return Err(Error::Usage("weak and strong views must pair one-to-one".into()));
    }
    let cfg = &ensemble.config;
    let activation = ensemble.particles[0].activation();
    let k = ensemble.k();
    let mut min_gap = f64::INFINITY;
    let mut param_grads = vec![vec![0.0; ensemble.particles[0].param_count()]; k];

    // Mixture-entropy term on live weak views; the same probabilities serve
    // as detached pseudo-label targets below.
    let weak_caches = ensemble.forward_all(weak_views)?;
    let weak_probs: Vec<Array2<f64>> = weak_caches.iter().map(|c| c.probabilities()).collect();
    let terms = mixture_terms(&weak_probs, cfg.order_n)?;
    let zeros = Array2::zeros(weak_probs[0].dim());
    for kk in 0..k {
        let scaled = &terms.mixture_prob_grads[kk] * (cfg.gamma * cfg.alpha);
        let lg = softmax_backward(weak_probs[kk].view(), scaled.view(), zeros.view());
        add_assign(&mut param_grads[kk], &ensemble.particles[kk].backward(&weak_caches[kk], lg.view())?);
        min_gap = min_gap.min(weak_caches[kk].min_kink_gap(activation));
    }

    // Entropy bound on strong views, weak targets frozen.
    let strong_caches = ensemble.forward_all(strong_views)?;
    let strong_probs: Vec<Array2<f64>> =
        strong_caches.iter().map(|c| c.probabilities()).collect();
    let strong_logprobs: Vec<Array2<f64>> =
        strong_caches.iter().map(|c| c.log_probabilities()).collect();
    let core =
        augmented_core(&weak_probs, &strong_probs, &strong_logprobs, cfg.tau, cfg.conf_threshold);
    for kk in 0..k {
        let gp = &core.strong_prob_grads[kk] * -cfg.gamma;
        let gl = &core.strong_logprob_grads[kk] * -cfg.gamma;
        let lg = softmax_backward(strong_probs[kk].view(), gp.view(), gl.view());
        add_assign(&mut param_grads[kk], &ensemble.particles[kk].backward(&strong_caches[kk], lg.view())?);
        min_gap = min_gap.min(strong_caches[kk].min_kink_gap(activation));
    }
    min_gap = min_gap.min(core.mask_margin);

    let mut value = cfg.gamma * (cfg.alpha * terms.mixture_entropy - core.value);

    let mut labeled_loglik = 0.0;
    if let Some((x, y)) = labeled {
        let (ll, caches, grads) = labeled_term(ensemble, x, y)?;
        labeled_loglik = ll;
        value += ll;
        for kk in 0..k {
            add_assign(&mut param_grads[kk], &ensemble.particles[kk].backward(&caches[kk], grads[kk].view())?);
            min_gap = min_gap.min(caches[kk].min_kink_gap(activation));
        }
    }

    let mut source_loglik = 0.0;
    if let Some((x, y, coef)) = source {
        let (ll, caches, grads) = labeled_term(ensemble, x, y)?;
        source_loglik = ll;
        value += coef * ll;
        for kk in 0..k {
            let scaled = &grads[kk] * coef;
            add_assign(&mut param_grads[kk], &ensemble.particles[kk].backward(&caches[kk], scaled.view())?);
            min_gap = min_gap.min(caches[kk].min_kink_gap(activation));
        }
    }

    Ok(ObjectiveEval {
        value,
        mixture_entropy: terms.mixture_entropy,
        augmented_entropy: core.value,
        labeled_loglik,
        source_loglik,
        param_grads,
        no_confident: core.surviving == 0,
        min_kink_gap: min_gap,
    })
}

/// Semi-supervised objective: information term on unlabeled views plus
/// labeled log-likelihood,
/// `γ·(α·mixture-entropy − entropy bound) + mean log p(y|x, w)`.
pub fn combined_ssl_objective(
    ensemble: &ParticleEnsemble,
    labeled_x: ArrayView2<'_, f64>,
    labeled_y: &[usize],
    weak_views: ArrayView2<'_, f64>,
    strong_views: ArrayView2<'_, f64>,
) -> Result<ObjectiveEval> {
    build_objective(ensemble, Some((labeled_x, labeled_y)), None, weak_views, strong_views)
}

/// Transfer objective: the SSL objective on target data plus the source
/// log-likelihood weighted by 1−β.
pub fn transfer_objective(
    ensemble: &ParticleEnsemble,
    source_x: ArrayView2<'_, f64>,
    source_y: &[usize],
    target_x: ArrayView2<'_, f64>,
    target_y: &[usize],
    weak_views: ArrayView2<'_, f64>,
    strong_views: ArrayView2<'_, f64>,
) -> Result<ObjectiveEval> {
    let coef = 1.0 - ensemble.config.beta;
    build_objective(
        ensemble,
        Some((target_x, target_y)),
        Some((source_x, source_y, coef)),
        weak_views,
        strong_views,
    )
}

/// Transfer without any target labels: information term on target views
/// plus the weighted source log-likelihood.
pub fn unsupervised_transfer_objective(
    ensemble: &ParticleEnsemble,
    source_x: ArrayView2<'_, f64>,
    source_y: &[usize],
    weak_views: ArrayView2<'_, f64>,
    strong_views: ArrayView2<'_, f64>,
) -> Result<ObjectiveEval> {
    let coef = 1.0 - ensemble.config.beta;
    build_objective(ensemble, None, Some((source_x, source_y, coef)), weak_views, strong_views)
}

/// Which objective [`train`] maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Ssl,
    Transfer,
    UnsupervisedTransfer,
}

/// Produces one weak and one strong view of a batch.
pub trait ViewSampler {
    fn views(
        &self,
        batch: ArrayView2<'_, f64>,
        rng: &mut ChaCha8Rng,
    ) -> (Array2<f64>, Array2<f64>);
}

/// Both views equal to the input; for tests and augmentation ablations.
pub struct IdentityViews;

impl ViewSampler for IdentityViews {
    fn views(
        &self,
        batch: ArrayView2<'_, f64>,
        _rng: &mut ChaCha8Rng,
    ) -> (Array2<f64>, Array2<f64>) {
        (batch.to_owned(), batch.to_owned())
    }
}

/// Data pools for a training run. `eval` is held out for accuracy logging
/// and never contributes gradients.
pub struct TrainData<'a> {
    pub labeled: Option<(ArrayView2<'a, f64>, &'a [usize])>,
    pub unlabeled: ArrayView2<'a, f64>,
    pub source: Option<(ArrayView2<'a, f64>, &'a [usize])>,
    pub eval: Option<(ArrayView2<'a, f64>, &'a [usize])>,
}

/// One epoch of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective value averaged over the epoch's steps.
    pub objective: f64,
    /// Exact mixture entropy on a fresh unlabeled batch at epoch end.
    pub mixture_entropy: f64,
    /// Exact conditional entropy on the same batch.
    pub conditional_entropy: f64,
    /// Entropy bound averaged over the epoch's steps.
    pub augmented_entropy: f64,
    pub labeled_loglik: f64,
    /// Steps where no sample cleared the confidence mask.
    pub no_confident_steps: usize,
    /// Per-particle eval accuracy (raw parameters); empty without eval data.
    pub particle_accuracy: Vec<f64>,
    /// Uniform-ensemble eval accuracy with raw parameters; NaN without
    /// eval data.
    pub ensemble_accuracy: f64,
    /// Same with EMA shadow parameters.
    pub ensemble_accuracy_ema: f64,
}

/// Cycles a data pool in shuffled order, reshuffling on exhaustion.
struct Cycler {
    indices: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(len: usize) -> Self {
        Self { indices: (0..len).collect(), pos: len }
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos >= self.indices.len() {
                self.indices.shuffle(rng);
                self.pos = 0;
            }
            batch.push(self.indices[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

fn gather_rows(data: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), data.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&data.row(i));
    }
    out
}

fn gather_labels(labels: &[usize], rows: &[usize]) -> Vec<usize> {
    rows.iter().map(|&i| labels[i]).collect()
}

/// Fraction of rows whose argmax matches the label; ties resolve to the
/// lowest class index.
pub fn accuracy(probs: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let mut hits = 0usize;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        let mut best = 0usize;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

/// Runs `epochs × steps_per_epoch` ascent steps on the selected objective,
/// updating every particle and its EMA shadow each step.
///
/// Labeled, unlabeled, and source pools cycle independently in shuffled
/// order. A non-finite objective aborts with a diagnostic snapshot in the
/// error. The returned log has one record per epoch.
pub fn train(
    ensemble: &mut ParticleEnsemble,
    kind: ObjectiveKind,
    data: &TrainData<'_>,
    views: &dyn ViewSampler,
) -> Result<Vec<EpochRecord>> {
    match kind {
        ObjectiveKind::Ssl => {
            if data.labeled.is_none() {
                return Err(Error::Usage("SSL training needs labeled data".into()));
            }
        }
        ObjectiveKind::Transfer => {
            if data.labeled.is_none() || data.source.is_none() {
                return Err(Error::Usage(
                    "transfer training needs source and target labeled data".into(),
                ));
            }
        }
        ObjectiveKind::UnsupervisedTransfer => {
            if data.source.is_none() {
                return Err(Error::Usage("unsupervised transfer needs source data".into()));
            }
        }
    }
    if data.unlabeled.nrows() == 0 {
        return Err(Error::Usage("unlabeled pool is empty".into()));
    }
    let mut rng = ensemble.rng.clone();
    let result = train_inner(ensemble, kind, data, views, &mut rng);
    ensemble.rng = rng;
    result
}

fn train_inner(
    ensemble: &mut ParticleEnsemble,
    kind: ObjectiveKind,
    data: &TrainData<'_>,
    views: &dyn ViewSampler,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochRecord>> {
    let cfg = ensemble.config.clone();
    let total_steps = (cfg.epochs * cfg.steps_per_epoch) as u64;
    let schedule = LrSchedule {
        base_lr: cfg.base_lr,
        warmup_steps: cfg.warmup_steps,
        total_steps,
    };
    let mut opts: Vec<OptimizerState> = ensemble
        .particles
        .iter()
        .map(|p| OptimizerState::new(p.param_count(), schedule.clone(), cfg.momentum))
        .collect();
    let mut labeled_cycler = data.labeled.map(|(x, _)| Cycler::new(x.nrows()));
    let mut source_cycler = data.source.map(|(x, _)| Cycler::new(x.nrows()));
    let mut unlabeled_cycler = Cycler::new(data.unlabeled.nrows());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut objective_sum = 0.0;
        let mut augmented_sum = 0.0;
        let mut loglik_sum = 0.0;
        let mut no_confident_steps = 0usize;
        for _ in 0..cfg.steps_per_epoch {
            global_step += 1;
            let labeled_batch = data.labeled.map(|(x, y)| {
                let idx =
                    labeled_cycler.as_mut().unwrap().next_batch(cfg.labeled_batch, rng);
                (gather_rows(x, &idx), gather_labels(y, &idx))
            });
            let source_batch = data.source.map(|(x, y)| {
                let idx = source_cycler.as_mut().unwrap().next_batch(cfg.labeled_batch, rng);
                (gather_rows(x, &idx), gather_labels(y, &idx))
            });
            let unlabeled_idx = unlabeled_cycler.next_batch(cfg.unlabeled_batch, rng);
            let unlabeled = gather_rows(data.unlabeled, &unlabeled_idx);
            let (weak, strong) = views.views(unlabeled.view(), rng);
            let eval = match kind {
                ObjectiveKind::Ssl => {
                    let (x, y) = labeled_batch.as_ref().unwrap();
                    combined_ssl_objective(ensemble, x.view(), y, weak.view(), strong.view())?
                }
                ObjectiveKind::Transfer => {
                    let (sx, sy) = source_batch.as_ref().unwrap();
                    let (tx, ty) = labeled_batch.as_ref().unwrap();
                    transfer_objective(
                        ensemble,
                        sx.view(),
                        sy,
                        tx.view(),
                        ty,
                        weak.view(),
                        strong.view(),
                    )?
                }
                ObjectiveKind::UnsupervisedTransfer => {
                    let (sx, sy) = source_batch.as_ref().unwrap();
                    unsupervised_transfer_objective(
                        ensemble,
                        sx.view(),
                        sy,
                        weak.view(),
                        strong.view(),
                    )?
                }
            };
            if !eval.value.is_finite() {
                let norms: Vec<String> = ensemble
                    .particles
                    .iter()
                    .map(|p| {
                        let n = p.params().iter().map(|v| v * v).sum::<f64>().sqrt();
                        format!("{n:.3e}")
                    })
                    .collect();
                return Err(Error::Numerical {
                    step: global_step,
                    detail: format!(
                        "objective {} at epoch {epoch}; particle parameter norms [{}]",
                        eval.value,
                        norms.join(", ")
                    ),
                });
            }
            objective_sum += eval.value;
            augmented_sum += eval.augmented_entropy;
            loglik_sum += eval.labeled_loglik;
            if eval.no_confident {
                no_confident_steps += 1;
            }
            for kk in 0..ensemble.particles.len() {
                let descent: Vec<f64> = eval.param_grads[kk].iter().map(|g| -g).collect();
                sgd_step(&mut ensemble.particles[kk], &descent, &mut opts[kk], cfg.weight_decay)?;
                let params = ensemble.particles[kk].params().to_vec();
                ensemble.shadows[kk].update(&params);
            }
        }
        // Exact entropies at epoch end, on a fresh un-augmented batch.
        let probe_idx = unlabeled_cycler.next_batch(cfg.unlabeled_batch, rng);
        let probe = gather_rows(data.unlabeled, &probe_idx);
        let mi = ssl_mi(ensemble, probe.view(), cfg.alpha)?;
        let steps = cfg.steps_per_epoch as f64;
        let (particle_accuracy, ensemble_accuracy, ensemble_accuracy_ema) =
            if let Some((ex, ey)) = data.eval {
                let per: Result<Vec<f64>> = ensemble
                    .particles
                    .iter()
                    .map(|p| Ok(accuracy(p.forward(ex)?.probabilities().view(), ey)))
                    .collect();
                let raw = accuracy(ensemble_predict(ensemble, ex, false)?.view(), ey);
                let ema = accuracy(ensemble_predict(ensemble, ex, true)?.view(), ey);
                (per?, raw, ema)
            } else {
                (Vec::new(), f64::NAN, f64::NAN)
            };
        log.push(EpochRecord {
            epoch,
            objective: objective_sum / steps,
            mixture_entropy: mi.mixture_entropy,
            conditional_entropy: mi.conditional_entropy,
            augmented_entropy: augmented_sum / steps,
            labeled_loglik: loglik_sum / steps,
            no_confident_steps,
            particle_accuracy,
            ensemble_accuracy,
            ensemble_accuracy_ema,
        });
    }
    Ok(log)
}

/// Uniform average of per-particle class probabilities; EMA shadow
/// parameters when `use_ema`.
pub fn ensemble_predict(
    ensemble: &ParticleEnsemble,
    inputs: ArrayView2<'_, f64>,
    use_ema: bool,
) -> Result<Array2<f64>> {
    let c = ensemble.class_count();
    let mut sum = Array2::zeros((inputs.nrows(), c));
    for (kk, particle) in ensemble.particles.iter().enumerate() {
        let probs = if use_ema {
            ensemble.shadows[kk].as_network(particle).forward(inputs)?.probabilities()
        } else {
            particle.forward(inputs)?.probabilities()
        };
        sum += &probs;
    }
    Ok(sum / ensemble.k() as f64)
}

/// Average of per-particle probabilities weighted by each particle's
/// likelihood of the anchor labels, `w_k ∝ exp Σ_i ln p_k(y_i | x_i)`.
pub fn ensemble_predict_weighted(
    ensemble: &ParticleEnsemble,
    inputs: ArrayView2<'_, f64>,
    anchor_x: ArrayView2<'_, f64>,
    anchor_y: &[usize],
    use_ema: bool,
) -> Result<Array2<f64>> {
    if anchor_y.len() != anchor_x.nrows() || anchor_y.is_empty() {
        return Err(Error::Usage("anchor needs one label per row".into()));
    }
    let nets: Vec<MlpNetwork> = ensemble
        .particles
        .iter()
        .enumerate()
        .map(|(kk, p)| if use_ema { ensemble.shadows[kk].as_network(p) } else { p.clone() })
        .collect();
    let mut log_weights = Vec::with_capacity(nets.len());
    for net in &nets {
        let logp = net.forward(anchor_x)?.log_probabilities();
        log_weights
            .push(anchor_y.iter().enumerate().map(|(i, &y)| logp[[i, y]]).sum::<f64>());
    }
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_weights.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let c = ensemble.class_count();
    let mut out = Array2::zeros((inputs.nrows(), c));
    for (net, &w) in nets.iter().zip(&weights) {
        out += &(net.forward(inputs)?.probabilities() * w);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    version: u32,
    k: usize,
    layer_sizes: Vec<usize>,
    activation: String,
    step_count: u64,
    files: Vec<String>,
}

const MANIFEST_VERSION: u32 = 1;

/// Writes one checkpoint file per particle plus `manifest.json`.
pub fn save_ensemble(dir: &Path, ensemble: &ParticleEnsemble, step_count: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(ensemble.k());
    for (kk, particle) in ensemble.particles.iter().enumerate() {
        let name = format!("particle_{kk:03}.json");
        crate::nn::save_checkpoint(
            &dir.join(&name),
            particle,
            &ensemble.shadows[kk],
            step_count,
        )?;
        files.push(name);
    }
    let manifest = EnsembleManifest {
        version: MANIFEST_VERSION,
        k: ensemble.k(),
        layer_sizes: ensemble.particles[0].layer_sizes().to_vec(),
        activation: ensemble.particles[0].activation().tag().to_string(),
        step_count,
        files,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads an ensemble written by [`save_ensemble`]. The supplied config must
/// agree with the manifest's particle count.
pub fn load_ensemble(dir: &Path, config: TrainConfig) -> Result<(ParticleEnsemble, u64)> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: EnsembleManifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Serialization(format!(
            "unsupported ensemble manifest version {}",
            manifest.version
        )));
    }
    if manifest.k != config.k {
        return Err(Error::Usage(format!(
            "manifest has {} particles but config says K = {}",
            manifest.k, config.k
        )));
    }
    let mut particles = Vec::with_capacity(manifest.k);
    let mut shadows = Vec::with_capacity(manifest.k);
    for name in &manifest.files {
        let (net, ema, _) = crate::nn::load_checkpoint(&dir.join(name))?;
        particles.push(net);
        shadows.push(ema);
    }
    let ensemble = ParticleEnsemble::from_parts(particles, shadows, config)?;
    Ok((ensemble, manifest.step_count))
}

/// One evaluation of an ensemble objective for gradient probing.
#[derive(Debug, Clone, Copy)]
pub struct EnsembleProbe {
    pub value: f64,
    /// Distance to the nearest non-differentiable point (activation kinks,
    /// mask boundaries); probes closer than [`KINK_GUARD`] are skipped.
    pub min_kink_gap: f64,
}

/// Central-difference audit of per-particle analytic gradients, one report
/// per particle. Mirrors the single-network checker but perturbs particles
/// in place through the ensemble.
pub fn ensemble_grad_check(
    ensemble: &mut ParticleEnsemble,
    eval: impl Fn(&ParticleEnsemble) -> Result<EnsembleProbe>,
    analytic: &[Vec<f64>],
    probes_per_particle: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<FiniteDiffReport>> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Usage(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    if analytic.len() != ensemble.k() {
        return Err(Error::Usage("one analytic gradient per particle required".into()));
    }
    let base = eval(ensemble)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(ensemble.k());
    for kk in 0..ensemble.k() {
        let count = ensemble.particles[kk].param_count();
        if analytic[kk].len() != count {
            return Err(Error::Usage(format!("analytic gradient {kk} has the wrong length")));
        }
        let mut max_rel_err = 0.0f64;
        let mut probed = 0usize;
        let mut skipped = 0usize;
        let mut attempts = 0usize;
        let budget = probes_per_particle.saturating_mul(10);
        while probed < probes_per_particle && attempts < budget {
            attempts += 1;
            let i = rng.gen_range(0..count);
            let original = ensemble.particles[kk].params()[i];
            ensemble.particle_mut(kk).params_mut()[i] = original + eps;
            let plus = eval(ensemble)?;
            ensemble.particle_mut(kk).params_mut()[i] = original - eps;
            let minus = eval(ensemble)?;
            ensemble.particle_mut(kk).params_mut()[i] = original;
            if base.min_kink_gap < KINK_GUARD
                || plus.min_kink_gap < KINK_GUARD
                || minus.min_kink_gap < KINK_GUARD
            {
                skipped += 1;
                continue;
            }
            let fd = (plus.value - minus.value) / (2.0 * eps);
            let an = analytic[kk][i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
            probed += 1;
        }
        reports.push(FiniteDiffReport { max_rel_err, probed, skipped });
    }
    Ok(reports)
}
