//! Shared training knobs for the ssl and transfer subcommands, resolved
//! into a [`TrainConfig`] plus the network architecture around it.

use refprior::nn::Activation;
use refprior::particles::TrainConfig;
use refprior::{Error, Result};

use crate::config::{pick, ConfigMap};

#[derive(clap::Args)]
pub struct TrainArgs {
    /// Particle count K.
    #[arg(long, alias = "K")]
    k: Option<usize>,
    /// Tuple order n of the information objective.
    #[arg(long)]
    order: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Optimizer steps per epoch.
    #[arg(long)]
    steps: Option<usize>,
    /// Weight on the mixture-entropy term.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight on the whole information term; 0 trains supervised-only.
    #[arg(long)]
    gamma: Option<f64>,
    /// Augmentation mixing rate of the entropy bound.
    #[arg(long)]
    tau: Option<f64>,
    /// Weak-view confidence needed to pseudo-label a sample.
    #[arg(long)]
    conf_threshold: Option<f64>,
    /// Labeled rows per step.
    #[arg(long)]
    labeled_batch: Option<usize>,
    /// Unlabeled rows per step.
    #[arg(long)]
    unlabeled_batch: Option<usize>,
    /// Peak learning rate; defaults to 0.03·K.
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum.
    #[arg(long)]
    momentum: Option<f64>,
    /// Weight decay; defaults to 5e-4/K.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Linear warmup steps before the cosine decay.
    #[arg(long)]
    warmup: Option<u64>,
    /// EMA decay for the evaluation shadows.
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Hidden layer widths, comma separated; empty for a linear model.
    #[arg(long)]
    hidden: Option<String>,
    /// Activation: hardtanh or leaky_relu.
    #[arg(long)]
    activation: Option<String>,
}

/// Per-command defaults where the shared ones do not fit.
pub struct TrainDefaults {
    pub epochs: usize,
    pub steps: usize,
    /// `None` keeps the library default γ = 1/(1−τ²).
    pub gamma: Option<f64>,
}

/// Fully resolved training parameters. `gamma` keeps the user-facing value;
/// a supervised-only run (γ = 0) is realized as the smallest positive
/// double, which zeroes the information term numerically while satisfying
/// the config invariant γ > 0.
pub struct TrainParams {
    pub k: usize,
    pub order: usize,
    pub epochs: usize,
    pub steps: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub conf_threshold: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup: u64,
    pub ema_decay: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl TrainParams {
    pub fn resolve(args: TrainArgs, cfg: &mut ConfigMap, defaults: &TrainDefaults) -> Result<Self> {
        let k = pick(args.k, cfg.take("k")?, 4);
        if k < 1 {
            return Err(Error::Usage("particle count must be at least 1".into()));
        }
        let base = TrainConfig::new(k);
        let default_gamma = defaults.gamma.unwrap_or(base.gamma);
        let hidden_raw = pick(args.hidden, cfg.take("hidden")?, "32,32".to_string());
        let activation_raw = pick(args.activation, cfg.take("activation")?, "hardtanh".to_string());
        Ok(Self {
            k,
            order: pick(args.order, cfg.take("order")?, base.order_n),
            epochs: pick(args.epochs, cfg.take("epochs")?, defaults.epochs),
            steps: pick(args.steps, cfg.take("steps")?, defaults.steps),
            alpha: pick(args.alpha, cfg.take("alpha")?, base.alpha),
            gamma: pick(args.gamma, cfg.take("gamma")?, default_gamma),
            tau: pick(args.tau, cfg.take("tau")?, base.tau),
            conf_threshold: pick(args.conf_threshold, cfg.take("conf_threshold")?, base.conf_threshold),
            labeled_batch: pick(args.labeled_batch, cfg.take("labeled_batch")?, base.labeled_batch),
            unlabeled_batch: pick(args.unlabeled_batch, cfg.take("unlabeled_batch")?, base.unlabeled_batch),
            lr: pick(args.lr, cfg.take("lr")?, base.base_lr),
            momentum: pick(args.momentum, cfg.take("momentum")?, base.momentum),
            weight_decay: pick(args.weight_decay, cfg.take("weight_decay")?, base.weight_decay),
            warmup: pick(args.warmup, cfg.take("warmup")?, base.warmup_steps),
            ema_decay: pick(args.ema_decay, cfg.take("ema_decay")?, base.ema_decay),
            hidden: parse_hidden(&hidden_raw)?,
            activation: Activation::from_tag(&activation_raw)?,
        })
    }

    /// The library config for this run; β only matters for transfer.
    pub fn config(&self, beta: f64, seed: u64) -> Result<TrainConfig> {
        if self.gamma < 0.0 {
            return Err(Error::Usage(format!("gamma {} must not be negative", self.gamma)));
        }
        let gamma = if self.gamma == 0.0 { f64::MIN_POSITIVE } else { self.gamma };
        let config = TrainConfig {
            k: self.k,
            order_n: self.order,
            alpha: self.alpha,
            gamma,
            beta,
            tau: self.tau,
            conf_threshold: self.conf_threshold,
            epochs: self.epochs,
            steps_per_epoch: self.steps,
            labeled_batch: self.labeled_batch,
            unlabeled_batch: self.unlabeled_batch,
            base_lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup,
            ema_decay: self.ema_decay,
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    /// Same run with the information term switched off, for the paired
    /// supervised baseline.
    pub fn supervised_config(&self, beta: f64, seed: u64) -> Result<TrainConfig> {
        let mut config = self.config(beta, seed)?;
        config.gamma = f64::MIN_POSITIVE;
        Ok(config)
    }

    pub fn layer_sizes(&self, input_dim: usize, class_count: usize) -> Vec<usize> {
        let mut layers = Vec::with_capacity(self.hidden.len() + 2);
        layers.push(input_dim);
        layers.extend_from_slice(&self.hidden);
        layers.push(class_count);
        layers
    }

    pub fn dump(&self, out: &mut Vec<(&'static str, String)>) {
        out.push(("k", self.k.to_string()));
        out.push(("order", self.order.to_string()));
        out.push(("epochs", self.epochs.to_string()));
        out.push(("steps", self.steps.to_string()));
        out.push(("alpha", self.alpha.to_string()));
        out.push(("gamma", self.gamma.to_string()));
        out.push(("tau", self.tau.to_string()));
        out.push(("conf_threshold", self.conf_threshold.to_string()));
        out.push(("labeled_batch", self.labeled_batch.to_string()));
        out.push(("unlabeled_batch", self.unlabeled_batch.to_string()));
        out.push(("lr", self.lr.to_string()));
        out.push(("momentum", self.momentum.to_string()));
        out.push(("weight_decay", self.weight_decay.to_string()));
        out.push(("warmup", self.warmup.to_string()));
        out.push(("ema_decay", self.ema_decay.to_string()));
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        out.push(("hidden", hidden.join(",")));
        out.push(("activation", self.activation.tag().to_string()));
    }
}

fn parse_hidden(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| Error::Usage(format!("hidden width `{s}`: {e}")))
        })
        .collect()
}
