//! `gradcheck`: audits the network's analytic cross-entropy gradient
//! against central finite differences on random data.

use std::path::PathBuf;

use ndarray::Array2;
use rand::distributions::Distribution as _;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use refprior::nn::{finite_diff_check, Activation, MlpNetwork, ProbeEval};
use refprior::{Error, Result};

use crate::artifacts::{write_json, write_resolved_config};
use crate::config::{pick, ConfigMap};

#[derive(clap::Args)]
pub struct GradcheckArgs {
    /// Hidden layer count; 0 checks a linear softmax model.
    #[arg(long)]
    depth: Option<usize>,
    /// Activation: hardtanh or leaky_relu.
    #[arg(long)]
    activation: Option<String>,
    /// Parameter coordinates probed.
    #[arg(long)]
    probes: Option<usize>,
    /// Hidden layer width.
    #[arg(long)]
    width: Option<usize>,
    /// Input features.
    #[arg(long)]
    features: Option<usize>,
    /// Output classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Random data rows.
    #[arg(long)]
    samples: Option<usize>,
    /// Central-difference step.
    #[arg(long)]
    eps: Option<f64>,
    /// Maximum relative error tolerated; default 1e-6 linear, 1e-4 deep.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optional output directory for report.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the resolved configuration into the output directory.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Serialize)]
struct GradcheckReport {
    depth: usize,
    activation: String,
    layer_sizes: Vec<usize>,
    samples: usize,
    probes_requested: usize,
    probed: usize,
    skipped: usize,
    eps: f64,
    tolerance: f64,
    max_rel_err: f64,
    pass: bool,
}

pub fn run(args: GradcheckArgs) -> Result<i32> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let depth = pick(args.depth, cfg.take("depth")?, 1);
    let activation_raw = pick(args.activation, cfg.take("activation")?, "hardtanh".to_string());
    let activation = Activation::from_tag(&activation_raw)?;
    let probes = pick(args.probes, cfg.take("probes")?, 64);
    let width = pick(args.width, cfg.take("width")?, 16);
    let features = pick(args.features, cfg.take("features")?, 8);
    let classes = pick(args.classes, cfg.take("classes")?, 3);
    let samples = pick(args.samples, cfg.take("samples")?, 32);
    let eps = pick(args.eps, cfg.take("eps")?, 1e-5);
    let default_tolerance = if depth == 0 { 1e-6 } else { 1e-4 };
    let tolerance = pick(args.tolerance, cfg.take("tolerance")?, default_tolerance);
    let seed = pick(args.seed, cfg.take("seed")?, 0);
    cfg.finish()?;
    if classes < 2 {
        return Err(Error::Usage("at least two classes required".into()));
    }
    if samples < 1 {
        return Err(Error::Usage("at least one sample required".into()));
    }

    let mut layer_sizes = vec![features];
    layer_sizes.extend(std::iter::repeat(width).take(depth));
    layer_sizes.push(classes);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let inputs =
        Array2::from_shape_fn((samples, features), |_| normal.sample(&mut rng));
    let labels: Vec<usize> = (0..samples).map(|_| rng.gen_range(0..classes)).collect();

    let mut net = MlpNetwork::init(&layer_sizes, activation, seed.wrapping_add(1))?;

    // Mean cross-entropy; its logit gradient flows through the log-prob
    // channel of the softmax backward pass.
    let cache = net.forward(inputs.view())?;
    let log_probs = cache.log_probabilities();
    let probs = cache.probabilities();
    let norm = 1.0 / samples as f64;
    let mut gl = Array2::zeros(log_probs.dim());
    for (i, &y) in labels.iter().enumerate() {
        gl[[i, y]] = -norm;
    }
    let logit_grads =
        refprior::nn::softmax_backward(probs.view(), Array2::zeros(probs.dim()).view(), gl.view());
    let analytic = net.backward(&cache, logit_grads.view())?;

    let loss_labels = labels.clone();
    let loss_inputs = inputs.clone();
    let loss = move |net: &MlpNetwork| -> ProbeEval {
        let cache = net.forward(loss_inputs.view()).expect("probe keeps the input shape");
        let log_probs = cache.log_probabilities();
        let value = -loss_labels
            .iter()
            .enumerate()
            .map(|(i, &y)| log_probs[[i, y]])
            .sum::<f64>()
            * norm;
        ProbeEval { value, kink_gap: cache.min_kink_gap(activation) }
    };
    let report = finite_diff_check(&mut net, loss, &analytic, probes, eps, seed)?;

    let pass = report.max_rel_err < tolerance && report.probed >= probes;
    let out_report = GradcheckReport {
        depth,
        activation: activation.tag().to_string(),
        layer_sizes,
        samples,
        probes_requested: probes,
        probed: report.probed,
        skipped: report.skipped,
        eps,
        tolerance,
        max_rel_err: report.max_rel_err,
        pass,
    };
    println!("{}", serde_json::to_string_pretty(&out_report)?);
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        if args.dump_config {
            let entries = vec![
                ("depth", depth.to_string()),
                ("activation", out_report.activation.clone()),
                ("probes", probes.to_string()),
                ("width", width.to_string()),
                ("features", features.to_string()),
                ("classes", classes.to_string()),
                ("samples", samples.to_string()),
                ("eps", eps.to_string()),
                ("tolerance", tolerance.to_string()),
                ("seed", seed.to_string()),
            ];
            write_resolved_config(out, &entries)?;
        }
        write_json(&out.join("report.json"), &out_report)?;
    } else if args.dump_config {
        return Err(Error::Usage("--dump-config needs --out".into()));
    }
    Ok(if pass { 0 } else { 1 })
}
