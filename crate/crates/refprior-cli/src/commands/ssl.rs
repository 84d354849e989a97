//! `ssl`: semi-supervised particle-ensemble training with a paired
//! supervised-only baseline for comparison.

use std::path::{Path, PathBuf};

use serde::Serialize;

use refprior::data::{split_labeled, AugmentViews, Dataset, LabeledSplit, SplitSpec};
use refprior::particles::{
    save_ensemble, train, EpochRecord, ObjectiveKind, ParticleEnsemble, TrainConfig, TrainData,
};
use refprior::{Error, Result};

use crate::artifacts::{write_json, write_jsonl, write_resolved_config};
use crate::config::{flag, pick, ConfigMap};
use crate::svg::{Plot, SeriesKind, PALETTE};

use super::dataset::{DataArgs, DataParams, DatasetArg};
use super::training::{TrainArgs, TrainDefaults, TrainParams};

#[derive(clap::Args)]
pub struct SslArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Labeled examples kept per class; the rest train unlabeled.
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write accuracy.svg.
    #[arg(long)]
    emit_svg: bool,
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the resolved configuration into the output directory.
    #[arg(long)]
    dump_config: bool,
}

/// Final-epoch metrics of one training run.
#[derive(Serialize)]
pub struct RunMetrics {
    pub objective: f64,
    pub mixture_entropy: f64,
    pub conditional_entropy: f64,
    /// Mixture minus conditional entropy: the particle-information value.
    pub information: f64,
    pub augmented_entropy: f64,
    pub labeled_loglik: f64,
    pub no_confident_steps: usize,
    pub particle_accuracy: Vec<f64>,
    pub max_particle_accuracy: f64,
    pub ensemble_accuracy: f64,
    pub ensemble_accuracy_ema: f64,
}

impl RunMetrics {
    pub fn from_last_epoch(records: &[EpochRecord]) -> Result<Self> {
        let last = records
            .last()
            .ok_or_else(|| Error::Usage("training produced no epochs".into()))?;
        let max_particle =
            last.particle_accuracy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            objective: last.objective,
            mixture_entropy: last.mixture_entropy,
            conditional_entropy: last.conditional_entropy,
            information: last.mixture_entropy - last.conditional_entropy,
            augmented_entropy: last.augmented_entropy,
            labeled_loglik: last.labeled_loglik,
            no_confident_steps: last.no_confident_steps,
            particle_accuracy: last.particle_accuracy.clone(),
            max_particle_accuracy: max_particle,
            ensemble_accuracy: last.ensemble_accuracy,
            ensemble_accuracy_ema: last.ensemble_accuracy_ema,
        })
    }
}

#[derive(Serialize)]
struct SslMetrics {
    dataset: String,
    seed: u64,
    k: usize,
    order: usize,
    epochs: usize,
    steps_per_epoch: usize,
    gamma: f64,
    labeled_per_class: usize,
    labeled_count: usize,
    unlabeled_count: usize,
    main: RunMetrics,
    baseline: Option<RunMetrics>,
    /// Main minus baseline ensemble accuracy, raw parameters.
    accuracy_gain: Option<f64>,
    accuracy_gain_ema: Option<f64>,
}

pub fn run(args: SslArgs) -> Result<i32> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let data = DataParams::resolve(args.data, &mut cfg, DatasetArg::TwoMoons)?;
    let defaults = TrainDefaults { epochs: 30, steps: 64, gamma: None };
    let params = TrainParams::resolve(args.train, &mut cfg, &defaults)?;
    let per_class = pick(args.per_class, cfg.take("per_class")?, 2);
    let seed = pick(args.seed, cfg.take("seed")?, 0);
    let emit_svg = flag(args.emit_svg, cfg.take("emit_svg")?);
    cfg.finish()?;

    std::fs::create_dir_all(&args.out)?;
    if args.dump_config {
        let mut entries = Vec::new();
        data.dump(&mut entries);
        params.dump(&mut entries);
        entries.push(("per_class", per_class.to_string()));
        entries.push(("seed", seed.to_string()));
        entries.push(("emit_svg", emit_svg.to_string()));
        write_resolved_config(&args.out, &entries)?;
    }

    let dataset = data.build(seed)?;
    let split = split_labeled(&dataset, &SplitSpec { per_class, seed })?;
    let layers = params.layer_sizes(dataset.kind().feature_count(), dataset.class_count());

    let config = params.config(0.5, seed)?;
    eprintln!(
        "ssl on {}: K={} order={} {} epochs x {} steps, {} labeled / {} unlabeled",
        data.dataset.name(),
        config.k,
        config.order_n,
        config.epochs,
        config.steps_per_epoch,
        split.labeled.len(),
        split.unlabeled.len()
    );
    let (records, ensemble) =
        train_split(&layers, params.activation, config.clone(), &split, &dataset, &args.out, true)?;
    write_jsonl(&args.out.join("log.jsonl"), &records)?;
    let main = RunMetrics::from_last_epoch(&records)?;
    drop(ensemble);

    // Identical run with the information term off: the supervised baseline
    // the information gain is judged against.
    let (baseline, baseline_records) = if params.gamma == 0.0 {
        (None, Vec::new())
    } else {
        let supervised = params.supervised_config(0.5, seed)?;
        eprintln!("ssl baseline: same run with the information term off");
        let (records_b, _) =
            train_split(&layers, params.activation, supervised, &split, &dataset, &args.out, false)?;
        write_jsonl(&args.out.join("baseline_log.jsonl"), &records_b)?;
        (Some(RunMetrics::from_last_epoch(&records_b)?), records_b)
    };

    if emit_svg {
        let mut plot = Plot::new("Ensemble accuracy by epoch", "epoch", "accuracy");
        plot.add("ensemble", PALETTE[0], SeriesKind::Line, accuracy_curve(&records, false));
        plot.add("ensemble (EMA)", PALETTE[2], SeriesKind::Line, accuracy_curve(&records, true));
        if !baseline_records.is_empty() {
            plot.add(
                "supervised baseline",
                PALETTE[1],
                SeriesKind::Line,
                accuracy_curve(&baseline_records, false),
            );
        }
        plot.write(&args.out.join("accuracy.svg"))?;
    }

    let metrics = SslMetrics {
        dataset: data.dataset.name().to_string(),
        seed,
        k: params.k,
        order: params.order,
        epochs: params.epochs,
        steps_per_epoch: params.steps,
        gamma: params.gamma,
        labeled_per_class: per_class,
        labeled_count: split.labeled.len(),
        unlabeled_count: split.unlabeled.len(),
        accuracy_gain: baseline.as_ref().map(|b| main.ensemble_accuracy - b.ensemble_accuracy),
        accuracy_gain_ema: baseline
            .as_ref()
            .map(|b| main.ensemble_accuracy_ema - b.ensemble_accuracy_ema),
        main,
        baseline,
    };
    write_json(&args.out.join("metrics.json"), &metrics)?;
    println!(
        "ssl done: ensemble accuracy {:.4}{}",
        metrics.main.ensemble_accuracy,
        match metrics.accuracy_gain {
            Some(gain) => format!(", gain over supervised baseline {:+.4}", gain),
            None => String::new(),
        }
    );
    Ok(0)
}

/// Trains one ensemble on a labeled/unlabeled split, evaluating on the
/// unlabeled pool's held-back labels. Only the main run saves checkpoints.
fn train_split(
    layers: &[usize],
    activation: refprior::nn::Activation,
    config: TrainConfig,
    split: &LabeledSplit,
    dataset: &Dataset,
    out: &Path,
    save: bool,
) -> Result<(Vec<EpochRecord>, ParticleEnsemble)> {
    let labels = split
        .labeled
        .labels()
        .ok_or_else(|| Error::Usage("labeled split lost its labels".into()))?;
    let total_steps = (config.epochs * config.steps_per_epoch) as u64;
    let mut ensemble = ParticleEnsemble::new(layers, activation, config)?;
    if save {
        save_ensemble(&out.join("checkpoints").join("init"), &ensemble, 0)?;
    }
    let train_data = TrainData {
        labeled: Some((split.labeled.inputs(), labels)),
        unlabeled: split.unlabeled.inputs(),
        source: None,
        eval: Some((split.unlabeled.inputs(), split.eval.for_evaluation_only())),
    };
    let views = AugmentViews { kind: dataset.kind() };
    let records = train(&mut ensemble, ObjectiveKind::Ssl, &train_data, &views)?;
    if save {
        save_ensemble(&out.join("checkpoints").join("final"), &ensemble, total_steps)?;
    }
    Ok((records, ensemble))
}

fn accuracy_curve(records: &[EpochRecord], ema: bool) -> Vec<(f64, f64)> {
    records
        .iter()
        .map(|r| {
            let acc = if ema { r.ensemble_accuracy_ema } else { r.ensemble_accuracy };
            (r.epoch as f64, acc)
        })
        .collect()
}
