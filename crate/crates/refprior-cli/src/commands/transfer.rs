//! `transfer`: particle-ensemble training that carries a source task's
//! likelihood into a target task, against a pretrain-then-finetune baseline.

use std::path::PathBuf;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use refprior::data::{select_classes, split_labeled, AugmentViews, SplitSpec};
use refprior::particles::{
    ensemble_predict, save_ensemble, train, EpochRecord, ObjectiveKind, ParticleEnsemble,
    TrainData,
};
use refprior::{Error, Result};

use crate::artifacts::{write_json, write_jsonl, write_resolved_config};
use crate::config::{flag, parse_index_list, pick, require, ConfigMap};
use crate::svg::{Plot, SeriesKind, PALETTE};

use super::dataset::{DataArgs, DataParams, DatasetArg};
use super::ssl::RunMetrics;
use super::training::{TrainArgs, TrainDefaults, TrainParams};

#[derive(clap::Args)]
pub struct TransferArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Source-task classes, comma separated (e.g. 0,1,2,3,4).
    #[arg(long)]
    source_classes: Option<String>,
    /// Target-task classes; must match the source count.
    #[arg(long)]
    target_classes: Option<String>,
    /// Labeled target examples per class; ignored with --unsupervised.
    #[arg(long)]
    per_class_target: Option<usize>,
    /// Use no target labels at all.
    #[arg(long)]
    unsupervised: bool,
    /// Transfer interpolation; the source likelihood enters with weight 1−β.
    #[arg(long)]
    beta: Option<f64>,
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

#[derive(Serialize)]
struct TransferSide {
    #[serde(flatten)]
    run: RunMetrics,
    /// Accuracy maximized over relabelings of the predicted classes.
    clustering_accuracy: f64,
    clustering_accuracy_ema: f64,
    /// The winning relabeling: predicted class i counts as true class
    /// best_permutation[i].
    best_permutation: Vec<usize>,
}

#[derive(Serialize)]
struct TransferMetrics {
    dataset: String,
    seed: u64,
    source_classes: Vec<usize>,
    target_classes: Vec<usize>,
    unsupervised: bool,
    beta: f64,
    gamma: f64,
    k: usize,
    order: usize,
    epochs: usize,
    steps_per_epoch: usize,
    per_class_target: Option<usize>,
    source_count: usize,
    target_count: usize,
    main: TransferSide,
    baseline: TransferSide,
    accuracy_gain: f64,
    clustering_gain: f64,
}

pub fn run(args: TransferArgs) -> Result<i32> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let data = DataParams::resolve(args.data, &mut cfg, DatasetArg::Mnist)?;
    let defaults = TrainDefaults { epochs: 20, steps: 64, gamma: Some(0.5) };
    let params = TrainParams::resolve(args.train, &mut cfg, &defaults)?;
    let source_raw = require(args.source_classes, cfg.take("source_classes")?, "source-classes")?;
    let target_raw = require(args.target_classes, cfg.take("target_classes")?, "target-classes")?;
    let source_classes = parse_index_list(&source_raw)?;
    let target_classes = parse_index_list(&target_raw)?;
    let per_class_target = pick(args.per_class_target, cfg.take("per_class_target")?, 10);
    let unsupervised = flag(args.unsupervised, cfg.take("unsupervised")?);
    let beta = pick(args.beta, cfg.take("beta")?, 0.5);
    let seed = pick(args.seed, cfg.take("seed")?, 0);
    let emit_svg = flag(args.emit_svg, cfg.take("emit_svg")?);
    cfg.finish()?;

    if source_classes.len() != target_classes.len() {
        return Err(Error::Usage(format!(
            "source and target must have the same class count for a shared head; got {} vs {}",
            source_classes.len(),
            target_classes.len()
        )));
    }
    if !unsupervised && per_class_target < 1 {
        return Err(Error::Usage(
            "supervised transfer needs --per-class-target >= 1; use --unsupervised otherwise".into(),
        ));
    }

    std::fs::create_dir_all(&args.out)?;
    if args.dump_config {
        let mut entries = Vec::new();
        data.dump(&mut entries);
        params.dump(&mut entries);
        entries.push(("source_classes", join_list(&source_classes)));
        entries.push(("target_classes", join_list(&target_classes)));
        entries.push(("per_class_target", per_class_target.to_string()));
        entries.push(("unsupervised", unsupervised.to_string()));
        entries.push(("beta", beta.to_string()));
        entries.push(("seed", seed.to_string()));
        entries.push(("emit_svg", emit_svg.to_string()));
        write_resolved_config(&args.out, &entries)?;
    }

    let full = data.build(seed)?;
    let source_ds = select_classes(&full, &source_classes)?;
    let target_ds = select_classes(&full, &target_classes)?;
    let source_labels =
        source_ds.labels().ok_or_else(|| Error::Usage("source task lost its labels".into()))?;
    let layers = params.layer_sizes(full.kind().feature_count(), source_ds.class_count());

    // Target pools. The evaluation rows keep their true labels purely for
    // scoring; with --unsupervised every target row trains unlabeled.
    let target_split;
    let (kind, labeled, unlabeled, eval_x, eval_y): (
        ObjectiveKind,
        Option<(ArrayView2<'_, f64>, &[usize])>,
        ArrayView2<'_, f64>,
        ArrayView2<'_, f64>,
        &[usize],
    ) = if unsupervised {
        let eval_y =
            target_ds.labels().ok_or_else(|| Error::Usage("target task lost its labels".into()))?;
        (
            ObjectiveKind::UnsupervisedTransfer,
            None,
            target_ds.inputs(),
            target_ds.inputs(),
            eval_y,
        )
    } else {
        target_split = split_labeled(&target_ds, &SplitSpec { per_class: per_class_target, seed })?;
        let labels = target_split
            .labeled
            .labels()
            .ok_or_else(|| Error::Usage("labeled split lost its labels".into()))?;
        (
            ObjectiveKind::Transfer,
            Some((target_split.labeled.inputs(), labels)),
            target_split.unlabeled.inputs(),
            target_split.unlabeled.inputs(),
            target_split.eval.for_evaluation_only(),
        )
    };

    let config = params.config(beta, seed)?;
    let total_steps = (config.epochs * config.steps_per_epoch) as u64;
    eprintln!(
        "transfer on {}: {:?} -> {:?}, K={} {} epochs x {} steps{}",
        data.dataset.name(),
        source_classes,
        target_classes,
        config.k,
        config.epochs,
        config.steps_per_epoch,
        if unsupervised { ", unsupervised" } else { "" }
    );
    let mut ensemble = ParticleEnsemble::new(&layers, params.activation, config)?;
    save_ensemble(&args.out.join("checkpoints").join("init"), &ensemble, 0)?;
    let train_data = TrainData {
        labeled,
        unlabeled,
        source: Some((source_ds.inputs(), source_labels)),
        eval: Some((eval_x, eval_y)),
    };
    let views = AugmentViews { kind: full.kind() };
    let records = train(&mut ensemble, kind, &train_data, &views)?;
    save_ensemble(&args.out.join("checkpoints").join("final"), &ensemble, total_steps)?;
    write_jsonl(&args.out.join("log.jsonl"), &records)?;
    let main = score(&ensemble, &records, eval_x, eval_y)?;

    // Baseline: supervised pretraining on the source task, then (with
    // target labels available) supervised fine-tuning on them.
    eprintln!("transfer baseline: source pretraining{}", if unsupervised { "" } else { " + fine-tuning" });
    let supervised = params.supervised_config(beta, seed)?;
    let mut baseline_ensemble = ParticleEnsemble::new(&layers, params.activation, supervised.clone())?;
    let pretrain_data = TrainData {
        labeled: Some((source_ds.inputs(), source_labels)),
        unlabeled: source_ds.inputs(),
        source: None,
        eval: Some((eval_x, eval_y)),
    };
    let pretrain_records = train(&mut baseline_ensemble, ObjectiveKind::Ssl, &pretrain_data, &views)?;
    write_jsonl(&args.out.join("baseline_pretrain_log.jsonl"), &pretrain_records)?;
    let mut baseline_records = pretrain_records;
    if let Some((labeled_x, labeled_y)) = labeled {
        baseline_ensemble = ParticleEnsemble::from_parts(
            baseline_ensemble.particles().to_vec(),
            baseline_ensemble.shadows().to_vec(),
            supervised,
        )?;
        let finetune_data = TrainData {
            labeled: Some((labeled_x, labeled_y)),
            unlabeled: target_ds.inputs(),
            source: None,
            eval: Some((eval_x, eval_y)),
        };
        baseline_records = train(&mut baseline_ensemble, ObjectiveKind::Ssl, &finetune_data, &views)?;
        write_jsonl(&args.out.join("baseline_finetune_log.jsonl"), &baseline_records)?;
    }
    let baseline = score(&baseline_ensemble, &baseline_records, eval_x, eval_y)?;

    if emit_svg {
        let mut plot = Plot::new("Target accuracy by epoch", "epoch", "accuracy");
        let curve = |rs: &[EpochRecord]| {
            rs.iter().map(|r| (r.epoch as f64, r.ensemble_accuracy)).collect::<Vec<_>>()
        };
        plot.add("transfer ensemble", PALETTE[0], SeriesKind::Line, curve(&records));
        plot.add("baseline", PALETTE[1], SeriesKind::Line, curve(&baseline_records));
        plot.write(&args.out.join("accuracy.svg"))?;
    }

    let metrics = TransferMetrics {
        dataset: data.dataset.name().to_string(),
        seed,
        source_classes,
        target_classes,
        unsupervised,
        beta,
        gamma: params.gamma,
        k: params.k,
        order: params.order,
        epochs: params.epochs,
        steps_per_epoch: params.steps,
        per_class_target: if unsupervised { None } else { Some(per_class_target) },
        source_count: source_ds.len(),
        target_count: target_ds.len(),
        accuracy_gain: main.run.ensemble_accuracy - baseline.run.ensemble_accuracy,
        clustering_gain: main.clustering_accuracy - baseline.clustering_accuracy,
        main,
        baseline,
    };
    write_json(&args.out.join("metrics.json"), &metrics)?;
    println!(
        "transfer done: accuracy {:.4}, clustering accuracy {:.4} (baseline {:.4})",
        metrics.main.run.ensemble_accuracy,
        metrics.main.clustering_accuracy,
        metrics.baseline.clustering_accuracy
    );
    Ok(0)
}

fn join_list(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn score(
    ensemble: &ParticleEnsemble,
    records: &[EpochRecord],
    eval_x: ArrayView2<'_, f64>,
    eval_y: &[usize],
) -> Result<TransferSide> {
    let run = RunMetrics::from_last_epoch(records)?;
    let probs_raw = ensemble_predict(ensemble, eval_x, false)?;
    let probs_ema = ensemble_predict(ensemble, eval_x, true)?;
    let c = ensemble.class_count();
    let (clustering_accuracy, best_permutation) =
        clustering_score(&argmax_rows(&probs_raw), eval_y, c)?;
    let (clustering_accuracy_ema, _) = clustering_score(&argmax_rows(&probs_ema), eval_y, c)?;
    Ok(TransferSide { run, clustering_accuracy, clustering_accuracy_ema, best_permutation })
}

/// Accuracy under the best relabeling of predicted classes, by exhaustive
/// search over the C! permutations.
fn clustering_score(pred: &[usize], truth: &[usize], c: usize) -> Result<(f64, Vec<usize>)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Usage("predictions and labels must pair one-to-one".into()));
    }
    if c > 8 {
        return Err(Error::Usage(format!("permutation search over {c} classes is too large")));
    }
    let mut counts = vec![vec![0usize; c]; c];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1;
    }
    let mut assignment = vec![usize::MAX; c];
    let mut used = vec![false; c];
    let mut best = (0usize, vec![0; c]);
    search(&counts, 0, 0, &mut assignment, &mut used, &mut best);
    Ok((best.0 as f64 / pred.len() as f64, best.1))
}

/// Row-wise argmax, lowest index on ties.
fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn search(
    counts: &[Vec<usize>],
    row: usize,
    hits: usize,
    assignment: &mut Vec<usize>,
    used: &mut Vec<bool>,
    best: &mut (usize, Vec<usize>),
) {
    let c = counts.len();
    if row == c {
        if hits > best.0 {
            *best = (hits, assignment.clone());
        }
        return;
    }
    for t in 0..c {
        if !used[t] {
            used[t] = true;
            assignment[row] = t;
            search(counts, row + 1, hits + counts[row][t], assignment, used, best);
            used[t] = false;
        }
    }
}
