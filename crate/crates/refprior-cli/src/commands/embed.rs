//! `embed`: low-dimensional coordinates for ensemble particles, placed by
//! the square-root-probability geometry of their predictions.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use refprior::embed::{pca_embed, prediction_vectors, row_distance_sq};
use refprior::nn::MlpNetwork;
use refprior::particles::{load_ensemble, TrainConfig};
use refprior::{Error, Result};

use crate::artifacts::{fmt_f64, write_csv, write_json, write_resolved_config};
use crate::config::{flag, pick, ConfigMap};
use crate::svg::{Plot, SeriesKind, PALETTE};

use super::dataset::{DataArgs, DataParams, DatasetArg};

#[derive(clap::Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint manifest (or its directory); repeat for multiple stages.
    #[arg(long)]
    checkpoint_manifest: Vec<PathBuf>,
    /// Evaluation inputs drawn from the dataset.
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Embedding dimension.
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write embedding.svg.
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
struct StageSummary {
    path: String,
    k: usize,
    step_count: u64,
    /// Largest embedded distance between two particles of this stage.
    max_pairwise_distance: f64,
}

#[derive(Serialize)]
struct EmbedSummary {
    dataset: String,
    seed: u64,
    eval_samples: usize,
    dims: usize,
    stages: Vec<StageSummary>,
    explained_variance: Vec<f64>,
    total_variance: f64,
    /// Spread of the last stage over the first, when both are defined.
    spread_ratio: Option<f64>,
}

struct Stage {
    dir: PathBuf,
    networks: Vec<MlpNetwork>,
    step_count: u64,
}

pub fn run(args: EmbedArgs) -> Result<i32> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let data = DataParams::resolve(args.data, &mut cfg, DatasetArg::TwoMoons)?;
    let mut manifests = args.checkpoint_manifest;
    if manifests.is_empty() {
        if let Some(raw) = cfg.take::<String>("checkpoint_manifest")? {
            manifests = raw.split(',').map(|p| PathBuf::from(p.trim())).collect();
        }
    }
    let eval_samples = pick(args.eval_samples, cfg.take("eval_samples")?, 256);
    let dims_arg: Option<usize> = match args.dims {
        Some(d) => Some(d),
        None => cfg.take("dims")?,
    };
    let seed = pick(args.seed, cfg.take("seed")?, 0);
    let emit_svg = flag(args.emit_svg, cfg.take("emit_svg")?);
    cfg.finish()?;

    if manifests.is_empty() {
        return Err(Error::Usage("at least one --checkpoint-manifest is required".into()));
    }
    // Every referenced checkpoint must resolve before any computation.
    let dirs = manifests.iter().map(|p| stage_dir(p)).collect::<Result<Vec<_>>>()?;

    std::fs::create_dir_all(&args.out)?;
    if args.dump_config {
        let mut entries = Vec::new();
        data.dump(&mut entries);
        let joined =
            dirs.iter().map(|d| d.display().to_string()).collect::<Vec<_>>().join(",");
        entries.push(("checkpoint_manifest", joined));
        entries.push(("eval_samples", eval_samples.to_string()));
        if let Some(d) = dims_arg {
            entries.push(("dims", d.to_string()));
        }
        entries.push(("seed", seed.to_string()));
        entries.push(("emit_svg", emit_svg.to_string()));
        write_resolved_config(&args.out, &entries)?;
    }

    let mut stages = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let k = manifest_k(&dir)?;
        let (ensemble, step_count) = load_ensemble(&dir, TrainConfig::new(k))?;
        stages.push(Stage { dir, networks: ensemble.particles().to_vec(), step_count });
    }

    let dataset = data.build(seed)?;
    let width = stages[0].networks[0].input_dim();
    for stage in &stages {
        if stage.networks[0].input_dim() != width {
            return Err(Error::Usage("checkpoint stages disagree on input width".into()));
        }
    }
    if width != dataset.kind().feature_count() {
        return Err(Error::Usage(format!(
            "checkpoints expect {width}-dimensional inputs but {} provides {}",
            data.dataset.name(),
            dataset.kind().feature_count()
        )));
    }
    let eval_samples = eval_samples.min(dataset.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, dataset.len(), eval_samples).into_vec();
    picked.sort_unstable();
    let inputs = dataset.inputs().select(ndarray::Axis(0), &picked);

    let pooled: Vec<MlpNetwork> =
        stages.iter().flat_map(|s| s.networks.iter().cloned()).collect();
    let prediction = prediction_vectors(&pooled, inputs.view())?;
    let limit = (pooled.len() - 1).min(prediction.matrix().ncols());
    let dims = dims_arg.unwrap_or_else(|| limit.min(3));
    let embedding = pca_embed(prediction.matrix(), dims)?;

    let mut stage_summaries = Vec::with_capacity(stages.len());
    let mut offset = 0;
    for (s, stage) in stages.iter().enumerate() {
        let k = stage.networks.len();
        let mut rows = Vec::with_capacity(k);
        for p in 0..k {
            let mut row = vec![p.to_string()];
            row.extend(
                embedding.coordinates.row(offset + p).iter().map(|&v| fmt_f64(v)),
            );
            rows.push(row);
        }
        let mut header = vec!["particle".to_string()];
        header.extend((0..dims).map(|d| format!("c{d}")));
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&args.out.join(format!("embedding_{s:02}.csv")), &header_refs, &rows)?;

        let mut max_dist_sq = 0.0f64;
        for i in 0..k {
            for j in (i + 1)..k {
                let d = row_distance_sq(
                    embedding.coordinates.view(),
                    offset + i,
                    offset + j,
                );
                max_dist_sq = max_dist_sq.max(d);
            }
        }
        stage_summaries.push(StageSummary {
            path: stage.dir.display().to_string(),
            k,
            step_count: stage.step_count,
            max_pairwise_distance: max_dist_sq.sqrt(),
        });
        offset += k;
    }

    let first = stage_summaries.first().map(|s| s.max_pairwise_distance).unwrap_or(0.0);
    let last = stage_summaries.last().map(|s| s.max_pairwise_distance).unwrap_or(0.0);
    let spread_ratio =
        if stage_summaries.len() >= 2 && first > 0.0 { Some(last / first) } else { None };

    if emit_svg {
        let mut plot = Plot::new("Particle embedding", "c0", "c1");
        let mut offset = 0;
        for (s, stage) in stages.iter().enumerate() {
            let points: Vec<(f64, f64)> = (0..stage.networks.len())
                .map(|p| {
                    let row = embedding.coordinates.row(offset + p);
                    (row[0], if dims > 1 { row[1] } else { 0.0 })
                })
                .collect();
            plot.add(
                &format!("stage {s} (step {})", stage.step_count),
                PALETTE[s % PALETTE.len()],
                SeriesKind::Scatter,
                points,
            );
            offset += stage.networks.len();
        }
        plot.write(&args.out.join("embedding.svg"))?;
    }

    let summary = EmbedSummary {
        dataset: data.dataset.name().to_string(),
        seed,
        eval_samples,
        dims,
        stages: stage_summaries,
        explained_variance: embedding.explained_variance.clone(),
        total_variance: embedding.total_variance,
        spread_ratio,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    for stage in &summary.stages {
        println!(
            "stage at step {}: K={}, max pairwise distance {:.6}",
            stage.step_count, stage.k, stage.max_pairwise_distance
        );
    }
    match spread_ratio {
        Some(r) => println!("spread ratio (last/first stage): {r:.4}"),
        None => println!("spread ratio: undefined for a single stage"),
    }
    Ok(0)
}

/// Resolves a `--checkpoint-manifest` value to its checkpoint directory,
/// accepting either the manifest file or the directory holding it.
fn stage_dir(path: &Path) -> Result<PathBuf> {
    let dir = if path.is_dir() { path.to_path_buf() } else { manifest_parent(path)? };
    let manifest = dir.join("manifest.json");
    if !manifest.is_file() {
        return Err(Error::Usage(format!("no manifest.json at {}", manifest.display())));
    }
    Ok(dir)
}

fn manifest_parent(path: &Path) -> Result<PathBuf> {
    if path.file_name().map_or(false, |n| n == "manifest.json") && path.is_file() {
        Ok(path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf())
    } else {
        Err(Error::Usage(format!(
            "{} is neither a checkpoint directory nor a manifest.json",
            path.display()
        )))
    }
}

/// The particle count, read ahead of the full load so the loader can be
/// handed a matching configuration.
fn manifest_k(dir: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    value
        .get("k")
        .and_then(serde_json::Value::as_u64)
        .map(|k| k as usize)
        .ok_or_else(|| Error::Serialization("manifest.json lacks a particle count".into()))
}
