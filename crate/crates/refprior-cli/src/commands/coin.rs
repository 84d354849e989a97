//! `coin`: the reference prior of n tosses of a coin with unknown bias.

use std::path::PathBuf;

use serde::Serialize;

use refprior::ba::{ba_solve, BaOptions, BaReport};
use refprior::info::jeffreys_prior;
use refprior::models::{binomial_channel, DiscreteChannel, ParameterGrid};
use refprior::{Error, Result};

use crate::artifacts::{fmt_f64, write_csv, write_json, write_resolved_config};
use crate::config::{flag, pick, require, ConfigMap};
use crate::svg::{Plot, SeriesKind, PALETTE};

#[derive(clap::Args)]
pub struct CoinArgs {
    /// Number of tosses n.
    #[arg(long)]
    trials: Option<usize>,
    /// Grid points over the bias parameter in [0, 1].
    #[arg(long)]
    grid_size: Option<usize>,
    /// Stop once one step gains less than this.
    #[arg(long)]
    tol: Option<f64>,
    /// First-order optimality slack required at the stop.
    #[arg(long)]
    gap_tol: Option<f64>,
    /// Iteration budget.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Atoms lighter than this are pruned.
    #[arg(long)]
    prune_eps: Option<f64>,
    /// Merge radius for neighboring atoms; default twice the grid spacing.
    #[arg(long)]
    merge_radius: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write prior.svg.
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
struct CoinSummary {
    trials: usize,
    grid_size: usize,
    mutual_information: f64,
    iterations: usize,
    converged: bool,
    atom_count: usize,
}

pub fn run(args: CoinArgs) -> Result<i32> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let trials = require(args.trials, cfg.take("trials")?, "trials")?;
    if trials < 1 {
        return Err(Error::Usage("at least one trial required".into()));
    }
    let grid_size = pick(args.grid_size, cfg.take("grid_size")?, 1001);
    let defaults = BaOptions::<f64>::default();
    let opts = BaOptions {
        tol: pick(args.tol, cfg.take("tol")?, defaults.tol),
        gap_tol: pick(args.gap_tol, cfg.take("gap_tol")?, defaults.gap_tol),
        max_iters: pick(args.max_iters, cfg.take("max_iters")?, defaults.max_iters),
        prune_eps: pick(args.prune_eps, cfg.take("prune_eps")?, defaults.prune_eps),
        merge_radius: args.merge_radius.or(cfg.take("merge_radius")?),
    };
    let emit_svg = flag(args.emit_svg, cfg.take("emit_svg")?);
    cfg.finish()?;

    std::fs::create_dir_all(&args.out)?;
    if args.dump_config {
        let mut entries = vec![
            ("trials", trials.to_string()),
            ("grid_size", grid_size.to_string()),
            ("tol", opts.tol.to_string()),
            ("gap_tol", opts.gap_tol.to_string()),
            ("max_iters", opts.max_iters.to_string()),
            ("prune_eps", opts.prune_eps.to_string()),
        ];
        if let Some(r) = opts.merge_radius {
            entries.push(("merge_radius", r.to_string()));
        }
        entries.push(("emit_svg", emit_svg.to_string()));
        write_resolved_config(&args.out, &entries)?;
    }

    let grid = ParameterGrid::uniform(0.0, 1.0, grid_size)?;
    let channel = binomial_channel(&grid, trials)?;
    let report = ba_solve(&channel, None, &opts)?;
    write_artifacts(&args.out, &channel, &report, emit_svg)?;

    let summary = CoinSummary {
        trials,
        grid_size,
        mutual_information: report.objective,
        iterations: report.iterations,
        converged: report.converged,
        atom_count: report.prior.len(),
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "coin n={trials}: MI {} nats, {} atoms, converged = {}",
        report.objective,
        report.prior.len(),
        report.converged
    );
    Ok(if report.converged { 0 } else { 3 })
}

fn write_artifacts(
    out: &std::path::Path,
    channel: &DiscreteChannel<f64>,
    report: &BaReport<f64>,
    emit_svg: bool,
) -> Result<()> {
    let grid = channel.grid();
    let atom_values = report.prior.atom_values(grid);

    let atom_rows: Vec<Vec<String>> = atom_values
        .iter()
        .zip(report.prior.masses())
        .map(|(&w, &mass)| vec![fmt_f64(w), fmt_f64(mass)])
        .collect();
    write_csv(&out.join("atoms.csv"), &["w", "mass"], &atom_rows)?;

    let kl_rows: Vec<Vec<String>> = grid
        .values()
        .iter()
        .zip(&report.profile)
        .map(|(&w, &kl)| vec![fmt_f64(w), fmt_f64(kl)])
        .collect();
    write_csv(&out.join("kl_profile.csv"), &["w", "kl"], &kl_rows)?;

    // Jeffreys masses over the grid, reported as a density against the grid
    // spacing so the curve is comparable across grid sizes.
    let jeffreys = jeffreys_prior(channel)?;
    let spacing = grid.mean_spacing();
    let jeffreys_rows: Vec<Vec<String>> = grid
        .values()
        .iter()
        .zip(jeffreys.masses())
        .map(|(&w, &mass)| vec![fmt_f64(w), fmt_f64(mass / spacing)])
        .collect();
    write_csv(&out.join("jeffreys.csv"), &["w", "density"], &jeffreys_rows)?;

    if emit_svg {
        let mut plot = Plot::new("Reference prior of a coin", "w", "mass / nats / density");
        plot.add(
            "atom mass",
            PALETTE[0],
            SeriesKind::Stems,
            atom_values.iter().zip(report.prior.masses()).map(|(&w, &m)| (w, m)).collect(),
        );
        plot.add(
            "KL profile (nats)",
            PALETTE[1],
            SeriesKind::Line,
            grid.values().iter().zip(&report.profile).map(|(&w, &kl)| (w, kl)).collect(),
        );
        plot.add(
            "Jeffreys density",
            PALETTE[2],
            SeriesKind::Line,
            grid.values()
                .iter()
                .zip(jeffreys.masses())
                .map(|(&w, &m)| (w, m / spacing))
                .collect(),
        );
        plot.write(&out.join("prior.svg"))?;
    }
    Ok(())
}
