//! `bsc`: solver validation against the analytic capacity of the binary
//! symmetric channel, `ln 2 + p ln p + (1−p) ln(1−p)` nats.

use std::path::PathBuf;

use serde::Serialize;

use refprior::ba::{ba_solve, BaOptions};
use refprior::models::{binary_channel, ParameterGrid};
use refprior::{Error, Result};

use crate::artifacts::{write_json, write_resolved_config};
use crate::config::{pick, require, ConfigMap};

#[derive(clap::Args)]
pub struct BscArgs {
    /// Crossover probability in [0, 1].
    #[arg(long)]
    crossover: Option<f64>,
    /// Stop once one step gains less than this.
    #[arg(long)]
    tol: Option<f64>,
    /// First-order optimality slack required at the stop.
    #[arg(long)]
    gap_tol: Option<f64>,
    /// Iteration budget.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Optional output directory for summary.json.
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
struct BscSummary {
    crossover: f64,
    mutual_information: f64,
    analytic_capacity: f64,
    abs_error: f64,
    iterations: usize,
    converged: bool,
    input_masses: Vec<f64>,
}

pub fn run(args: BscArgs) -> Result<i32> {
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    let crossover = require(args.crossover, cfg.take("crossover")?, "crossover")?;
    let defaults = BaOptions::<f64>::default();
    let opts = BaOptions {
        tol: pick(args.tol, cfg.take("tol")?, defaults.tol),
        gap_tol: pick(args.gap_tol, cfg.take("gap_tol")?, defaults.gap_tol),
        max_iters: pick(args.max_iters, cfg.take("max_iters")?, defaults.max_iters),
        prune_eps: defaults.prune_eps,
        // The two grid points are distinct channel inputs, never a
        // discretized continuum: merging them would be meaningless.
        merge_radius: Some(0.0),
    };
    cfg.finish()?;

    let grid = ParameterGrid::new(vec![0.0, 1.0])?;
    let channel = binary_channel(&grid, crossover)?;
    let report = ba_solve(&channel, None, &opts)?;

    let analytic = ln2_capacity(crossover);
    let mut masses = vec![0.0; grid.len()];
    for (&idx, &mass) in report.prior.atom_indices().iter().zip(report.prior.masses()) {
        masses[idx] = mass;
    }
    let summary = BscSummary {
        crossover,
        mutual_information: report.objective,
        analytic_capacity: analytic,
        abs_error: (report.objective - analytic).abs(),
        iterations: report.iterations,
        converged: report.converged,
        input_masses: masses,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        if args.dump_config {
            let entries = vec![
                ("crossover", crossover.to_string()),
                ("tol", opts.tol.to_string()),
                ("gap_tol", opts.gap_tol.to_string()),
                ("max_iters", opts.max_iters.to_string()),
            ];
            write_resolved_config(out, &entries)?;
        }
        write_json(&out.join("summary.json"), &summary)?;
    } else if args.dump_config {
        return Err(Error::Usage("--dump-config needs --out".into()));
    }
    Ok(if report.converged { 0 } else { 3 })
}

/// Capacity of the binary symmetric channel in nats; `0·ln 0 = 0`.
fn ln2_capacity(p: f64) -> f64 {
    let xlnx = |x: f64| if x == 0.0 { 0.0 } else { x * x.ln() };
    std::f64::consts::LN_2 + xlnx(p) + xlnx(1.0 - p)
}
