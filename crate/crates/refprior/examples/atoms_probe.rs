use refprior::ba::{ba_solve, BaOptions};
use refprior::models::{binomial_channel, ParameterGrid};

fn main() {
    let grid: ParameterGrid<f64> = ParameterGrid::uniform(0.0, 1.0, 1001).unwrap();
    for n in [1usize, 5, 10, 50] {
        let channel = binomial_channel(&grid, n).unwrap();
        let report = ba_solve(&channel, None, &BaOptions::default()).unwrap();
        let values = report.prior.atom_values(&grid);
        println!("n={n} converged={} atoms={}", report.converged, values.len());
        let pairs: Vec<String> = values.iter().zip(report.prior.masses())
            .map(|(w, m)| format!("({w:.3}, {m:.4})")).collect();
        println!("  {}", pairs.join(" "));
    }
}
