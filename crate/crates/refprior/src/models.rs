//! Discretized one-parameter models.
//!
//! A model is a finite grid of parameter values `w` together with a
//! row-stochastic likelihood table `p(z | w)`: one row per grid point, one
//! column per outcome. The solvers in [`crate::ba`] operate on these tables
//! directly, so everything downstream inherits the grid resolution chosen
//! here.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Strictly increasing grid of candidate parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGrid<R: Real> {
    values: Vec<R>,
}

impl<R: Real> ParameterGrid<R> {
    /// Builds a grid from explicit values. Values must be finite and
    /// strictly increasing, and there must be at least two of them.
    pub fn new(values: Vec<R>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Usage(format!(
                "parameter grid needs at least 2 points, got {}",
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Domain(format!("grid value at index {i} is not finite")));
            }
        }
        for i in 1..values.len() {
            if values[i] <= values[i - 1] {
                return Err(Error::Domain(format!(
                    "grid values must be strictly increasing, violated at index {i}"
                )));
            }
        }
        Ok(Self { values })
    }

    /// Uniform grid of `count` points spanning `[lo, hi]` inclusive.
    pub fn uniform(lo: R, hi: R, count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::Usage(format!(
                "uniform grid needs at least 2 points, got {count}"
            )));
        }
        if !(lo < hi) {
            return Err(Error::Domain("uniform grid needs lo < hi".into()));
        }
        let n = R::of((count - 1) as f64);
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let t = R::of(i as f64) / n;
            values.push(lo + (hi - lo) * t);
        }
        // Guard against accumulated rounding at the right endpoint.
        *values.last_mut().expect("count >= 2") = hi;
        Self::new(values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn value(&self, index: usize) -> R {
        self.values[index]
    }

    /// Mean spacing between adjacent grid points.
    pub fn mean_spacing(&self) -> R {
        let span = *self.values.last().unwrap() - self.values[0];
        span / R::of((self.values.len() - 1) as f64)
    }

    /// Index of the grid point closest to `w` (ties resolve to the lower index).
    pub fn nearest_index(&self, w: R) -> usize {
        let mut best = 0;
        let mut best_dist = (self.values[0] - w).abs();
        for (i, v) in self.values.iter().enumerate().skip(1) {
            let d = (*v - w).abs();
            if d < best_dist {
                best = i;
                best_dist = d;
            }
        }
        best
    }
}

/// Row-stochastic likelihood table over a parameter grid.
///
/// Row `i` is the outcome distribution `p(· | w_i)`. Rows are validated to
/// sum to one at construction and the table is immutable afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteChannel<R: Real> {
    grid: ParameterGrid<R>,
    outcome_count: usize,
    rows: Vec<R>,
    row_entropies: Vec<R>,
}

impl<R: Real> DiscreteChannel<R> {
    /// Builds a channel from `grid.len() * outcome_count` likelihood entries
    /// in row-major order.
    pub fn new(grid: ParameterGrid<R>, outcome_count: usize, rows: Vec<R>) -> Result<Self> {
        if outcome_count == 0 {
            return Err(Error::Usage("channel needs at least one outcome".into()));
        }
        if rows.len() != grid.len() * outcome_count {
            return Err(Error::Usage(format!(
                "expected {} likelihood entries, got {}",
                grid.len() * outcome_count,
                rows.len()
            )));
        }
        let tol = R::validation_tol();
        for (i, row) in rows.chunks(outcome_count).enumerate() {
            let mut sum = R::zero();
            for &p in row {
                if !p.is_finite() || p < R::zero() {
                    return Err(Error::Domain(format!(
                        "likelihood row {i} contains a negative or non-finite entry"
                    )));
                }
                sum += p;
            }
            if (sum - R::one()).abs() > tol {
                return Err(Error::Domain(format!(
                    "likelihood row {i} sums to {sum}, expected 1"
                )));
            }
        }
        let row_entropies = rows
            .chunks(outcome_count)
            .map(|row| {
                let mut h = R::zero();
                for &p in row {
                    if p > R::zero() {
                        h -= p * p.ln();
                    }
                }
                h
            })
            .collect();
        Ok(Self { grid, outcome_count, rows, row_entropies })
    }

    pub fn grid(&self) -> &ParameterGrid<R> {
        &self.grid
    }

    pub fn outcome_count(&self) -> usize {
        self.outcome_count
    }

    /// Likelihood row for grid point `i`.
    pub fn row(&self, i: usize) -> &[R] {
        &self.rows[i * self.outcome_count..(i + 1) * self.outcome_count]
    }

    pub fn likelihood(&self, i: usize, z: usize) -> R {
        self.rows[i * self.outcome_count + z]
    }

    /// Shannon entropy of row `i` in nats, precomputed at construction.
    pub fn row_entropy(&self, i: usize) -> R {
        self.row_entropies[i]
    }
}

/// Natural logarithms of factorials `0! ..= n!`.
fn ln_factorials(n: usize) -> Vec<f64> {
    let mut table = Vec::with_capacity(n + 1);
    table.push(0.0);
    for k in 1..=n {
        table.push(table[k - 1] + (k as f64).ln());
    }
    table
}

/// Binomial likelihood channel: `z` successes out of `trials` at rate `w`.
///
/// Grid values must lie in `[0, 1]`. Probabilities are accumulated in log
/// space so the binomial coefficients stay representable for a couple of
/// hundred trials, and each row is renormalized by its own sum to keep the
/// row-stochastic invariant tight.
pub fn binomial_channel<R: Real>(grid: &ParameterGrid<R>, trials: usize) -> Result<DiscreteChannel<R>> {
    for (i, &w) in grid.values().iter().enumerate() {
        if w < R::zero() || w > R::one() {
            return Err(Error::Domain(format!(
                "binomial success rate at grid index {i} is outside [0, 1]"
            )));
        }
    }
    let outcomes = trials + 1;
    let ln_fact = ln_factorials(trials);
    let mut rows = Vec::with_capacity(grid.len() * outcomes);
    for &w in grid.values() {
        let wf = w.to_f64().expect("grid value fits in f64");
        if wf == 0.0 {
            rows.push(R::one());
            rows.extend(std::iter::repeat(R::zero()).take(trials));
        } else if wf == 1.0 {
            rows.extend(std::iter::repeat(R::zero()).take(trials));
            rows.push(R::one());
        } else {
            let ln_w = wf.ln();
            let ln_1mw = (1.0 - wf).ln();
            let start = rows.len();
            let mut sum = R::zero();
            for z in 0..outcomes {
                let ln_p = ln_fact[trials] - ln_fact[z] - ln_fact[trials - z]
                    + (z as f64) * ln_w
                    + ((trials - z) as f64) * ln_1mw;
                let p = R::of(ln_p.exp());
                sum += p;
                rows.push(p);
            }
            for p in &mut rows[start..] {
                *p /= sum;
            }
        }
    }
    DiscreteChannel::new(grid.clone(), outcomes, rows)
}

/// Pair of binomial channels sharing one grid: `m` trials and `m + n` trials.
///
/// `m = 0` yields a single-outcome channel that carries no information, which
/// is exactly what the two-stage objective needs as its base case.
pub fn two_stage_binomial_channels<R: Real>(
    grid: &ParameterGrid<R>,
    m: usize,
    n: usize,
) -> Result<(DiscreteChannel<R>, DiscreteChannel<R>)> {
    if n == 0 {
        return Err(Error::Usage("second-stage trial count must be positive".into()));
    }
    let first = binomial_channel(grid, m)?;
    let second = binomial_channel(grid, m + n)?;
    Ok((first, second))
}

/// Binary symmetric channel with the given crossover probability.
///
/// The grid must contain exactly the two input symbols.
pub fn binary_channel<R: Real>(grid: &ParameterGrid<R>, crossover: R) -> Result<DiscreteChannel<R>> {
    if grid.len() != 2 {
        return Err(Error::Usage(format!(
            "binary channel needs a 2-point grid, got {} points",
            grid.len()
        )));
    }
    if crossover < R::zero() || crossover > R::one() {
        return Err(Error::Domain("crossover probability must lie in [0, 1]".into()));
    }
    let p = crossover;
    let q = R::one() - p;
    DiscreteChannel::new(grid.clone(), 2, vec![q, p, p, q])
}
