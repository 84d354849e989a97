//! Prior solvers over discretized models.
//!
//! The optimal prior for a finite-outcome channel is discrete with at most as
//! many atoms as the channel has outcomes, so priors are represented sparsely
//! as weighted atoms on grid indices. `ba_solve` runs the classic
//! multiplicative fixed-point iteration
//!
//! ```text
//! pi'(w)  ∝  pi(w) · exp( KL(p(z|w) || p_pi(z)) )
//! ```
//!
//! whose fixed points equalize the per-atom divergence with the mutual
//! information (the capacity conditions). `two_stage_solve` maximizes the
//! difference of two such information terms by mirror ascent with the same
//! multiplicative geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::info::{kl_of_masses, marginal_masses, mutual_information};
use crate::models::DiscreteChannel;
use crate::scalar::Real;

/// Discrete prior: positive masses on strictly increasing grid indices.
///
/// Atoms with zero mass are never stored; pruning removes them instead.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomPrior<R: Real> {
    atom_indices: Vec<usize>,
    masses: Vec<R>,
}

impl<R: Real> AtomPrior<R> {
    pub fn new(atom_indices: Vec<usize>, masses: Vec<R>) -> Result<Self> {
        if atom_indices.len() != masses.len() {
            return Err(Error::Usage(format!(
                "{} atom indices but {} masses",
                atom_indices.len(),
                masses.len()
            )));
        }
        if atom_indices.is_empty() {
            return Err(Error::Usage("prior needs at least one atom".into()));
        }
        for i in 1..atom_indices.len() {
            if atom_indices[i] <= atom_indices[i - 1] {
                return Err(Error::Usage(
                    "atom indices must be strictly increasing".into(),
                ));
            }
        }
        let mut sum = R::zero();
        for (&idx, &m) in atom_indices.iter().zip(&masses) {
            if !m.is_finite() || m <= R::zero() {
                return Err(Error::Domain(format!(
                    "atom at grid index {idx} has non-positive mass"
                )));
            }
            sum += m;
        }
        if (sum - R::one()).abs() > R::validation_tol() {
            return Err(Error::Domain(format!("atom masses sum to {sum}, expected 1")));
        }
        Ok(Self { atom_indices, masses })
    }

    /// Uniform prior over every point of a grid with `grid_len` entries.
    pub fn uniform(grid_len: usize) -> Result<Self> {
        if grid_len == 0 {
            return Err(Error::Usage("cannot build a prior over an empty grid".into()));
        }
        let mass = R::one() / R::of(grid_len as f64);
        Self::new((0..grid_len).collect(), vec![mass; grid_len])
    }

    pub fn atom_indices(&self) -> &[usize] {
        &self.atom_indices
    }

    pub fn masses(&self) -> &[R] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.atom_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atom_indices.is_empty()
    }

    /// Parameter values of the atoms under `grid`.
    pub fn atom_values(&self, grid: &crate::models::ParameterGrid<R>) -> Vec<R> {
        self.atom_indices.iter().map(|&i| grid.value(i)).collect()
    }
}

/// Options for [`ba_solve`].
#[derive(Debug, Clone)]
pub struct BaOptions<R: Real> {
    /// Stop once the objective gain of one step drops below this.
    pub tol: R,
    /// First-order optimality slack that must also hold to declare
    /// convergence: no grid point's divergence may exceed the objective by
    /// more than this. Guards against stopping on a flat stretch of the
    /// objective while mass is still migrating.
    pub gap_tol: R,
    /// Iteration budget; exhausting it yields `converged = false`.
    pub max_iters: usize,
    /// Atoms lighter than this are pruned after the iteration.
    pub prune_eps: R,
    /// Atoms closer than this merge into their mass-weighted centroid.
    /// `None` means twice the mean grid spacing, which suits fine grids over
    /// a continuum; pass `Some(0)` on coarse grids whose points are genuinely
    /// distinct hypotheses.
    pub merge_radius: Option<R>,
}

impl<R: Real> Default for BaOptions<R> {
    fn default() -> Self {
        Self {
            tol: R::of(1e-9),
            gap_tol: R::of(1e-5),
            max_iters: 200_000,
            prune_eps: R::of(1e-8),
            merge_radius: None,
        }
    }
}

/// Outcome of a prior solve.
#[derive(Debug, Clone)]
pub struct BaReport<R: Real> {
    /// Final prior after pruning and merging.
    pub prior: AtomPrior<R>,
    /// Objective of the final prior: mutual information for single-stage
    /// solves, the information difference for two-stage solves.
    pub objective: R,
    /// Objective value at each accepted iterate, non-decreasing.
    pub history: Vec<R>,
    /// Number of multiplicative updates applied.
    pub iterations: usize,
    /// Whether the tolerance was met within the iteration budget.
    pub converged: bool,
    /// Per-grid-point divergence profile under the final prior. For
    /// single-stage solves this is `KL(p(z|w) || p(z))`; for two-stage solves
    /// it is the difference of the two stage profiles.
    pub profile: Vec<R>,
}

/// Working state shared by the iterative solvers.
///
/// Masses are kept in log domain so a multiplicative update can never
/// underflow a point to an unrecoverable zero: atoms crushed early in the
/// iteration must be able to regrow when the landscape shifts under them.
/// `masses` is the normalized linear view, refreshed after every update.
struct Support<R> {
    indices: Vec<usize>,
    ln_masses: Vec<R>,
    masses: Vec<R>,
}

impl<R: Real> Support<R> {
    fn from_prior(prior: &AtomPrior<R>) -> Self {
        let ln_masses = prior.masses.iter().map(|m| m.ln()).collect();
        Self {
            indices: prior.atom_indices.clone(),
            ln_masses,
            masses: prior.masses.clone(),
        }
    }

    /// Rebuilds the normalized linear masses from the log masses.
    ///
    /// Log masses are re-centered on their maximum and the deficit is
    /// clamped at -50 nats. Points that far down carry ~1e-22 relative mass
    /// and are invisible to every tolerance in this crate, but the clamp
    /// bounds how long a crushed point needs to climb back once the
    /// landscape turns in its favor.
    fn refresh(&mut self) {
        let max = self
            .ln_masses
            .iter()
            .copied()
            .fold(R::neg_infinity(), R::max);
        let floor = -R::of(50.0);
        let mut sum = R::zero();
        self.masses.clear();
        for lm in &mut self.ln_masses {
            *lm = (*lm - max).max(floor);
            let m = lm.exp();
            sum += m;
            self.masses.push(m);
        }
        for m in &mut self.masses {
            *m /= sum;
        }
    }

    fn marginal(&self, channel: &DiscreteChannel<R>) -> Vec<R> {
        let c = channel.outcome_count();
        let mut out = vec![R::zero(); c];
        for (&idx, &mass) in self.indices.iter().zip(&self.masses) {
            for (o, &p) in out.iter_mut().zip(channel.row(idx)) {
                *o += mass * p;
            }
        }
        out
    }

    /// Per-atom `KL(row || marginal)` via the entropy decomposition
    /// `-H(row) - sum_z p(z|w) ln marginal(z)`, which needs only one
    /// logarithm per outcome instead of one per table entry.
    fn divergences(&self, channel: &DiscreteChannel<R>, marginal: &[R]) -> Vec<R> {
        if marginal.iter().any(|&m| m <= R::zero()) {
            // Zero marginal entries need the sentinel-aware slow path.
            return self
                .indices
                .iter()
                .map(|&idx| kl_of_masses(channel.row(idx), marginal))
                .collect();
        }
        let ln_marginal: Vec<R> = marginal.iter().map(|&m| m.ln()).collect();
        self.indices
            .iter()
            .map(|&idx| {
                let mut cross = R::zero();
                for (&p, &lm) in channel.row(idx).iter().zip(&ln_marginal) {
                    cross += p * lm;
                }
                -channel.row_entropy(idx) - cross
            })
            .collect()
    }

    /// Multiplicative update `m_i <- m_i exp(eta * g_i)`, additive in log
    /// domain, followed by renormalization.
    fn multiplicative_step(&mut self, gains: &[R], eta: R) {
        for (lm, &g) in self.ln_masses.iter_mut().zip(gains) {
            *lm += eta * g;
        }
        self.refresh();
    }

    /// Collapses everything onto the infinite-gain atoms. This is the limit
    /// of the multiplicative update when the marginal underflows to zero on
    /// an outcome some atom still supports.
    fn collapse_onto(&mut self, infinite: &[bool]) {
        let count = infinite.iter().filter(|&&b| b).count();
        let mass = R::one() / R::of(count as f64);
        let mut indices = Vec::with_capacity(count);
        for (k, &inf) in infinite.iter().enumerate() {
            if inf {
                indices.push(self.indices[k]);
            }
        }
        self.indices = indices;
        self.ln_masses = vec![mass.ln(); count];
        self.masses = vec![mass; count];
    }

    fn prune(&mut self, eps: R) {
        if self.masses.iter().all(|&m| m < eps) {
            // Never prune everything; keep the heaviest atom as a floor.
            let (best, _) = self
                .masses
                .iter()
                .enumerate()
                .fold((0, R::neg_infinity()), |acc, (i, &m)| if m > acc.1 { (i, m) } else { acc });
            self.indices = vec![self.indices[best]];
            self.ln_masses = vec![R::zero()];
            self.masses = vec![R::one()];
            return;
        }
        if self.masses.iter().any(|&m| m < eps) {
            let mut indices = Vec::new();
            let mut ln_masses = Vec::new();
            let mut masses = Vec::new();
            for (k, &m) in self.masses.iter().enumerate() {
                if m >= eps {
                    indices.push(self.indices[k]);
                    ln_masses.push(self.ln_masses[k]);
                    masses.push(m);
                }
            }
            self.indices = indices;
            self.ln_masses = ln_masses;
            self.masses = masses;
            let sum: R = self.masses.iter().copied().sum();
            for m in &mut self.masses {
                *m /= sum;
            }
        }
    }

    /// Greedy left-to-right chain merge: consecutive atoms whose parameter
    /// gap is at most `radius` join one cluster, and each cluster collapses
    /// to its mass-weighted centroid snapped to the nearest grid point.
    /// Merges each mass bump into a single atom at its mass-weighted
    /// centroid, snapped to the nearest grid point.
    ///
    /// A stopped iterate represents every atom as a bump: a local mass
    /// maximum plus tails that decay only geometrically per iteration, so
    /// neighboring bumps stay bridged by light but nonzero mass for a long
    /// time. Clusters are therefore delimited by the mass valleys between
    /// local maxima, never by gap-chaining alone, which would fuse distinct
    /// atoms through their tails. `radius` controls how close two local
    /// maxima must be to count as one atom. Valley points equidistant from
    /// both flanking maxima are dropped outright; renormalization absorbs
    /// their dust.
    fn merge(&mut self, grid: &crate::models::ParameterGrid<R>, radius: R) {
        let s = self.indices.len();
        if radius <= R::zero() || s < 2 {
            return;
        }
        let w = |k: usize| grid.value(self.indices[k]);
        let max_mass = self.masses.iter().cloned().fold(R::zero(), R::max);
        let floor = max_mass * R::of(1e-18);
        let mut peaks: Vec<usize> = Vec::new();
        for k in 0..s {
            let up_left = k == 0 || self.masses[k] >= self.masses[k - 1];
            let up_right = k == s - 1 || self.masses[k] >= self.masses[k + 1];
            if up_left && up_right && self.masses[k] > floor {
                peaks.push(k);
            }
        }
        // Maxima within `radius` of each other act as one atom core.
        let mut groups: Vec<(usize, usize)> = Vec::new();
        for &p in &peaks {
            match groups.last_mut() {
                Some((_, last)) if w(p) - w(*last) <= radius => *last = p,
                _ => groups.push((p, p)),
            }
        }
        // Every support point joins a core, or is dropped as tie dust.
        const DUST: usize = usize::MAX;
        let mut cluster_of = vec![DUST; s];
        for (g, &(a, b)) in groups.iter().enumerate() {
            for slot in &mut cluster_of[a..=b] {
                *slot = g;
            }
        }
        for slot in &mut cluster_of[..groups[0].0] {
            *slot = 0;
        }
        for slot in &mut cluster_of[groups[groups.len() - 1].1..] {
            *slot = groups.len() - 1;
        }
        for g in 0..groups.len().saturating_sub(1) {
            let pe = groups[g].1;
            let ps = groups[g + 1].0;
            if ps <= pe + 1 {
                continue;
            }
            let vmin = (pe + 1..ps)
                .map(|k| self.masses[k])
                .fold(R::infinity(), R::min);
            let qlo = (pe + 1..ps).find(|&k| self.masses[k] == vmin).unwrap();
            let qhi = (pe + 1..ps).rev().find(|&k| self.masses[k] == vmin).unwrap();
            for k in pe + 1..ps {
                if k < qlo {
                    cluster_of[k] = g;
                } else if k > qhi {
                    cluster_of[k] = g + 1;
                } else {
                    let dl = w(k) - w(pe);
                    let dr = w(ps) - w(k);
                    cluster_of[k] = if dl < dr {
                        g
                    } else if dl > dr {
                        g + 1
                    } else {
                        DUST
                    };
                }
            }
        }
        let mut new_indices: Vec<usize> = Vec::new();
        let mut new_masses: Vec<R> = Vec::new();
        for g in 0..groups.len() {
            let mut mass = R::zero();
            let mut centroid = R::zero();
            for k in 0..s {
                if cluster_of[k] == g {
                    mass += self.masses[k];
                    centroid += self.masses[k] * w(k);
                }
            }
            centroid = centroid / mass;
            let snapped = grid.nearest_index(centroid);
            if let Some(&last) = new_indices.last() {
                if last == snapped {
                    *new_masses.last_mut().unwrap() += mass;
                    continue;
                }
            }
            new_indices.push(snapped);
            new_masses.push(mass);
        }
        let sum: R = new_masses.iter().copied().sum();
        for m in &mut new_masses {
            *m /= sum;
        }
        self.ln_masses = new_masses.iter().map(|m| m.ln()).collect();
        self.indices = new_indices;
        self.masses = new_masses;
    }

    fn into_prior(self) -> Result<AtomPrior<R>> {
        AtomPrior::new(self.indices, self.masses)
    }
}

/// One multiplicative update of the prior.
pub fn ba_step<R: Real>(
    prior: &AtomPrior<R>,
    channel: &DiscreteChannel<R>,
) -> Result<AtomPrior<R>> {
    check_support(prior, channel)?;
    let mut support = Support::from_prior(prior);
    let marginal = support.marginal(channel);
    let gains = support.divergences(channel, &marginal);
    if gains.iter().any(|g| g.is_infinite()) {
        let infinite: Vec<bool> = gains.iter().map(|g| g.is_infinite()).collect();
        support.collapse_onto(&infinite);
    } else {
        support.multiplicative_step(&gains, R::one());
        // A single step can underflow the linear view of an atom whose gain
        // trails the leader by hundreds of nats; such atoms are dead weight
        // in the returned prior.
        support.prune(R::min_positive_value());
    }
    support.into_prior()
}

fn check_support<R: Real>(prior: &AtomPrior<R>, channel: &DiscreteChannel<R>) -> Result<()> {
    let g = channel.grid().len();
    match prior.atom_indices().last() {
        Some(&max) if max >= g => Err(Error::Usage(format!(
            "atom index {max} is outside the channel grid of {g} points"
        ))),
        _ => Ok(()),
    }
}

/// Runs the fixed-point iteration to convergence, then prunes and merges.
///
/// Starts from `init` when given, otherwise from the uniform prior over the
/// full grid. Never fails on slow convergence: exhausting `max_iters` is
/// reported through the `converged` flag.
pub fn ba_solve<R: Real>(
    channel: &DiscreteChannel<R>,
    init: Option<&AtomPrior<R>>,
    opts: &BaOptions<R>,
) -> Result<BaReport<R>> {
    let mut support = match init {
        Some(prior) => {
            check_support(prior, channel)?;
            Support::from_prior(prior)
        }
        None => Support::from_prior(&AtomPrior::uniform(channel.grid().len())?),
    };

    let mut history: Vec<R> = Vec::new();
    let mut iterations = 0usize;
    let mut converged = false;
    loop {
        let marginal = support.marginal(channel);
        let gains = support.divergences(channel, &marginal);
        if gains.iter().any(|g| g.is_infinite()) {
            // Rescue path: the marginal underflowed on a supported outcome.
            // Jump straight to the limiting update without recording the
            // transient as an iterate.
            let infinite: Vec<bool> = gains.iter().map(|g| g.is_infinite()).collect();
            support.collapse_onto(&infinite);
            iterations += 1;
            if iterations >= opts.max_iters {
                break;
            }
            continue;
        }
        let mi: R = support
            .masses
            .iter()
            .zip(&gains)
            .map(|(&m, &g)| m * g)
            .sum();
        // Converged only when the objective is flat *and* no point's
        // divergence exceeds it beyond the slack. The flatness test alone
        // fires on plateaus where underweighted points are still climbing.
        if let Some(&prev) = history.last() {
            let max_gain = gains.iter().cloned().fold(R::neg_infinity(), R::max);
            if (mi - prev).abs() < opts.tol && max_gain - mi <= opts.gap_tol {
                history.push(mi);
                converged = true;
                break;
            }
        }
        history.push(mi);
        if iterations >= opts.max_iters {
            break;
        }
        support.multiplicative_step(&gains, R::one());
        iterations += 1;
    }

    finish(support, channel, None, history, iterations, converged, opts)
}

/// Iteration budget for re-equalizing masses on a merged support. The
/// problems are tiny (atom count × outcome count), so this is generous.
const POLISH_ITERS: usize = 200_000;

/// Shared post-processing: prune, merge, re-equalize masses over the merged
/// atoms, then recompute objective and profile.
///
/// Snapping cluster centroids to grid points perturbs the capacity levels,
/// so the merged support is not yet stationary; a short ascent over it
/// restores equalization without moving any atom.
fn finish<R: Real>(
    mut support: Support<R>,
    channel: &DiscreteChannel<R>,
    base_channel: Option<&DiscreteChannel<R>>,
    history: Vec<R>,
    iterations: usize,
    converged: bool,
    opts: &BaOptions<R>,
) -> Result<BaReport<R>> {
    support.prune(opts.prune_eps);
    let radius = opts
        .merge_radius
        .unwrap_or_else(|| R::of(2.0) * channel.grid().mean_spacing());
    support.merge(channel.grid(), radius);
    match base_channel {
        None => {
            let mut prev: Option<R> = None;
            for _ in 0..POLISH_ITERS {
                let marginal = support.marginal(channel);
                let gains = support.divergences(channel, &marginal);
                if gains.iter().any(|g| g.is_infinite()) {
                    break;
                }
                let obj: R = support
                    .masses
                    .iter()
                    .zip(&gains)
                    .map(|(&m, &g)| m * g)
                    .sum();
                let max_gain = gains.iter().cloned().fold(R::neg_infinity(), R::max);
                if let Some(p) = prev {
                    if (obj - p).abs() < opts.tol && max_gain - obj <= opts.gap_tol {
                        break;
                    }
                }
                prev = Some(obj);
                support.multiplicative_step(&gains, R::one());
            }
        }
        Some(base) => {
            let polish_opts = TwoStageOptions {
                restarts: 1,
                step_size: R::one(),
                tol: opts.tol,
                gap_tol: opts.gap_tol,
                max_iters: POLISH_ITERS,
                prune_eps: opts.prune_eps,
                merge_radius: opts.merge_radius,
                seed: 0,
            };
            let (polished, _, _, _) = mirror_ascent(support, base, channel, &polish_opts)?;
            support = polished;
        }
    }
    support.prune(opts.prune_eps);
    let prior = support.into_prior()?;
    let objective = match base_channel {
        None => mutual_information(&prior, channel)?,
        Some(base) => two_stage_objective(&prior, base, channel)?,
    };
    let profile = match base_channel {
        None => kl_profile(&prior, channel)?,
        Some(base) => {
            let mn = kl_profile(&prior, channel)?;
            let m = kl_profile(&prior, base)?;
            mn.into_iter().zip(m).map(|(a, b)| a - b).collect()
        }
    };
    Ok(BaReport { prior, objective, history, iterations, converged, profile })
}

/// `KL(p(z|w) || p_prior(z))` for every grid point `w`.
///
/// At a capacity-achieving prior the profile equals the mutual information on
/// the support and does not exceed it anywhere else.
pub fn kl_profile<R: Real>(
    prior: &AtomPrior<R>,
    channel: &DiscreteChannel<R>,
) -> Result<Vec<R>> {
    check_support(prior, channel)?;
    let marginal = marginal_masses(prior, channel)?;
    Ok((0..channel.grid().len())
        .map(|i| kl_of_masses(channel.row(i), &marginal))
        .collect())
}

/// Information gained by the second stage beyond the first:
/// `I(w; z_{m+n}) - I(w; z_m)` under the given prior.
pub fn two_stage_objective<R: Real>(
    prior: &AtomPrior<R>,
    first: &DiscreteChannel<R>,
    second: &DiscreteChannel<R>,
) -> Result<R> {
    if first.grid().len() != second.grid().len() {
        return Err(Error::Usage(
            "two-stage channels must share one parameter grid".into(),
        ));
    }
    Ok(mutual_information(prior, second)? - mutual_information(prior, first)?)
}

/// Options for [`two_stage_solve`].
#[derive(Debug, Clone)]
pub struct TwoStageOptions<R: Real> {
    /// Independent restarts from jittered initializations; best result wins.
    pub restarts: usize,
    /// Initial mirror-ascent step size, halved whenever a step would
    /// decrease the objective.
    pub step_size: R,
    pub tol: R,
    /// First-order optimality slack, as in [`BaOptions::gap_tol`].
    pub gap_tol: R,
    pub max_iters: usize,
    pub prune_eps: R,
    pub merge_radius: Option<R>,
    /// Seed for the restart initializations.
    pub seed: u64,
}

impl<R: Real> Default for TwoStageOptions<R> {
    fn default() -> Self {
        Self {
            restarts: 8,
            step_size: R::one(),
            tol: R::of(1e-9),
            gap_tol: R::of(1e-5),
            max_iters: 200_000,
            prune_eps: R::of(1e-8),
            merge_radius: None,
            seed: 0,
        }
    }
}

/// Maximizes the two-stage objective by multiplicative mirror ascent.
///
/// The gradient of the objective with respect to an atom's mass is the
/// difference of the two divergence profiles at that atom, so the update is
/// the natural generalization of the single-stage fixed point; with a
/// trivial first stage and unit step size it reproduces `ba_solve` exactly.
pub fn two_stage_solve<R: Real>(
    first: &DiscreteChannel<R>,
    second: &DiscreteChannel<R>,
    opts: &TwoStageOptions<R>,
) -> Result<BaReport<R>> {
    if first.grid().len() != second.grid().len() {
        return Err(Error::Usage(
            "two-stage channels must share one parameter grid".into(),
        ));
    }
    if opts.restarts == 0 {
        return Err(Error::Usage("two-stage solve needs at least one restart".into()));
    }
    let grid_len = first.grid().len();
    let ba_opts = BaOptions {
        tol: opts.tol,
        gap_tol: opts.gap_tol,
        max_iters: opts.max_iters,
        prune_eps: opts.prune_eps,
        merge_radius: opts.merge_radius,
    };

    let mut best: Option<BaReport<R>> = None;
    for restart in 0..opts.restarts {
        let support = jittered_uniform(grid_len, opts.seed, restart as u64);
        let (support, history, iterations, converged) =
            mirror_ascent(support, first, second, opts)?;
        let report = finish(
            support,
            second,
            Some(first),
            history,
            iterations,
            converged,
            &ba_opts,
        )?;
        let better = match &best {
            None => true,
            Some(b) => report.objective > b.objective,
        };
        if better {
            best = Some(report);
        }
    }
    Ok(best.expect("at least one restart ran"))
}

/// Uniform masses with multiplicative jitter in `[1, 1.5)`.
fn jittered_uniform<R: Real>(grid_len: usize, seed: u64, restart: u64) -> Support<R> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, restart));
    let mut masses: Vec<R> = (0..grid_len)
        .map(|_| R::of(1.0 + 0.5 * rng.gen::<f64>()))
        .collect();
    let sum: R = masses.iter().copied().sum();
    for m in &mut masses {
        *m /= sum;
    }
    let ln_masses = masses.iter().map(|m| m.ln()).collect();
    Support { indices: (0..grid_len).collect(), ln_masses, masses }
}

/// SplitMix64 finalizer over the pair; decorrelates nearby seeds.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Gradient profile and objective of a two-stage iterate, computed in one
/// pass so accepted candidates need no re-evaluation.
struct TwoStageEval<R> {
    gains: Vec<R>,
    objective: R,
}

impl<R: Real> TwoStageEval<R> {
    fn of(s: &Support<R>, first: &DiscreteChannel<R>, second: &DiscreteChannel<R>) -> Self {
        let marg_mn = s.marginal(second);
        let marg_m = s.marginal(first);
        let d_mn = s.divergences(second, &marg_mn);
        let d_m = s.divergences(first, &marg_m);
        let gains: Vec<R> = d_mn.iter().zip(&d_m).map(|(&a, &b)| a - b).collect();
        let objective = s.masses.iter().zip(&gains).map(|(&m, &g)| m * g).sum();
        TwoStageEval { gains, objective }
    }

    fn any_infinite(&self) -> bool {
        self.gains.iter().any(|g| g.is_infinite())
    }

    fn max_gain(&self) -> R {
        self.gains.iter().cloned().fold(R::neg_infinity(), R::max)
    }
}

fn mirror_ascent<R: Real>(
    mut support: Support<R>,
    first: &DiscreteChannel<R>,
    second: &DiscreteChannel<R>,
    opts: &TwoStageOptions<R>,
) -> Result<(Support<R>, Vec<R>, usize, bool)> {
    // Absolute slack below which a "decrease" is indistinguishable from
    // floating-point noise and the step is accepted anyway.
    let noise = R::of(1e-14);
    let min_eta = opts.step_size * R::of(1e-12);

    let mut eta = opts.step_size;
    let mut history: Vec<R> = Vec::new();
    let mut iterations = 0usize;
    let mut converged = false;

    let mut cur = TwoStageEval::of(&support, first, second);
    while cur.any_infinite() && iterations < opts.max_iters {
        // Rescue path: jump straight to the limiting update without
        // recording the transient as an iterate.
        let infinite: Vec<bool> = cur.gains.iter().map(|g| g.is_infinite()).collect();
        support.collapse_onto(&infinite);
        iterations += 1;
        cur = TwoStageEval::of(&support, first, second);
    }
    history.push(cur.objective);

    while iterations < opts.max_iters {
        let mut candidate = Support {
            indices: support.indices.clone(),
            ln_masses: support.ln_masses.clone(),
            masses: support.masses.clone(),
        };
        candidate.multiplicative_step(&cur.gains, eta);
        let cand = TwoStageEval::of(&candidate, first, second);
        if cand.any_infinite() {
            let infinite: Vec<bool> = cand.gains.iter().map(|g| g.is_infinite()).collect();
            support = candidate;
            support.collapse_onto(&infinite);
            iterations += 1;
            cur = TwoStageEval::of(&support, first, second);
            continue;
        }
        if cand.objective >= cur.objective - noise {
            let gain = cand.objective - cur.objective;
            support = candidate;
            cur = cand;
            iterations += 1;
            history.push(cur.objective);
            // Same composite stop as the single-stage solver: flat objective
            // alone is a plateau, not a maximum.
            if gain.abs() < opts.tol && cur.max_gain() - cur.objective <= opts.gap_tol {
                converged = true;
                break;
            }
        } else {
            eta = eta * R::of(0.5);
            if eta < min_eta {
                // Step size exhausted: no ascent direction remains at this
                // resolution. Call it converged only if the iterate also
                // looks stationary by the usual test.
                converged = history.len() >= 2
                    && (history[history.len() - 1] - history[history.len() - 2]).abs() < opts.tol
                    && cur.max_gain() - cur.objective <= opts.gap_tol;
                break;
            }
        }
    }
    Ok((support, history, iterations, converged))
}

/// Result of tempering a prior by observed first-stage data.
#[derive(Debug, Clone)]
pub struct Conditioned<R: Real> {
    pub prior: AtomPrior<R>,
    /// Atoms whose likelihood hit the clamp floor.
    pub clamped: usize,
}

/// Likelihood floor for the inverse-likelihood tempering.
const LIKELIHOOD_FLOOR: f64 = 1e-300;

/// Tempers `base` by the inverse likelihood of observed first-stage data:
/// masses scale with `p(z | w)^(-beta)`.
///
/// Likelihoods are clamped below at `1e-300` before inversion; if the
/// clamped atoms end up carrying essentially all the mass the result would
/// be an artifact of the floor, and that is an error.
pub fn conditional_prior<R: Real>(
    base: &AtomPrior<R>,
    channel: &DiscreteChannel<R>,
    observed: usize,
    beta: R,
) -> Result<Conditioned<R>> {
    check_support(base, channel)?;
    if observed >= channel.outcome_count() {
        return Err(Error::Usage(format!(
            "observed outcome {observed} is outside the channel's {} outcomes",
            channel.outcome_count()
        )));
    }
    if !beta.is_finite() || beta < R::zero() {
        return Err(Error::Domain("tempering exponent must be finite and non-negative".into()));
    }
    let floor = R::of(LIKELIHOOD_FLOOR);
    let mut clamped = 0usize;
    let mut weights = Vec::with_capacity(base.len());
    let mut clamped_weight = R::zero();
    let mut total_weight = R::zero();
    for (&idx, &mass) in base.atom_indices().iter().zip(base.masses()) {
        let lik = channel.likelihood(idx, observed);
        let was_clamped = lik < floor;
        let lik = if was_clamped {
            clamped += 1;
            floor
        } else {
            lik
        };
        let w = mass * lik.powf(-beta);
        if was_clamped {
            clamped_weight += w;
        }
        total_weight += w;
        weights.push(w);
    }
    if !(total_weight.is_finite() && total_weight > R::zero()) {
        return Err(Error::DegenerateConditioning(
            "tempered weights overflowed or vanished".into(),
        ));
    }
    if clamped > 0 && clamped_weight / total_weight > R::one() - R::of(1e-12) {
        return Err(Error::DegenerateConditioning(format!(
            "{clamped} clamped atom(s) dominate the tempered prior"
        )));
    }
    let masses: Vec<R> = weights.into_iter().map(|w| w / total_weight).collect();
    let prior = AtomPrior::new(base.atom_indices().to_vec(), masses)?;
    Ok(Conditioned { prior, clamped })
}

/// Bayes update of an atom prior after observing outcome `observed`.
///
/// Atoms with zero likelihood drop out; if every atom has zero likelihood
/// the observation contradicts the prior and that is an error.
pub fn posterior<R: Real>(
    prior: &AtomPrior<R>,
    channel: &DiscreteChannel<R>,
    observed: usize,
) -> Result<AtomPrior<R>> {
    check_support(prior, channel)?;
    if observed >= channel.outcome_count() {
        return Err(Error::Usage(format!(
            "observed outcome {observed} is outside the channel's {} outcomes",
            channel.outcome_count()
        )));
    }
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    for (&idx, &mass) in prior.atom_indices().iter().zip(prior.masses()) {
        let lik = channel.likelihood(idx, observed);
        if lik > R::zero() {
            indices.push(idx);
            weights.push(mass * lik);
        }
    }
    if indices.is_empty() {
        return Err(Error::Contradiction(format!(
            "outcome {observed} has zero likelihood under every atom"
        )));
    }
    let total: R = weights.iter().copied().sum();
    let masses = weights.into_iter().map(|w| w / total).collect();
    AtomPrior::new(indices, masses)
}
