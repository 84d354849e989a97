//! Entropies, divergences, and information functionals on discrete channels.
//!
//! All quantities are in nats. The `0 ln 0 = 0` convention applies
//! throughout, and `kl_divergence` signals a support mismatch with the
//! infinity sentinel rather than an error: an infinite divergence is a
//! legitimate value that the prior solvers know how to interpret.

use crate::ba::AtomPrior;
use crate::error::{Error, Result};
use crate::models::DiscreteChannel;
use crate::scalar::Real;

/// Probability distribution over a finite outcome set.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution<R: Real> {
    masses: Vec<R>,
}

impl<R: Real> Distribution<R> {
    /// Validates that the masses are non-negative and sum to one.
    pub fn new(masses: Vec<R>) -> Result<Self> {
        if masses.is_empty() {
            return Err(Error::Usage("distribution needs at least one outcome".into()));
        }
        let mut sum = R::zero();
        for (i, &p) in masses.iter().enumerate() {
            if !p.is_finite() || p < R::zero() {
                return Err(Error::Domain(format!(
                    "mass at index {i} is negative or non-finite"
                )));
            }
            sum += p;
        }
        if (sum - R::one()).abs() > R::validation_tol() {
            return Err(Error::Domain(format!("masses sum to {sum}, expected 1")));
        }
        Ok(Self { masses })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: Vec<R>) -> Result<Self> {
        let sum: R = weights.iter().copied().sum();
        if !(sum > R::zero()) || !sum.is_finite() {
            return Err(Error::Domain("weights must have a positive finite sum".into()));
        }
        let masses = weights.into_iter().map(|w| w / sum).collect();
        Self::new(masses)
    }

    pub fn masses(&self) -> &[R] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }
}

/// Shannon entropy `-sum p ln p` of a mass vector, in nats.
///
/// Accepts any non-negative slice; zero entries contribute zero.
pub fn entropy_of_masses<R: Real>(masses: &[R]) -> R {
    let mut h = R::zero();
    for &p in masses {
        if p > R::zero() {
            h -= p * p.ln();
        }
    }
    h
}

/// Shannon entropy of a distribution, in nats.
pub fn entropy<R: Real>(dist: &Distribution<R>) -> R {
    entropy_of_masses(dist.masses())
}

/// KL divergence `sum p ln(p/q)` in nats.
///
/// Returns `+inf` when `p` puts mass where `q` has none; that sentinel is a
/// value, not an error. Errors only on mismatched lengths.
pub fn kl_divergence<R: Real>(p: &Distribution<R>, q: &Distribution<R>) -> Result<R> {
    if p.len() != q.len() {
        return Err(Error::Usage(format!(
            "KL divergence needs equal lengths, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(kl_of_masses(p.masses(), q.masses()))
}

/// KL divergence on raw mass slices; lengths must already agree.
pub(crate) fn kl_of_masses<R: Real>(p: &[R], q: &[R]) -> R {
    let mut d = R::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > R::zero() {
            if qi > R::zero() {
                d += pi * (pi / qi).ln();
            } else {
                return R::infinity();
            }
        }
    }
    d
}

/// Outcome distribution induced by mixing channel rows under an atom prior.
pub fn marginal<R: Real>(prior: &AtomPrior<R>, channel: &DiscreteChannel<R>) -> Result<Distribution<R>> {
    let masses = marginal_masses(prior, channel)?;
    Distribution::new(masses)
}

pub(crate) fn marginal_masses<R: Real>(
    prior: &AtomPrior<R>,
    channel: &DiscreteChannel<R>,
) -> Result<Vec<R>> {
    let c = channel.outcome_count();
    let g = channel.grid().len();
    let mut out = vec![R::zero(); c];
    for (&idx, &mass) in prior.atom_indices().iter().zip(prior.masses()) {
        if idx >= g {
            return Err(Error::Usage(format!(
                "atom index {idx} is outside the channel grid of {g} points"
            )));
        }
        for (o, &p) in out.iter_mut().zip(channel.row(idx)) {
            *o += mass * p;
        }
    }
    Ok(out)
}

/// Mutual information between the parameter and one outcome draw, in nats.
///
/// Computed as the prior-weighted average of `KL(p(z|w) || p(z))`; the
/// equivalent `H(marginal) - E[H(row)]` form is kept as a test oracle.
pub fn mutual_information<R: Real>(
    prior: &AtomPrior<R>,
    channel: &DiscreteChannel<R>,
) -> Result<R> {
    let marg = marginal_masses(prior, channel)?;
    let mut mi = R::zero();
    for (&idx, &mass) in prior.atom_indices().iter().zip(prior.masses()) {
        mi += mass * kl_of_masses(channel.row(idx), &marg);
    }
    Ok(mi)
}

/// Fisher information estimates plus finite-difference diagnostics.
#[derive(Debug, Clone)]
pub struct FisherInfo<R: Real> {
    /// One estimate per grid point.
    pub values: Vec<R>,
    /// Number of `(grid point, outcome)` terms dropped because a likelihood
    /// needed by the log-derivative stencil was exactly zero.
    pub skipped_terms: usize,
}

/// Fisher information `g(w) = sum_z p(z|w) (d ln p(z|w) / dw)^2` along the grid.
///
/// Log-derivatives use central differences at interior points and one-sided
/// differences at the endpoints. Any term whose stencil touches a zero
/// likelihood contributes zero and is counted in the diagnostics.
pub fn fisher_information_1d<R: Real>(channel: &DiscreteChannel<R>) -> FisherInfo<R> {
    let g = channel.grid().len();
    let c = channel.outcome_count();
    let w = channel.grid().values();
    let mut values = Vec::with_capacity(g);
    let mut skipped = 0usize;
    for i in 0..g {
        let (lo, hi) = if i == 0 {
            (0, 1)
        } else if i == g - 1 {
            (g - 2, g - 1)
        } else {
            (i - 1, i + 1)
        };
        let dw = w[hi] - w[lo];
        let mut fisher = R::zero();
        for z in 0..c {
            let p = channel.likelihood(i, z);
            let p_lo = channel.likelihood(lo, z);
            let p_hi = channel.likelihood(hi, z);
            if p > R::zero() && p_lo > R::zero() && p_hi > R::zero() {
                let dlogp = (p_hi.ln() - p_lo.ln()) / dw;
                fisher += p * dlogp * dlogp;
            } else {
                skipped += 1;
            }
        }
        values.push(fisher);
    }
    FisherInfo { values, skipped_terms: skipped }
}

/// Jeffreys prior: masses proportional to `sqrt(g(w))`.
///
/// The endpoints are excluded from the normalization (their one-sided
/// stencils are unreliable and the analytic density typically diverges
/// there), so the returned distribution carries zero mass at both ends.
pub fn jeffreys_prior<R: Real>(channel: &DiscreteChannel<R>) -> Result<Distribution<R>> {
    let fisher = fisher_information_1d(channel);
    let g = fisher.values.len();
    let mut weights = vec![R::zero(); g];
    let mut sum = R::zero();
    for i in 1..g - 1 {
        let w = fisher.values[i].sqrt();
        weights[i] = w;
        sum += w;
    }
    if !(sum > R::zero()) {
        return Err(Error::Degenerate(
            "Fisher information vanishes on the interior grid; the channel carries no local information".into(),
        ));
    }
    for w in &mut weights {
        *w /= sum;
    }
    Distribution::new(weights)
}
