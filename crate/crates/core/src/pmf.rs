//! Integer-supported probability mass functions on a dense window, and the
//! scalar functionals (mass, mean, debt, relative entropy, Gini index,
//! distances) shared by the simulator, the mean-field integrator and the
//! equilibrium analysis.
//!
//! A [`WealthPmf`] stores the probability of wealth values
//! `offset, offset + 1, ..., offset + len - 1`; every value outside the window
//! has probability zero. Rate vectors produced by the mean-field operators
//! use the same layout ([`RateVector`]) but carry signed entries that sum to
//! zero, so the moment functionals are written once against [`Lattice`].

use serde::Serialize;

use crate::error::{invalid, Error, Result};

/// Allowed deviation of the total mass from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-12;

/// Default bound on the first and last slot of a window.
pub const DEFAULT_TAIL_THRESHOLD: f64 = 1e-14;

/// A real sequence indexed by a contiguous range of integers.
pub trait Lattice {
    fn offset(&self) -> i64;
    fn values(&self) -> &[f64];

    fn n_min(&self) -> i64 {
        self.offset()
    }

    fn n_max(&self) -> i64 {
        self.offset() + self.values().len() as i64 - 1
    }

    /// Value at `n`, zero outside the window.
    fn get(&self, n: i64) -> f64 {
        let idx = n - self.offset();
        if idx < 0 {
            return 0.0;
        }
        self.values().get(idx as usize).copied().unwrap_or(0.0)
    }

    fn iter(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        let offset = self.offset();
        self.values()
            .iter()
            .enumerate()
            .map(move |(i, &v)| (offset + i as i64, v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WealthPmf {
    offset: i64,
    probs: Vec<f64>,
}

impl Lattice for WealthPmf {
    fn offset(&self) -> i64 {
        self.offset
    }
    fn values(&self) -> &[f64] {
        &self.probs
    }
}

fn validate_entries(values: &[f64]) -> Result<()> {
    if let Some((index, &value)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        return Err(Error::InvalidProbability { index, value });
    }
    Ok(())
}

impl WealthPmf {
    /// Builds a PMF from probabilities that already sum to one.
    pub fn new(offset: i64, probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("probs", "a PMF needs at least one slot"));
        }
        validate_entries(&probs)?;
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::NotNormalized {
                mass: total,
                tolerance: NORMALIZATION_TOLERANCE,
            });
        }
        Ok(Self { offset, probs })
    }

    /// Builds a PMF from non-negative weights, dividing by their sum.
    pub fn normalized(offset: i64, mut weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid("probs", "a PMF needs at least one slot"));
        }
        validate_entries(&weights)?;
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::NotNormalized {
                mass: total,
                tolerance: NORMALIZATION_TOLERANCE,
            });
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self {
            offset,
            probs: weights,
        })
    }

    pub fn delta(n: i64) -> Self {
        Self {
            offset: n,
            probs: vec![1.0],
        }
    }

    /// Builds a PMF from `(n, p)` pairs; repeated values are summed and gaps
    /// are filled with zeros.
    pub fn from_pairs(pairs: &[(i64, f64)]) -> Result<Self> {
        let lo = pairs
            .iter()
            .map(|&(n, _)| n)
            .min()
            .ok_or_else(|| invalid("probs", "a PMF needs at least one slot"))?;
        let hi = pairs.iter().map(|&(n, _)| n).max().unwrap_or(lo);
        let mut probs = vec![0.0; (hi - lo + 1) as usize];
        for &(n, p) in pairs {
            probs[(n - lo) as usize] += p;
        }
        Self::new(lo, probs)
    }

    /// Wraps a buffer produced by an integrator without re-validating it.
    pub(crate) fn from_parts_unchecked(offset: i64, probs: Vec<f64>) -> Self {
        debug_assert!(!probs.is_empty());
        Self { offset, probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_parts(self) -> (i64, Vec<f64>) {
        (self.offset, self.probs)
    }

    /// Largest of the first and last slot.
    pub fn boundary_mass(&self) -> f64 {
        let first = self.probs.first().copied().unwrap_or(0.0);
        let last = self.probs.last().copied().unwrap_or(0.0);
        first.max(last)
    }

    /// Fails when either boundary slot carries more than `threshold`, which
    /// signals that mass has been truncated by the window.
    pub fn check_tails(&self, threshold: f64) -> Result<()> {
        let boundary = self.boundary_mass();
        if boundary > threshold {
            return Err(Error::InsufficientWindow {
                n_min: self.n_min(),
                n_max: self.n_max(),
                boundary,
                threshold,
            });
        }
        Ok(())
    }

    /// Drops exact zeros at both ends of the window.
    pub fn trimmed(&self) -> Self {
        let first = self.probs.iter().position(|&p| p != 0.0);
        let Some(first) = first else {
            return self.clone();
        };
        let last = self.probs.iter().rposition(|&p| p != 0.0).unwrap_or(first);
        Self {
            offset: self.offset + first as i64,
            probs: self.probs[first..=last].to_vec(),
        }
    }

    /// Same distribution on a window widened by `left` and `right` zero slots.
    pub fn padded(&self, left: usize, right: usize) -> Self {
        let mut probs = vec![0.0; left];
        probs.extend_from_slice(&self.probs);
        probs.resize(probs.len() + right, 0.0);
        Self {
            offset: self.offset - left as i64,
            probs,
        }
    }

    /// P(S = S') for two independent copies.
    pub fn tie_probability(&self) -> f64 {
        self.probs.iter().map(|p| p * p).sum()
    }
}

/// Signed time derivative of a PMF, on the window the operator produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RateVector {
    offset: i64,
    values: Vec<f64>,
}

impl Lattice for RateVector {
    fn offset(&self) -> i64 {
        self.offset
    }
    fn values(&self) -> &[f64] {
        &self.values
    }
}

impl RateVector {
    pub fn new(offset: i64, values: Vec<f64>) -> Self {
        Self { offset, values }
    }

    pub fn zeros(offset: i64, len: usize) -> Self {
        Self::new(offset, vec![0.0; len])
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn into_parts(self) -> (i64, Vec<f64>) {
        (self.offset, self.values)
    }
}

pub fn mass<L: Lattice + ?Sized>(p: &L) -> f64 {
    p.values().iter().sum()
}

/// First moment `Σ n p_n`.
pub fn mean<L: Lattice + ?Sized>(p: &L) -> f64 {
    p.iter().map(|(n, v)| n as f64 * v).sum()
}

/// Average debt per agent, `-Σ_{n ≤ -1} n p_n`.
pub fn debt<L: Lattice + ?Sized>(p: &L) -> f64 {
    -p.iter()
        .take_while(|&(n, _)| n < 0)
        .map(|(n, v)| n as f64 * v)
        .sum::<f64>()
}

/// Relative entropy `Σ p_n log(p_n / q_n)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &WealthPmf, q: &WealthPmf) -> Result<f64> {
    let mut total = 0.0;
    for (n, pn) in p.iter() {
        if pn == 0.0 {
            continue;
        }
        let qn = q.get(n);
        if qn == 0.0 {
            return Err(Error::DivergenceUndefined { n, p: pn });
        }
        total += pn * (pn / qn).ln();
    }
    Ok(total)
}

/// Gini index `(1/2μ) Σ_i Σ_j |i - j| p_i p_j`.
///
/// Evaluated in one pass through the identity
/// `E|S - S'| = 2 Σ_k F(k) (1 - F(k))` on the unit lattice. The upper tail
/// `1 - F(k)` is accumulated separately from the right so that it keeps full
/// relative precision where `F(k)` is close to one.
pub fn gini(p: &WealthPmf) -> Result<f64> {
    let mu = mean(p);
    if mu <= 0.0 || !mu.is_finite() {
        return Err(Error::NonPositiveMean { mean: mu });
    }
    let probs = p.probs();
    let len = probs.len();
    let mut upper = vec![0.0; len];
    let mut acc = 0.0;
    for k in (1..len).rev() {
        acc += probs[k];
        upper[k - 1] = acc;
    }
    let mut lower = 0.0;
    let mut spread = 0.0;
    for k in 0..len.saturating_sub(1) {
        lower += probs[k];
        spread += lower * upper[k];
    }
    Ok(spread / mu)
}

/// `(Σ |p_n - q_n|^e)^(1/e)` over the union of both windows.
pub fn lp_distance<A: Lattice + ?Sized, B: Lattice + ?Sized>(
    p: &A,
    q: &B,
    exponent: f64,
) -> Result<f64> {
    if !(exponent >= 1.0) {
        return Err(invalid("exponent", format!("must be >= 1, got {exponent}")));
    }
    let lo = p.n_min().min(q.n_min());
    let hi = p.n_max().max(q.n_max());
    let total: f64 = (lo..=hi)
        .map(|n| (p.get(n) - q.get(n)).abs().powf(exponent))
        .sum();
    Ok(total.powf(1.0 / exponent))
}

/// Total-variation distance, half the ℓ¹ distance.
pub fn total_variation<A: Lattice + ?Sized, B: Lattice + ?Sized>(p: &A, q: &B) -> f64 {
    let lo = p.n_min().min(q.n_min());
    let hi = p.n_max().max(q.n_max());
    0.5 * (lo..=hi).map(|n| (p.get(n) - q.get(n)).abs()).sum::<f64>()
}
