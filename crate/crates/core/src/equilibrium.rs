//! Equilibrium of the banked dynamics and the diagnostics built around it:
//! the two-sided geometric law and its asymmetric-Laplace approximation,
//! relative-entropy dissipation, the `c1 exp(-c2 √t)` decay fit, the
//! constants of the linearized exponential-decay criterion, and the Gini
//! comparisons against the bank-free model.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::meanfield::{self, integrate_two_phase, point_mass_at_mean, IntegratorConfig, Phase};
use crate::params::ModelParams;
use crate::pmf::{gini, mean, Lattice, WealthPmf};

/// Closed-form equilibrium `p*_n = p*_0 ρ_R^n` for `n ≥ 0` and
/// `p*_n = p*_0 ρ_L^{-n}` for `n ≤ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquilibriumSpec {
    pub mu: f64,
    pub nu: f64,
    pub p0_star: f64,
    pub r_star: f64,
    pub d_star: f64,
    /// `r*/(r* + p*_0)`.
    pub ratio_right: f64,
    /// `d*/(d* + p*_0)`.
    pub ratio_left: f64,
}

impl EquilibriumSpec {
    pub fn log_prob(&self, n: i64) -> f64 {
        if n >= 0 {
            self.p0_star.ln() + n as f64 * self.ratio_right.ln()
        } else if self.ratio_left == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.p0_star.ln() + (-n) as f64 * self.ratio_left.ln()
        }
    }

    pub fn prob(&self, n: i64) -> f64 {
        self.log_prob(n).exp()
    }
}

/// `p*_0`, `r*`, `d*` for the given μ > 0 and ν ≥ 0.
///
/// `p*_0` is evaluated in the rationalized form
/// `1 / (2 (μ(ν + ½) + √(μ²ν² + μ²ν + ¼)))`, which is free of cancellation
/// near μ = 1 and reduces to `1/(4ν + 2)` there. `d*` is the positive root of
/// `d(d + p*_0) = p*_0 μν`, written so that it keeps full precision when it
/// is tiny.
pub fn equilibrium_spec(mu: f64, nu: f64) -> Result<EquilibriumSpec> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(invalid("mu", format!("must be > 0, got {mu}")));
    }
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(invalid("nu", format!("must be >= 0, got {nu}")));
    }
    let root = (mu * mu * nu * nu + mu * mu * nu + 0.25).sqrt();
    let p0 = 1.0 / (2.0 * (mu * (nu + 0.5) + root));
    let r = ((mu - 1.0) * p0 + 1.0) / 2.0;
    let lent = p0 * mu * nu;
    let d = 2.0 * lent / (p0 + (p0 * p0 + 4.0 * lent).sqrt());
    Ok(EquilibriumSpec {
        mu,
        nu,
        p0_star: p0,
        r_star: r,
        d_star: d,
        ratio_right: r / (r + p0),
        ratio_left: d / (d + p0),
    })
}

/// How far the equilibrium window reaches into each tail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumWindow {
    /// Upper bound on the probability cut off on each side.
    pub tail_mass: f64,
    pub max_width: usize,
}

impl Default for EquilibriumWindow {
    fn default() -> Self {
        Self {
            tail_mass: 1e-17,
            max_width: 1 << 22,
        }
    }
}

/// Number of slots beyond 0 after which a geometric tail
/// `p_0 ρ^n`, whose total is `p_0 / (1 - ρ)`, keeps at most `tail` mass.
fn tail_extent(p0: f64, ratio: f64, tail: f64) -> i64 {
    if ratio <= 0.0 {
        return 0;
    }
    let total = p0 / (1.0 - ratio);
    if total <= tail {
        return 0;
    }
    // total ρ^{k+1} <= tail
    ((tail / total).ln() / ratio.ln()).ceil() as i64
}

/// The equilibrium law on a window whose truncated tails carry less than
/// `window.tail_mass` each. For ν = 0 the left tail is empty and the law is
/// the geometric equilibrium of the bank-free model.
pub fn equilibrium_pmf(
    mu: f64,
    nu: f64,
    window: &EquilibriumWindow,
) -> Result<(EquilibriumSpec, WealthPmf)> {
    let spec = equilibrium_spec(mu, nu)?;
    let right = tail_extent(spec.p0_star, spec.ratio_right, window.tail_mass);
    let left = tail_extent(spec.p0_star, spec.ratio_left, window.tail_mass);
    let width = (left + right + 1) as usize;
    if width > window.max_width {
        return Err(Error::TailOverflow {
            width,
            cap: window.max_width,
        });
    }
    let probs: Vec<f64> = (-left..=right).map(|n| spec.prob(n)).collect();
    let pmf = WealthPmf::new(-left, probs)?;
    Ok((spec, pmf))
}

/// Relative entropy `D_KL(p || p*)` against the closed-form equilibrium.
pub fn kl_to_equilibrium<L: Lattice + ?Sized>(p: &L, spec: &EquilibriumSpec) -> Result<f64> {
    let mut total = 0.0;
    for (n, pn) in p.iter() {
        if pn <= 0.0 {
            continue;
        }
        let log_q = spec.log_prob(n);
        if log_q == f64::NEG_INFINITY {
            return Err(Error::DivergenceUndefined { n, p: pn });
        }
        total += pn * (pn.ln() - log_q);
    }
    Ok(total)
}

/// Asymmetric Laplace density `ρ_0 e^{-αx}` (x ≥ 0), `ρ_0 e^{βx}` (x ≤ 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LaplaceParams {
    pub rho0: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Large-μ asymptotics of the equilibrium's peak and decay rates.
pub fn laplace_params(mu: f64, nu: f64) -> Result<LaplaceParams> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(invalid("mu", format!("must be > 0, got {mu}")));
    }
    if nu == 0.0 {
        return Err(invalid("nu", "the left decay rate diverges as nu -> 0"));
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(invalid("nu", format!("must be > 0, got {nu}")));
    }
    let (s1, s0) = ((1.0 + nu).sqrt(), nu.sqrt());
    Ok(LaplaceParams {
        rho0: (s1 - s0).powi(2) / mu,
        alpha: (1.0 - (nu / (1.0 + nu)).sqrt()) / mu,
        beta: (((1.0 + nu) / nu).sqrt() - 1.0) / mu,
    })
}

/// `(x - y) log(x / y)`, which is non-negative and vanishes iff `x = y`.
fn log_gap(x: f64, y: f64) -> f64 {
    if x == y {
        0.0
    } else if x == 0.0 || y == 0.0 {
        f64::INFINITY
    } else {
        (x - y) * (x / y).ln()
    }
}

fn rich_debt_zero(p: &WealthPmf) -> Result<(f64, f64, f64)> {
    let (mut r, mut d) = (0.0, 0.0);
    for (n, v) in p.iter() {
        if n > 0 {
            r += v;
        } else if n < 0 {
            d += v;
        }
    }
    let p0 = p.get(0);
    for (what, value) in [("r + p_0", r + p0), ("d + p_0", d + p0)] {
        if value < 1e-300 {
            return Err(Error::DegenerateDistribution { what, value });
        }
    }
    Ok((r, d, p0))
}

/// Closed-form time derivative of `D_KL(p(t) || p*)` along Phase II (unit
/// rate), with `r`, `d` and `p_0` read from `p`:
///
/// `-Σ_{n≥0} r (p_{n+1}/r - p_n/(r+p_0)) log[(p_{n+1}/r) / (p_n/(r+p_0))]`
/// `-Σ_{n≤-1} rd/(r+p_0) (p_{n+1}/(d+p_0) - p_n/d) log[(p_{n+1}/(d+p_0)) / (p_n/d)]`.
///
/// Only edges inside the window of `p` contribute, matching the zero-flux
/// window used by the integrator. The value is never positive; it is `-∞`
/// when an edge joins a zero entry to a positive one.
pub fn entropy_dissipation_rate(p: &WealthPmf) -> Result<f64> {
    let (r, d, p0) = rich_debt_zero(p)?;
    let mut total = 0.0;
    for n in p.n_min()..p.n_max() {
        let (lower, upper) = (p.get(n), p.get(n + 1));
        if n >= 0 {
            if r > 0.0 {
                total += r * log_gap(upper / r, lower / (r + p0));
            }
        } else if d > 0.0 && r > 0.0 {
            total += r * d / (r + p0) * log_gap(upper / (d + p0), lower / d);
        }
    }
    Ok(-total)
}

/// `Σ_n Q2[p]_n (log p_n - log p*_n)`, the same derivative obtained directly
/// from the operator and the closed-form equilibrium.
pub fn kl_derivative_along_q2(p: &WealthPmf, spec: &EquilibriumSpec) -> Result<f64> {
    let rates = meanfield::apply_in_window(Phase::PhaseII, p)?;
    let mut total = 0.0;
    for (n, q) in rates.iter() {
        let pn = p.get(n);
        if q == 0.0 {
            continue;
        }
        if pn == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        total += q * (pn.ln() - spec.log_prob(n));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub c1: f64,
    pub c2: f64,
    /// Root-mean-square residual of `log D_KL`.
    pub rms: f64,
}

/// Least-squares fit of `log D = log c1 - c2 √t`.
pub fn fit_sqrt_exponential_decay(samples: &[(f64, f64)]) -> Result<DecayFit> {
    if samples.len() < 8 {
        return Err(Error::InsufficientData(format!(
            "decay fit needs at least 8 samples, got {}",
            samples.len()
        )));
    }
    if let Some(&(t, v)) = samples.iter().find(|&&(t, v)| !(v > 0.0) || !(t >= 0.0)) {
        return Err(Error::InsufficientData(format!(
            "decay fit needs t >= 0 and positive values, got ({t}, {v})"
        )));
    }
    let xs: Vec<f64> = samples.iter().map(|&(t, _)| t.sqrt()).collect();
    let ys: Vec<f64> = samples.iter().map(|&(_, v)| v.ln()).collect();
    let k = xs.len() as f64;
    let x_bar = xs.iter().sum::<f64>() / k;
    let y_bar = ys.iter().sum::<f64>() / k;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - x_bar) * (x - x_bar);
        sxy += (x - x_bar) * (y - y_bar);
    }
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all samples share one time".into()));
    }
    let slope = sxy / sxx;
    let intercept = y_bar - slope * x_bar;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(DecayFit {
        c1: intercept.exp(),
        c2: -slope,
        rms: (sse / k).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearizationReport {
    pub mu: f64,
    pub nu: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    #[serde(rename = "C3")]
    pub c3: f64,
    #[serde(rename = "C4")]
    pub c4: f64,
    pub gamma: f64,
    /// `C4 - C3 - γ (C1 - C2) 1{C1 > C2}`.
    pub margin: f64,
    /// Whether the linearized entropy is guaranteed to decay exponentially.
    #[serde(rename = "in_G")]
    pub in_g: bool,
}

/// Constants of the near-equilibrium decay estimate for the linearized
/// entropy `Σ w_n² / p*_n`, and the sufficient condition `margin > 0`.
pub fn linearization_report(mu: f64, nu: f64) -> Result<LinearizationReport> {
    if !(nu > 0.0) {
        return Err(invalid("nu", format!("linearization needs nu > 0, got {nu}")));
    }
    let spec = equilibrium_spec(mu, nu)?;
    let (p, r, d) = (spec.p0_star, spec.r_star, spec.d_star);
    if !(d > 0.0) {
        return Err(Error::DegenerateDistribution {
            what: "d*",
            value: d,
        });
    }
    let rp = r + p;
    let dp = d + p;
    let r2p = 2.0 * r + p;
    let d2p = 2.0 * d + p;

    // Weights of α² and β² in the upper bound, grouped as they enter C1 and C3.
    let alpha_terms = r / r2p + r * d * d / (d2p * rp * rp);
    let beta_terms = r * d / (rp * d2p) + r.powi(3) * d / (rp * r2p * dp * dp);
    let c1 = 1.0 - r * d / (rp * dp) - alpha_terms - beta_terms;
    let c3 = alpha_terms + beta_terms;

    let right_gap = ((rp.sqrt() - r.sqrt()) / rp.sqrt()).powi(2);
    let left_gap = r / rp * ((dp.sqrt() - d.sqrt()) / dp.sqrt()).powi(2);
    let c2 = right_gap.max(left_gap);
    let c4 = right_gap.min(left_gap);

    let tails = r * r / r2p + d * d / d2p;
    let gamma = tails / (p + tails);
    let margin = c4 - c3 - if c1 > c2 { gamma * (c1 - c2) } else { 0.0 };
    Ok(LinearizationReport {
        mu,
        nu,
        c1,
        c2,
        c3,
        c4,
        gamma,
        margin,
        in_g: margin > 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GiniDerivativeCheck {
    /// Forward difference of the Gini index along one Euler step of Q1.
    pub lhs: f64,
    /// `z_0 / μ`.
    pub rhs: f64,
    /// `z_0 = Σ p_n²`, the probability that two independent copies tie.
    pub tie_probability: f64,
    pub mean: f64,
}

/// Compares the Phase I growth rate of the Gini index with `z_0 / μ`.
///
/// For the unit-rate walk the exact derivative is `2 z_0 / μ`: the
/// difference of two independent walks jumps at rate 4, and `E|W|` grows at
/// rate `4 P(W = 0)`. Both quantities are returned so callers can compare
/// either relation.
pub fn gini_phase1_derivative_check(p: &WealthPmf, dt: f64) -> Result<GiniDerivativeCheck> {
    if !(dt > 0.0) {
        return Err(invalid("dt", format!("must be > 0, got {dt}")));
    }
    let mu = mean(p);
    let g0 = gini(p)?;
    let rate = meanfield::q1_apply(p);
    let base = p.padded(1, 1);
    let stepped: Vec<f64> = base
        .iter()
        .map(|(n, v)| v + dt * rate.get(n))
        .collect();
    let next = WealthPmf::from_parts_unchecked(base.offset(), stepped);
    let g1 = gini(&next)?;
    let z0 = p.tie_probability();
    Ok(GiniDerivativeCheck {
        lhs: (g1 - g0) / dt,
        rhs: z0 / mu,
        tie_probability: z0,
        mean: mu,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GiniComparison {
    pub mu: f64,
    pub nu: f64,
    pub times: Vec<f64>,
    pub banked: Vec<f64>,
    pub vanilla: Vec<f64>,
    /// `banked - vanilla` at each recorded time.
    pub difference: Vec<f64>,
    pub banked_t_star: Option<f64>,
}

impl GiniComparison {
    pub fn min_difference(&self) -> f64 {
        self.difference.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Gini trajectories of the banked model and the bank-free model from the
/// same initial law (a point mass at μ). The sign of the difference is
/// reported, not asserted.
pub fn compare_gini_vs_vanilla(
    mu: f64,
    nu: f64,
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<GiniComparison> {
    let cfg = IntegratorConfig {
        t_end,
        ..cfg.clone()
    };
    let p0 = point_mass_at_mean(mu);
    let banked_params = ModelParams::new(1, mu, nu, cfg.lambda)?;
    let vanilla_params = ModelParams::new(1, mu, 0.0, cfg.lambda)?;
    let (banked, _) = integrate_two_phase(&p0, &banked_params, &cfg)?;
    let (vanilla, _) = integrate_two_phase(&p0, &vanilla_params, &cfg)?;
    if banked.records.len() != vanilla.records.len() {
        return Err(Error::InsufficientData(
            "banked and bank-free runs recorded different time grids".into(),
        ));
    }
    let mut out = GiniComparison {
        mu,
        nu,
        times: Vec::with_capacity(banked.records.len()),
        banked: Vec::with_capacity(banked.records.len()),
        vanilla: Vec::with_capacity(banked.records.len()),
        difference: Vec::with_capacity(banked.records.len()),
        banked_t_star: banked.t_star,
    };
    for (b, v) in banked.records.iter().zip(&vanilla.records) {
        debug_assert!((b.t - v.t).abs() < 1e-9);
        out.times.push(b.t);
        out.banked.push(b.gini);
        out.vanilla.push(v.gini);
        out.difference.push(b.gini - v.gini);
    }
    Ok(out)
}
