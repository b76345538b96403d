//! Rényi differential privacy accounting for subsampled Gaussian mechanisms.
//!
//! Per-step RDP curves are computed for three cases:
//!
//! * the plain Gaussian mechanism (`α / (2σ²)`),
//! * Poisson subsampling with rate `q`, via the integer-order binomial
//!   expansion evaluated in log space,
//! * fixed-size subsampling of `m` out of `n` records, via adaptive
//!   quadrature of the mixture Rényi divergence in both directions.
//!
//! Curves compose additively over identical steps and convert to
//! `(ε, δ)` with `ε = min_α R(α) + ln(1/δ) / (α - 1)`.

mod calibrate;
pub mod quadrature;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibrate::{
    accounted_steps, calibrate_sigma, epsilon_spent, Calibration, SIGMA_BRACKET,
    BISECTION_ITERATIONS,
};
use quadrature::{mixture_renyi_divergence, Direction};

/// Relative tolerance for the fixed-size quadrature.
pub const QUADRATURE_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AccountantError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error(
        "calibration failure: target epsilon {target} is unreachable inside the sigma bracket; \
         endpoint sigma = {endpoint} achieves epsilon = {achieved}"
    )]
    CalibrationFailure {
        target: f64,
        endpoint: f64,
        achieved: f64,
    },
}

type Result<T> = std::result::Result<T, AccountantError>;

/// An `(ε, δ)` target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyTarget {
    epsilon: f64,
    delta: f64,
}

impl PrivacyTarget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(AccountantError::InvalidArgument(format!(
                "epsilon must be finite and positive, got {epsilon}"
            )));
        }
        check_delta(delta)?;
        Ok(Self { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(AccountantError::InvalidArgument(format!(
            "delta must lie in (0, 1), got {delta}"
        )))
    }
}

/// Noise standard deviation divided by the clipping norm.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoiseMultiplier(f64);

impl NoiseMultiplier {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma > 0.0 && sigma.is_finite() {
            Ok(Self(sigma))
        } else {
            Err(AccountantError::InvalidArgument(format!(
                "noise multiplier must be finite and positive, got {sigma}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adjacency {
    /// Neighbours differ by inserting or deleting one record (sensitivity 1).
    AddRemove,
    /// Neighbours differ by swapping one record (sensitivity 2).
    ReplaceOne,
}

impl Adjacency {
    /// Mean shift of the neighbouring Gaussian, in units of the clipping norm.
    pub fn shift(self) -> f64 {
        match self {
            Adjacency::AddRemove => 1.0,
            Adjacency::ReplaceOne => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplingKind {
    Poisson { rate: f64 },
    FixedSize { batch: u64, population: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsamplingScheme {
    pub kind: SamplingKind,
    pub adjacency: Adjacency,
}

impl SubsamplingScheme {
    pub fn poisson(rate: f64, adjacency: Adjacency) -> Result<Self> {
        check_rate(rate)?;
        Ok(Self {
            kind: SamplingKind::Poisson { rate },
            adjacency,
        })
    }

    pub fn fixed_size(batch: u64, population: u64, adjacency: Adjacency) -> Result<Self> {
        check_fixed_shape(batch, population)?;
        Ok(Self {
            kind: SamplingKind::FixedSize { batch, population },
            adjacency,
        })
    }

    /// Sampling rate; `m / n` for fixed-size batches.
    pub fn rate(&self) -> f64 {
        match self.kind {
            SamplingKind::Poisson { rate } => rate,
            SamplingKind::FixedSize { batch, population } => batch as f64 / population as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SamplingKind::Poisson { rate } => check_rate(rate),
            SamplingKind::FixedSize { batch, population } => check_fixed_shape(batch, population),
        }
    }

    /// Per-step RDP curve of the subsampled Gaussian under this scheme.
    pub fn per_step_rdp(&self, sigma: NoiseMultiplier, orders: &[f64]) -> Result<RdpCurve> {
        self.validate()?;
        match self.kind {
            SamplingKind::Poisson { rate } => {
                poisson_rdp_with_shift(sigma, rate, self.adjacency.shift(), orders)
            }
            SamplingKind::FixedSize { batch, population } => {
                fixed_size_rdp(sigma, batch, population, self.adjacency, orders)
            }
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(AccountantError::InvalidArgument(format!(
            "sampling rate must lie in (0, 1], got {rate}"
        )))
    }
}

fn check_fixed_shape(batch: u64, population: u64) -> Result<()> {
    if batch >= 1 && batch <= population {
        Ok(())
    } else {
        Err(AccountantError::InvalidArgument(format!(
            "fixed-size batch needs 1 <= m <= n, got m = {batch}, n = {population}"
        )))
    }
}

/// RDP values `R(α)` over a grid of orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    values: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if orders.len() != values.len() {
            return Err(AccountantError::InvalidArgument(format!(
                "{} orders but {} values",
                orders.len(),
                values.len()
            )));
        }
        check_orders(&orders)?;
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(AccountantError::InvalidArgument(format!(
                "RDP values must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self { orders, values })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.orders.iter().copied().zip(self.values.iter().copied())
    }
}

fn check_orders(orders: &[f64]) -> Result<()> {
    match orders.iter().find(|a| !a.is_finite() || **a <= 1.0) {
        Some(a) => Err(AccountantError::InvalidArgument(format!(
            "Rényi orders must be finite and > 1, found {a}"
        ))),
        None => Ok(()),
    }
}

/// Integer orders `2..=256`.
pub fn default_orders() -> Vec<f64> {
    integer_orders(2, 256)
}

pub fn integer_orders(lo: u32, hi: u32) -> Vec<f64> {
    (lo..=hi).map(f64::from).collect()
}

/// RDP of the Gaussian mechanism with sensitivity 1: `α / (2σ²)`.
pub fn gaussian_rdp(sigma: NoiseMultiplier, orders: &[f64]) -> Result<RdpCurve> {
    check_orders(orders)?;
    let s = sigma.get();
    let values = orders.iter().map(|a| a / (2.0 * s * s)).collect();
    RdpCurve::new(orders.to_vec(), values)
}

/// Poisson-subsampled Gaussian under add/remove adjacency (sensitivity 1).
pub fn poisson_subsampled_rdp(sigma: NoiseMultiplier, q: f64, orders: &[f64]) -> Result<RdpCurve> {
    poisson_rdp_with_shift(sigma, q, 1.0, orders)
}

fn poisson_rdp_with_shift(
    sigma: NoiseMultiplier,
    q: f64,
    shift: f64,
    orders: &[f64],
) -> Result<RdpCurve> {
    check_rate(q)?;
    check_orders(orders)?;
    if let Some(a) = orders.iter().find(|a| a.fract() != 0.0) {
        return Err(AccountantError::InvalidArgument(format!(
            "the binomial expansion needs integer orders, found {a}"
        )));
    }
    let s = shift / sigma.get();
    let values = orders
        .iter()
        .map(|&a| poisson_log_moment(a as u64, q, s) / (a - 1.0))
        .collect();
    RdpCurve::new(orders.to_vec(), values)
}

/// `ln E[r^α]` for the Poisson mixture with normalized shift `s`, as
/// `ln(1 + Σ_{j≥2} C(α,j) (1-q)^{α-j} q^j (e^{j(j-1)s²/2} - 1))`.
fn poisson_log_moment(alpha: u64, q: f64, s: f64) -> f64 {
    let half_s2 = 0.5 * s * s;
    if q == 1.0 {
        return alpha as f64 * (alpha as f64 - 1.0) * half_s2;
    }
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let a = alpha as f64;
    let mut ln_binom = 0.0;
    let mut terms = Vec::with_capacity(alpha as usize);
    for j in 1..=alpha {
        let jf = j as f64;
        ln_binom += ((a - jf + 1.0) / jf).ln();
        if j < 2 {
            continue;
        }
        let x = jf * (jf - 1.0) * half_s2;
        let ln_expm1 = if x > 1.0 { x + (-(-x).exp()).ln_1p() } else { x.exp_m1().ln() };
        terms.push(ln_binom + (a - jf) * ln_1mq + jf * ln_q + ln_expm1);
    }
    let lse = log_sum_exp(&terms);
    softplus(lse)
}

/// Fixed-size subsampled Gaussian: `max(D_α(μ₁‖μ₀), D_α(μ₀‖μ₁))` with
/// `μ₀ = N(0, σ²)` and `μ₁ = (1-q) N(0, σ²) + q N(Δ, σ²)`, `q = m/n`,
/// `Δ` from the adjacency relation.
pub fn fixed_size_rdp(
    sigma: NoiseMultiplier,
    batch: u64,
    population: u64,
    adjacency: Adjacency,
    orders: &[f64],
) -> Result<RdpCurve> {
    check_fixed_shape(batch, population)?;
    check_orders(orders)?;
    let q = batch as f64 / population as f64;
    let s = adjacency.shift() / sigma.get();
    let values = orders
        .par_iter()
        .map(|&a| {
            let forward = mixture_renyi_divergence(
                a,
                s,
                q,
                Direction::MixtureOverReference,
                QUADRATURE_REL_TOL,
            )?;
            let reverse = mixture_renyi_divergence(
                a,
                s,
                q,
                Direction::ReferenceOverMixture,
                QUADRATURE_REL_TOL,
            )?;
            Ok(forward.max(reverse))
        })
        .collect::<Result<Vec<f64>>>()
        .map_err(|e| match e {
            AccountantError::NumericalFailure(msg) => AccountantError::NumericalFailure(format!(
                "fixed-size RDP (sigma = {}, m = {batch}, n = {population}): {msg}",
                sigma.get()
            )),
            other => other,
        })?;
    RdpCurve::new(orders.to_vec(), values)
}

/// RDP of `steps` identical mechanisms.
pub fn compose(curve: &RdpCurve, steps: u64) -> Result<RdpCurve> {
    if steps == 0 {
        return Err(AccountantError::InvalidArgument(
            "composition needs at least one step".into(),
        ));
    }
    let k = steps as f64;
    Ok(RdpCurve {
        orders: curve.orders.clone(),
        values: curve.values.iter().map(|v| v * k).collect(),
    })
}

/// `(ε, α*)` minimizing `R(α) + ln(1/δ)/(α-1)` over the curve's orders.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(f64, f64)> {
    check_delta(delta)?;
    if curve.is_empty() {
        return Err(AccountantError::InvalidArgument(
            "cannot convert an empty RDP curve".into(),
        ));
    }
    let ln_inv_delta = -delta.ln();
    let (eps, order) = curve
        .iter()
        .map(|(a, r)| (r + ln_inv_delta / (a - 1.0), a))
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .expect("nonempty curve");
    if !eps.is_finite() {
        return Err(AccountantError::NumericalFailure(format!(
            "epsilon is not finite ({eps})"
        )));
    }
    Ok((eps, order))
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^z)`.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
