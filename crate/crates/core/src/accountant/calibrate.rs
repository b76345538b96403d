use serde::{Deserialize, Serialize};

use super::{
    compose, rdp_to_dp, AccountantError, NoiseMultiplier, PrivacyTarget, Result,
    SubsamplingScheme,
};

/// Search interval for the noise multiplier.
pub const SIGMA_BRACKET: (f64, f64) = (1e-2, 1e3);
pub const BISECTION_ITERATIONS: usize = 60;
/// Relative slack below the target that a calibrated sigma may land in.
const TARGET_REL_TOL: f64 = 1e-3;

/// Number of accounted DP-SGD steps: `rounds · ceil(partition / batch)`.
pub fn accounted_steps(rounds: u64, partition_size: u64, batch_size: u64) -> u64 {
    rounds * partition_size.div_ceil(batch_size.max(1))
}

/// `(ε, α*)` after `steps` identical steps at noise `sigma`.
pub fn epsilon_spent(
    sigma: NoiseMultiplier,
    scheme: &SubsamplingScheme,
    steps: u64,
    delta: f64,
    orders: &[f64],
) -> Result<(f64, f64)> {
    let per_step = scheme.per_step_rdp(sigma, orders)?;
    rdp_to_dp(&compose(&per_step, steps)?, delta)
}

/// `(ε, index of α*)` over ascending `orders`, starting the scan at `hint`.
///
/// Gives the same minimum as [`epsilon_spent`] while evaluating only the
/// orders that can attain it: `R(α)` is nondecreasing in α, so once
/// `T·R(α)` alone reaches the best ε no higher order can beat it, and once
/// `ln(1/δ)/(α-1)` alone does no lower order can.
fn pruned_epsilon(
    sigma: NoiseMultiplier,
    scheme: &SubsamplingScheme,
    steps: u64,
    delta: f64,
    orders: &[f64],
    hint: usize,
) -> Result<(f64, usize)> {
    let ln_inv_delta = -delta.ln();
    let composed = |i: usize| -> Result<f64> {
        let per_step = scheme.per_step_rdp(sigma, &orders[i..=i])?;
        Ok(compose(&per_step, steps)?.values()[0])
    };
    let hint = hint.min(orders.len() - 1);
    let (mut best, _) = rdp_to_dp(&compose(&scheme.per_step_rdp(sigma, &orders[hint..=hint])?, steps)?, delta)?;
    let mut best_idx = hint;
    for i in hint + 1..orders.len() {
        let r = composed(i)?;
        if r >= best {
            break;
        }
        let eps = r + ln_inv_delta / (orders[i] - 1.0);
        if eps < best {
            best = eps;
            best_idx = i;
        }
    }
    for i in (0..hint).rev() {
        if ln_inv_delta / (orders[i] - 1.0) > best {
            break;
        }
        let eps = composed(i)? + ln_inv_delta / (orders[i] - 1.0);
        if eps <= best {
            best = eps;
            best_idx = i;
        }
    }
    Ok((best, best_idx))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub sigma: NoiseMultiplier,
    pub epsilon: f64,
    pub order: f64,
    pub steps: u64,
}

/// Smallest noise multiplier (up to bisection resolution) whose
/// accounted epsilon does not exceed the target.
///
/// Bisection runs in log-sigma over [`SIGMA_BRACKET`] and always returns
/// the upper (over-noised) endpoint, so the achieved epsilon is never
/// above the target.
pub fn calibrate_sigma(
    target: &PrivacyTarget,
    scheme: &SubsamplingScheme,
    steps: u64,
    orders: &[f64],
) -> Result<Calibration> {
    if steps == 0 {
        return Err(AccountantError::InvalidArgument(
            "calibration needs at least one step".into(),
        ));
    }
    scheme.validate()?;
    let ascending = orders.windows(2).all(|w| w[0] < w[1]);
    let mut hint = 0;
    let mut eps_at = |s: f64| -> Result<(f64, f64)> {
        let sigma = NoiseMultiplier::new(s)?;
        if !ascending || orders.is_empty() {
            return epsilon_spent(sigma, scheme, steps, target.delta(), orders);
        }
        let (eps, idx) = pruned_epsilon(sigma, scheme, steps, target.delta(), orders, hint)?;
        hint = idx;
        Ok((eps, orders[idx]))
    };

    let (lo_sigma, hi_sigma) = SIGMA_BRACKET;
    // The low endpoint goes first: its optimum sits at the smallest order,
    // where the scan stops after one evaluation.
    let (lo_eps, _) = eps_at(lo_sigma)?;
    let (hi_eps, hi_order) = eps_at(hi_sigma)?;
    if hi_eps > target.epsilon() {
        return Err(AccountantError::CalibrationFailure {
            target: target.epsilon(),
            endpoint: hi_sigma,
            achieved: hi_eps,
        });
    }
    if lo_eps <= target.epsilon() * (1.0 - TARGET_REL_TOL) {
        return Err(AccountantError::CalibrationFailure {
            target: target.epsilon(),
            endpoint: lo_sigma,
            achieved: lo_eps,
        });
    }

    let (mut lo, mut hi) = (lo_sigma.ln(), hi_sigma.ln());
    let mut best = (hi_eps, hi_order);
    for _ in 0..BISECTION_ITERATIONS {
        // Past 1e-12 in log-sigma the returned sigma no longer moves.
        if hi - lo < 1e-12 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let (eps, order) = eps_at(mid.exp())?;
        if eps > target.epsilon() {
            lo = mid;
        } else {
            hi = mid;
            best = (eps, order);
        }
    }
    let sigma = hi.exp();
    let (epsilon, order) = best;
    if epsilon > target.epsilon() || epsilon < target.epsilon() * (1.0 - TARGET_REL_TOL) {
        return Err(AccountantError::NumericalFailure(format!(
            "bisection ended at sigma = {sigma} with epsilon = {epsilon}, outside \
             [{} , {}]",
            target.epsilon() * (1.0 - TARGET_REL_TOL),
            target.epsilon()
        )));
    }
    Ok(Calibration {
        sigma: NoiseMultiplier::new(sigma)?,
        epsilon,
        order,
        steps,
    })
}
