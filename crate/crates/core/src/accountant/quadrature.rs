//! Adaptive Gauss–Kronrod integration and the Rényi moment of a shifted
//! Gaussian mixture against the standard normal.
//!
//! All densities are in normalized units: the reference measure is
//! `N(0, 1)` and the mixture is `(1 - q) N(0, 1) + q N(s, 1)` with
//! `s = Δ / σ`. The integrals are computed for
//! `J(λ) = E_{N(0,1)}[ r^λ - 1 - λ (r - 1) ]` where `r` is the likelihood
//! ratio of the mixture against the reference. The integrand is nonnegative
//! for `λ > 1` and `λ < 0` (convexity of `t^λ`), and `E[r^λ] = 1 + J(λ)`
//! because `E[r] = 1`, so the small-divergence regime suffers no
//! cancellation.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::AccountantError;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

// 15-point Kronrod abscissae; odd indices are the embedded 7-point Gauss nodes.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_94,
    0.417_959_183_673_469_4,
];

const MAX_SUBINTERVALS: usize = 4000;

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn kronrod15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Segment {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (j, (&x, &wk)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let dx = half * x;
        let pair = f(center - dx) + f(center + dx);
        kronrod += wk * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Segment {
        a,
        b,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

/// Globally adaptive Gauss–Kronrod (7, 15) integration of `f` over `[a, b]`,
/// bisecting the segment with the largest error estimate until the total
/// error is within `rel_tol` of the total estimate.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
) -> Result<f64, AccountantError> {
    const INITIAL_PANELS: usize = 16;
    let w = (b - a) / INITIAL_PANELS as f64;
    let panels: Vec<(f64, f64)> = (0..INITIAL_PANELS)
        .map(|k| (a + k as f64 * w, if k + 1 == INITIAL_PANELS { b } else { a + (k + 1) as f64 * w }))
        .collect();
    integrate_many(&f, &panels, rel_tol)
}

fn integrate_many<F: Fn(f64) -> f64>(
    f: &F,
    intervals: &[(f64, f64)],
    rel_tol: f64,
) -> Result<f64, AccountantError> {
    let mut heap: BinaryHeap<ByError> = intervals
        .iter()
        .map(|&(a, b)| ByError(kronrod15(f, a, b)))
        .collect();
    loop {
        let total: f64 = heap.iter().map(|s| s.0.value).sum();
        let error: f64 = heap.iter().map(|s| s.0.error).sum();
        if !total.is_finite() || !error.is_finite() {
            return Err(AccountantError::NumericalFailure(format!(
                "non-finite quadrature estimate (value {total}, error {error})"
            )));
        }
        if error <= rel_tol * total.abs() || error <= f64::MIN_POSITIVE {
            return Ok(total);
        }
        // Refine in batches so the totals above are recomputed rarely.
        let mut remaining = error - 0.5 * rel_tol * total.abs();
        while remaining > 0.0 {
            if heap.len() >= MAX_SUBINTERVALS {
                return Err(AccountantError::NumericalFailure(format!(
                    "quadrature did not reach relative tolerance {rel_tol:e}: \
                     value {total:e}, error estimate {error:e} after {} subintervals",
                    heap.len()
                )));
            }
            let seg = heap.pop().expect("at least one segment").0;
            let mid = 0.5 * (seg.a + seg.b);
            if mid <= seg.a || mid >= seg.b {
                return Err(AccountantError::NumericalFailure(format!(
                    "quadrature segment [{}, {}] cannot be bisected further",
                    seg.a, seg.b
                )));
            }
            let left = kronrod15(f, seg.a, mid);
            let right = kronrod15(f, mid, seg.b);
            remaining -= seg.error - left.error - right.error;
            heap.push(ByError(left));
            heap.push(ByError(right));
            if heap.peek().is_some_and(|s| s.0.error < 1e-3 * remaining) {
                break;
            }
        }
    }
}

/// Max-heap order on the error estimate.
struct ByError(Segment);

impl PartialEq for ByError {
    fn eq(&self, other: &Self) -> bool {
        self.0.error.total_cmp(&other.0.error).is_eq()
    }
}

impl Eq for ByError {}

impl PartialOrd for ByError {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ByError {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.error.total_cmp(&other.0.error)
    }
}

/// `ln g` for `g = r^λ - 1 - λ (r - 1)`, given `ln r` and `y = r - 1`.
/// `y` may be infinite when `ln r` exceeds the f64 range of `r`.
fn ln_convex_excess(ln_r: f64, y: f64, lambda: f64) -> f64 {
    let t = lambda * ln_r;
    if t > 30.0 {
        // r^λ dominates; 1 + λy > 0 here because λ and y share a sign or λ > 1.
        return t + (-(ln_linear(lambda, y, ln_r) - t).exp()).ln_1p();
    }
    if (lambda * y).abs() < 1e-3 && y.abs() < 1e-3 {
        // Series: λ(λ-1)/2 y² [1 + (λ-2)/3 y + (λ-2)(λ-3)/12 y²]
        let c2 = 0.5 * lambda * (lambda - 1.0);
        let series =
            1.0 + (lambda - 2.0) / 3.0 * y + (lambda - 2.0) * (lambda - 3.0) / 12.0 * y * y;
        let g = c2 * y * y * series;
        return if g > 0.0 { g.ln() } else { f64::NEG_INFINITY };
    }
    if y.is_infinite() {
        // λ < 0 here, so r^λ vanishes and g ≈ -λ r.
        return (-lambda).ln() + ln_r;
    }
    let g = t.exp_m1() - lambda * y;
    if g > 0.0 {
        g.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `ln(1 + λy)` for `1 + λy > 0`, falling back to logs once `λy` overflows.
fn ln_linear(lambda: f64, y: f64, ln_r: f64) -> f64 {
    let v = lambda * y;
    if v.is_finite() {
        v.ln_1p()
    } else {
        // y ≈ r here
        lambda.abs().ln() + ln_r
    }
}

/// `ln r` and `r - 1` for `r = (1 - q) + q e^z`.
fn mixture_ratio(z: f64, q: f64) -> (f64, f64) {
    let y = q * z.exp_m1();
    if y.abs() < 0.5 {
        return (y.ln_1p(), y);
    }
    let a = q.ln() + z;
    let ln_r = if q >= 1.0 {
        z
    } else {
        let b = (-q).ln_1p();
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    };
    (ln_r, y)
}

/// Which ordering of the pair is being measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `D_α(mixture ‖ reference)`: exponent λ = α.
    MixtureOverReference,
    /// `D_α(reference ‖ mixture)`: exponent λ = 1 - α.
    ReferenceOverMixture,
}

/// Rényi divergence of order `order` between `N(0,1)` and
/// `(1-q) N(0,1) + q N(shift, 1)`, in the requested direction, by quadrature.
pub fn mixture_renyi_divergence(
    order: f64,
    shift: f64,
    q: f64,
    direction: Direction,
    rel_tol: f64,
) -> Result<f64, AccountantError> {
    if !(order > 1.0) || !order.is_finite() {
        return Err(AccountantError::InvalidArgument(format!(
            "Rényi order must be finite and > 1, got {order}"
        )));
    }
    if !(shift > 0.0) || !shift.is_finite() {
        return Err(AccountantError::InvalidArgument(format!(
            "mixture shift must be finite and positive, got {shift}"
        )));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(AccountantError::InvalidArgument(format!(
            "sampling rate must lie in (0, 1], got {q}"
        )));
    }
    let lambda = match direction {
        Direction::MixtureOverReference => order,
        Direction::ReferenceOverMixture => 1.0 - order,
    };
    let half_s2 = 0.5 * shift * shift;
    // Where r^λ dominates, -x²/2 + λ ln r is evaluated with the square
    // completed around λs; the constant `offset` is carried separately so
    // large orders and shifts do not lose the integrand to cancellation.
    let offset = if lambda > 1.0 {
        0.5 * lambda * (lambda - 1.0) * shift * shift + lambda * q.ln() - HALF_LN_2PI
    } else {
        0.0
    };
    let log_integrand = |x: f64| {
        let z = shift * x - half_s2;
        let (ln_r, y) = mixture_ratio(z, q);
        let t = lambda * ln_r;
        if lambda > 1.0 && t > 30.0 {
            // ln r = z + ln q + w
            let w = if q >= 1.0 { 0.0 } else { ((1.0 - q) / q * (-z).exp()).ln_1p() };
            let d = x - lambda * shift;
            return -0.5 * d * d + lambda * w + (-(ln_linear(lambda, y, ln_r) - t).exp()).ln_1p();
        }
        -0.5 * x * x - HALF_LN_2PI + ln_convex_excess(ln_r, y, lambda) - offset
    };

    // Every local maximum lies between 0, λs and s; outside that span the
    // integrand decays at least like a unit Gaussian.
    const MARGIN: f64 = 15.0;
    const STEP: f64 = 0.25;
    const KEEP_BELOW_PEAK: f64 = 60.0;
    let lo = 0f64.min(lambda * shift).min(shift) - MARGIN;
    let hi = 0f64.max(lambda * shift).max(shift) + MARGIN;
    let points = ((hi - lo) / STEP).ceil() as usize + 1;
    let grid: Vec<f64> = (0..points).map(|i| log_integrand(lo + i as f64 * STEP)).collect();
    let peak = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    if !peak.is_finite() {
        return Err(AccountantError::NumericalFailure(format!(
            "integrand overflow at order {order}, shift {shift}, q {q}"
        )));
    }

    let mut intervals: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < points {
        if grid[i] > peak - KEEP_BELOW_PEAK {
            let start = i;
            while i + 1 < points && grid[i + 1] > peak - KEEP_BELOW_PEAK {
                i += 1;
            }
            let a = (lo + start as f64 * STEP - 2.0).max(lo);
            let b = (lo + i as f64 * STEP + 2.0).min(hi);
            match intervals.last_mut() {
                Some(last) if last.1 >= a => last.1 = b,
                _ => intervals.push((a, b)),
            }
        }
        i += 1;
    }
    // Split long runs into unit panels so the adaptive pass starts resolved.
    let panels: Vec<(f64, f64)> = intervals
        .iter()
        .flat_map(|&(a, b)| {
            let n = ((b - a) / 4.0).ceil().max(1.0) as usize;
            let w = (b - a) / n as f64;
            (0..n).map(move |k| (a + k as f64 * w, if k + 1 == n { b } else { a + (k + 1) as f64 * w }))
        })
        .collect();

    let scaled = integrate_many(&|x: f64| (log_integrand(x) - peak).exp(), &panels, rel_tol)?;
    if scaled <= 0.0 {
        return Ok(0.0);
    }
    let ln_j = offset + peak + scaled.ln();
    // ln E[r^λ] = ln(1 + J)
    let ln_moment = if ln_j > 0.0 {
        ln_j + (-ln_j).exp().ln_1p()
    } else {
        ln_j.exp().ln_1p()
    };
    Ok((ln_moment / (order - 1.0)).max(0.0))
}
