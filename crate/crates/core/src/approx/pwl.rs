//! Greedy piecewise-linear fitting and fixed-point evaluation.
//!
//! A fit walks the domain left to right, stretching each segment (the secant
//! between its endpoints) until the error bound breaks, then cuts. Curvy
//! regions get short segments, flat regions long ones. The fitted function
//! carries an integer form so evaluation is a compare + multiply-add.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qnum::{calibrate_scale, int_range, shift_round, QTensor, RealTensor};

use super::{exp_ref, silu_ref};

/// Absolute floor on the allowed error for the relative metric: near zeros of
/// the target the permitted deviation never drops below this constant.
pub const ABS_ERROR_FLOOR: f64 = 0.02;

/// Hard cap on segment count; exceeding it is a fit failure.
pub const MAX_SEGMENTS: usize = 64;

/// Candidate-breakpoint grid resolution for the greedy splitter.
const FIT_GRID: usize = 4096;

/// Post-fit verification grid resolution.
const VERIFY_GRID: usize = 200_000;

/// Fractional bits used when quantizing segment slopes.
const SLOPE_BITS: u32 = 16;

/// Functions the fitter knows how to approximate. `Identity` exists for
/// sanity checks: a line fits a line with one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitTarget {
    Silu,
    Exp,
    Identity,
}

impl FitTarget {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            FitTarget::Silu => silu_ref(x),
            FitTarget::Exp => exp_ref(x),
            FitTarget::Identity => x,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FitTarget::Silu => "silu",
            FitTarget::Exp => "exp",
            FitTarget::Identity => "identity",
        }
    }
}

impl std::str::FromStr for FitTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(FitTarget::Silu),
            "exp" => Ok(FitTarget::Exp),
            "identity" => Ok(FitTarget::Identity),
            other => Err(Error::Config(format!("unknown fit target {other:?}"))),
        }
    }
}

/// Behaviour outside the fitted domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutOfRange {
    Constant(f64),
    Passthrough,
}

/// How segment error is measured against the exact oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMetric {
    /// `|err| <= max(bound * |exact|, ABS_ERROR_FLOOR)`.
    RelativeWithFloor,
    /// `|err| <= bound`.
    Absolute,
}

impl ErrorMetric {
    /// Largest deviation permitted at a point with exact value `exact`.
    fn allowed(&self, bound: f64, exact: f64) -> f64 {
        match self {
            ErrorMetric::RelativeWithFloor => (bound * exact.abs()).max(ABS_ERROR_FLOOR),
            ErrorMetric::Absolute => bound,
        }
    }
}

/// A fitted piecewise-linear approximation: `k` segments delimited by `k + 1`
/// strictly increasing breakpoints, with out-of-range policies on both sides
/// and a canonical integer form for fixed-point evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PiecewiseLinearFn {
    pub target: FitTarget,
    pub breakpoints: Vec<f64>,
    pub slopes: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub below: OutOfRange,
    pub above: OutOfRange,
    pub metric: ErrorMetric,
    /// Requested error bound.
    pub max_err: f64,
    /// Worst normalized error observed on the verification grid (1.0 = at
    /// the requested bound).
    pub achieved_err: f64,
    /// Canonical integer form, built for the fit domain at 8-bit in/out.
    pub quantized: QuantizedPwl,
}

/// Integer evaluation plan: thresholds at the input scale, slopes and
/// intercepts as integers, one final rounding shift down to the output scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizedPwl {
    pub in_scale_exp: i32,
    pub in_bits: u32,
    pub out_scale_exp: i32,
    pub out_bits: u32,
    /// Breakpoints quantized to the input scale, length `k + 1`.
    pub thresholds: Vec<i64>,
    /// Integer slopes at scale `2^slope_scale_exp`.
    pub slope_q: Vec<i64>,
    pub slope_scale_exp: i32,
    /// Integer intercepts at scale `2^(slope_scale_exp + in_scale_exp)`, the
    /// scale of the pre-shift multiply-add accumulator.
    pub intercept_q: Vec<i64>,
    /// Right shift (with round-to-nearest) from the accumulator down to the
    /// output scale.
    pub shift: u32,
    pub below: QPolicy,
    pub above: QPolicy,
}

/// Out-of-range policy in integer form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QPolicy {
    Constant(i64),
    Passthrough,
}

/// Fits `target` over `[lo, hi]` so that every point of the fit grid meets
/// the error bound under `metric`, attaching the target's out-of-range
/// policies. Fails if more than [`MAX_SEGMENTS`] segments would be needed.
pub fn fit_piecewise(
    target: FitTarget,
    domain: (f64, f64),
    max_err: f64,
    metric: ErrorMetric,
) -> Result<PiecewiseLinearFn> {
    let (lo, hi) = domain;
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::Config(format!("bad fit domain [{lo}, {hi}]")));
    }
    if !max_err.is_finite() || max_err <= 0.0 {
        return Err(Error::Config(format!("error bound {max_err} must be positive")));
    }

    let grid: Vec<f64> = (0..=FIT_GRID)
        .map(|i| lo + (hi - lo) * i as f64 / FIT_GRID as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&x| target.eval(x)).collect();

    // Tighten the internal bound until the dense verification grid agrees.
    // The first pass almost always suffices; the loop guards against error
    // peaks that fall between candidate grid points.
    let mut internal = max_err;
    for _ in 0..50 {
        let cuts = greedy_cuts(&grid, &values, internal, metric).map_err(|e| match e {
            Error::FitFailure { achieved, segments, .. } => Error::FitFailure {
                requested: max_err,
                achieved,
                segments,
            },
            other => other,
        })?;
        let fitted = assemble(target, domain, &grid, &values, &cuts, metric, max_err)?;
        let achieved = verify_error(&fitted, target, domain, max_err, metric);
        if achieved <= 1.0 {
            let mut fitted = fitted;
            fitted.achieved_err = achieved;
            return Ok(fitted);
        }
        internal *= 0.98;
    }
    Err(Error::FitFailure {
        requested: max_err,
        achieved: f64::NAN,
        segments: MAX_SEGMENTS,
    })
}

/// Greedy splitter over the candidate grid. Returns segment boundary indices
/// including both endpoints.
fn greedy_cuts(
    grid: &[f64],
    values: &[f64],
    bound: f64,
    metric: ErrorMetric,
) -> Result<Vec<usize>> {
    let last = grid.len() - 1;
    let segment_ok = |a: usize, b: usize| -> bool {
        let (xa, ya) = (grid[a], values[a]);
        let (xb, yb) = (grid[b], values[b]);
        let m = (yb - ya) / (xb - xa);
        for i in a + 1..b {
            let approx = ya + m * (grid[i] - xa);
            if (approx - values[i]).abs() > metric.allowed(bound, values[i]) {
                return false;
            }
        }
        true
    };

    let mut cuts = vec![0usize];
    let mut start = 0;
    while start < last {
        // exponential probe then binary search for the farthest valid end
        let mut end = if segment_ok(start, last) {
            last
        } else {
            let mut step = 1;
            let mut good = start + 1;
            while good + step < last && segment_ok(start, good + step) {
                good += step;
                step *= 2;
            }
            let mut bad = (good + step).min(last);
            while bad - good > 1 {
                let mid = (good + bad) / 2;
                if segment_ok(start, mid) {
                    good = mid;
                } else {
                    bad = mid;
                }
            }
            good
        };
        if end == start {
            end = start + 1;
        }
        cuts.push(end);
        start = end;
        if cuts.len() > MAX_SEGMENTS + 1 {
            // measure what a capped uniform fit achieves for the error report
            let achieved = capped_fit_error(grid, values, metric, bound);
            return Err(Error::FitFailure {
                requested: bound,
                achieved,
                segments: MAX_SEGMENTS,
            });
        }
    }
    Ok(cuts)
}

fn capped_fit_error(grid: &[f64], values: &[f64], metric: ErrorMetric, bound: f64) -> f64 {
    let last = grid.len() - 1;
    let mut worst: f64 = 0.0;
    for seg in 0..MAX_SEGMENTS {
        let a = seg * last / MAX_SEGMENTS;
        let b = (seg + 1) * last / MAX_SEGMENTS;
        let m = (values[b] - values[a]) / (grid[b] - grid[a]);
        for i in a..=b {
            let approx = values[a] + m * (grid[i] - grid[a]);
            let err = (approx - values[i]).abs() * bound / metric.allowed(bound, values[i]);
            worst = worst.max(err);
        }
    }
    worst
}

fn assemble(
    target: FitTarget,
    domain: (f64, f64),
    grid: &[f64],
    values: &[f64],
    cuts: &[usize],
    metric: ErrorMetric,
    max_err: f64,
) -> Result<PiecewiseLinearFn> {
    let breakpoints: Vec<f64> = cuts.iter().map(|&i| grid[i]).collect();
    let mut slopes = Vec::with_capacity(cuts.len() - 1);
    let mut intercepts = Vec::with_capacity(cuts.len() - 1);
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let m = (values[b] - values[a]) / (grid[b] - grid[a]);
        slopes.push(m);
        intercepts.push(values[a] - m * grid[a]);
    }
    let (below, above) = match target {
        FitTarget::Silu => (OutOfRange::Constant(0.0), OutOfRange::Passthrough),
        FitTarget::Exp => (
            OutOfRange::Constant(0.0),
            OutOfRange::Constant(exp_ref(domain.1)),
        ),
        FitTarget::Identity => (OutOfRange::Passthrough, OutOfRange::Passthrough),
    };

    let mut fitted = PiecewiseLinearFn {
        target,
        breakpoints,
        slopes,
        intercepts,
        below,
        above,
        metric,
        max_err,
        achieved_err: f64::NAN,
        quantized: QuantizedPwl {
            in_scale_exp: 0,
            in_bits: 8,
            out_scale_exp: 0,
            out_bits: 8,
            thresholds: vec![],
            slope_q: vec![],
            slope_scale_exp: 0,
            intercept_q: vec![],
            shift: 0,
            below: QPolicy::Passthrough,
            above: QPolicy::Passthrough,
        },
    };
    // canonical 8-bit integer form over the fit domain
    let in_mag = domain.0.abs().max(domain.1.abs());
    let out_mag = fitted
        .breakpoints
        .iter()
        .map(|&x| target.eval(x).abs())
        .fold(0.0f64, f64::max);
    let in_scale = scale_for(in_mag, 8);
    let out_scale = scale_for(out_mag, 8);
    fitted.quantized = fitted.quantized_for(in_scale, 8, out_scale, 8)?;
    Ok(fitted)
}

fn scale_for(magnitude: f64, bits: u32) -> i32 {
    if magnitude == 0.0 {
        return crate::qnum::DEFAULT_SCALE_EXP;
    }
    let samples = RealTensor::from_vec(vec![magnitude as f32]);
    calibrate_scale(&samples, bits, 1.0).expect("finite magnitude calibrates")
}

/// Worst error of the real-form evaluation against the oracle over a dense
/// grid, normalized so 1.0 sits exactly at the requested bound.
fn verify_error(
    fitted: &PiecewiseLinearFn,
    target: FitTarget,
    domain: (f64, f64),
    max_err: f64,
    metric: ErrorMetric,
) -> f64 {
    let (lo, hi) = domain;
    let mut worst: f64 = 0.0;
    for i in 0..=VERIFY_GRID {
        let x = lo + (hi - lo) * i as f64 / VERIFY_GRID as f64;
        let exact = target.eval(x);
        let err = (fitted.eval_real(x) - exact).abs();
        worst = worst.max(err / metric.allowed(max_err, exact));
    }
    worst
}

impl PiecewiseLinearFn {
    pub fn segments(&self) -> usize {
        self.slopes.len()
    }

    /// Checks the structural invariants, for artifacts loaded from disk:
    /// strictly increasing breakpoints, consistent lengths, and continuity
    /// at interior breakpoints within 2^-20.
    pub fn validate(&self) -> Result<()> {
        let k = self.segments();
        if k == 0 || self.breakpoints.len() != k + 1 || self.intercepts.len() != k {
            return Err(Error::Parse(format!(
                "piecewise artifact with {} breakpoints, {} slopes, {} intercepts",
                self.breakpoints.len(),
                self.slopes.len(),
                self.intercepts.len()
            )));
        }
        if !self.breakpoints.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Parse("breakpoints are not strictly increasing".into()));
        }
        let tol = (-20.0f64).exp2();
        for j in 1..k {
            let x = self.breakpoints[j];
            let left = self.slopes[j - 1] * x + self.intercepts[j - 1];
            let right = self.slopes[j] * x + self.intercepts[j];
            if (left - right).abs() >= tol {
                return Err(Error::Parse(format!(
                    "discontinuity {} at breakpoint {x}",
                    (left - right).abs()
                )));
            }
        }
        Ok(())
    }

    /// Real-valued evaluation with out-of-range policies applied.
    pub fn eval_real(&self, x: f64) -> f64 {
        let k = self.segments();
        if x < self.breakpoints[0] {
            return match self.below {
                OutOfRange::Constant(c) => c,
                OutOfRange::Passthrough => x,
            };
        }
        if x > self.breakpoints[k] {
            return match self.above {
                OutOfRange::Constant(c) => c,
                OutOfRange::Passthrough => x,
            };
        }
        // segment whose start is the last breakpoint <= x
        let j = self.breakpoints[1..k]
            .partition_point(|&b| b <= x)
            .min(k - 1);
        self.slopes[j] * x + self.intercepts[j]
    }

    /// Builds an integer evaluation plan for the given input/output formats.
    pub fn quantized_for(
        &self,
        in_scale_exp: i32,
        in_bits: u32,
        out_scale_exp: i32,
        out_bits: u32,
    ) -> Result<QuantizedPwl> {
        let max_slope = self.slopes.iter().map(|m| m.abs()).fold(0.0f64, f64::max);
        let mut slope_scale = scale_for(max_slope, SLOPE_BITS);
        // the final shift must be a right shift; coarsen slopes if needed
        if out_scale_exp - slope_scale - in_scale_exp < 0 {
            slope_scale = out_scale_exp - in_scale_exp;
        }
        let shift = (out_scale_exp - slope_scale - in_scale_exp) as u32;

        let in_lsb = (in_scale_exp as f64).exp2();
        let acc_lsb = ((slope_scale + in_scale_exp) as f64).exp2();
        let slope_lsb = (slope_scale as f64).exp2();
        let out_lsb = (out_scale_exp as f64).exp2();
        let (out_lo, out_hi) = int_range(out_bits);

        let mut thresholds: Vec<i64> = self
            .breakpoints
            .iter()
            .map(|&b| (b / in_lsb).round() as i64)
            .collect();
        // rounding may collapse tightly spaced breakpoints; keep monotone
        for i in 1..thresholds.len() {
            thresholds[i] = thresholds[i].max(thresholds[i - 1]);
        }
        let slope_q = self.slopes.iter().map(|&m| (m / slope_lsb).round() as i64).collect();
        let intercept_q = self
            .intercepts
            .iter()
            .map(|&c| (c / acc_lsb).round() as i64)
            .collect();
        let policy = |p: &OutOfRange| match p {
            OutOfRange::Constant(c) => QPolicy::Constant(((c / out_lsb).round() as i64).clamp(out_lo, out_hi)),
            OutOfRange::Passthrough => QPolicy::Passthrough,
        };
        Ok(QuantizedPwl {
            in_scale_exp,
            in_bits,
            out_scale_exp,
            out_bits,
            thresholds,
            slope_q,
            slope_scale_exp: slope_scale,
            intercept_q,
            shift,
            below: policy(&self.below),
            above: policy(&self.above),
        })
    }
}

impl QuantizedPwl {
    /// Evaluates one integer input: threshold lookup (binary search), then
    /// multiply-add and a rounding shift to the output scale.
    pub fn eval_scalar(&self, x: i64) -> i64 {
        let (lo, hi) = int_range(self.out_bits);
        let k = self.slope_q.len();
        if x < self.thresholds[0] {
            return match self.below {
                QPolicy::Constant(c) => c,
                QPolicy::Passthrough => {
                    shift_round(x, self.out_scale_exp - self.in_scale_exp).clamp(lo, hi)
                }
            };
        }
        if x > self.thresholds[k] {
            return match self.above {
                QPolicy::Constant(c) => c,
                QPolicy::Passthrough => {
                    shift_round(x, self.out_scale_exp - self.in_scale_exp).clamp(lo, hi)
                }
            };
        }
        let j = self.thresholds[1..k].partition_point(|&t| t <= x).min(k - 1);
        let acc = self.slope_q[j] * x + self.intercept_q[j];
        shift_round(acc, self.shift as i32).clamp(lo, hi)
    }

    pub fn eval(&self, x: &QTensor) -> Result<QTensor> {
        if x.scale_exp() != self.in_scale_exp {
            return Err(Error::Config(format!(
                "piecewise input scale 2^{} does not match plan scale 2^{}",
                x.scale_exp(),
                self.in_scale_exp
            )));
        }
        if x.bits() > self.in_bits {
            return Err(Error::Config(format!(
                "piecewise input width {} exceeds plan width {}",
                x.bits(),
                self.in_bits
            )));
        }
        let data = x.data().iter().map(|&v| self.eval_scalar(v)).collect();
        QTensor::new(data, x.shape().to_vec(), self.out_bits, self.out_scale_exp)
    }
}

/// Evaluates a fitted function on a quantized tensor via its canonical
/// integer form. The tensor's scale must match the form's input scale.
pub fn eval_piecewise(fitted: &PiecewiseLinearFn, x: &QTensor) -> Result<QTensor> {
    fitted.quantized.eval(x)
}
