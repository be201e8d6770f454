//! Piecewise-linear approximation machinery and the hardware-friendly kernels
//! built on it: range normalization, piecewise SiLU, piecewise exponential,
//! and the ReLU stand-in for Softplus. Exact floating-point oracles live here
//! too; they drive fitting and serve as test references.

mod norm;
mod pwl;

pub use norm::{layer_norm_ref, range_norm, range_norm_ref, NormParams, RangeNormParams};
pub use pwl::{
    eval_piecewise, fit_piecewise, ErrorMetric, FitTarget, OutOfRange, PiecewiseLinearFn,
    QuantizedPwl, ABS_ERROR_FLOOR, MAX_SEGMENTS,
};

use crate::error::Result;
use crate::qnum::{QTensor, RealTensor};

/// Default SiLU fit: 3% relative error with the absolute floor over [-7, 7].
pub const SILU_DOMAIN: (f64, f64) = (-7.0, 7.0);
pub const SILU_MAX_ERR: f64 = 0.03;

/// Default exponential fit over [-4, 1]. The absolute bound is calibrated so
/// the greedy splitter lands on 11 segments.
pub const EXP_DOMAIN: (f64, f64) = (-4.0, 1.0);
pub const EXP_MAX_ERR: f64 = 0.01;

/// Fits SiLU with the default domain, bound, and metric.
pub fn fit_silu_default() -> Result<PiecewiseLinearFn> {
    fit_piecewise(FitTarget::Silu, SILU_DOMAIN, SILU_MAX_ERR, ErrorMetric::RelativeWithFloor)
}

/// Fits the exponential with the default domain, bound, and metric.
pub fn fit_exp_default() -> Result<PiecewiseLinearFn> {
    fit_piecewise(FitTarget::Exp, EXP_DOMAIN, EXP_MAX_ERR, ErrorMetric::Absolute)
}

/// SiLU: `x * sigmoid(x)`.
pub fn silu_ref(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn exp_ref(x: f64) -> f64 {
    x.exp()
}

/// Softplus: `ln(1 + e^x)`, evaluated in a numerically stable form.
pub fn softplus_ref(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Element-wise tensor wrapper over the scalar oracles.
pub fn map_ref(x: &RealTensor, f: impl Fn(f64) -> f64) -> RealTensor {
    RealTensor {
        data: x.data.iter().map(|&v| f(v as f64) as f32).collect(),
        shape: x.shape.clone(),
    }
}

/// Hardware Softplus replacement: element-wise `max(0, x)`, scale unchanged.
pub fn relu_softplus(x: &QTensor) -> QTensor {
    let data = x.data().iter().map(|&v| v.max(0)).collect();
    QTensor::new(data, x.shape().to_vec(), x.bits(), x.scale_exp())
        .expect("relu keeps values in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnum::{dequantize, quantize};

    #[test]
    fn oracle_values() {
        assert_eq!(silu_ref(0.0), 0.0);
        assert_eq!(exp_ref(0.0), 1.0);
        assert!((softplus_ref(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn relu_examples() {
        let x = QTensor::new(vec![-5, 7, 0], vec![3], 8, -3).unwrap();
        let y = relu_softplus(&x);
        assert_eq!(y.data(), &[0, 7, 0]);
        assert_eq!(y.scale_exp(), -3);
    }

    #[test]
    fn relu_tracks_softplus_within_ln2() {
        // |relu(x) - softplus(x)| peaks at ln 2 near zero and vanishes for |x| large
        let xs: Vec<f32> = (-40..=40).map(|i| i as f32 * 0.25).collect();
        let q = quantize(&RealTensor::from_vec(xs.clone()), -3, 8).unwrap();
        let r = dequantize(&relu_softplus(&q));
        for (x, approx) in xs.iter().zip(r.data.iter()) {
            let exact = softplus_ref(*x as f64);
            let err = (*approx as f64 - exact).abs();
            assert!(err <= std::f64::consts::LN_2 + 0.1, "x={x} err={err}");
            if x.abs() > 8.0 {
                assert!(err < 0.05, "x={x} err={err}");
            }
        }
    }
}
