//! Range normalization — the layer-norm substitute — in integer form, plus
//! the floating-point references.
//!
//! The integer kernel centers each token on its rounded integer mean and
//! divides by `max - min` via a precomputed fixed-point reciprocal, so the
//! hardware needs comparators, one division per token, and multiply-shifts
//! instead of a square root.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qnum::{div_round_half_away, int_range, shift_round, QTensor, RealTensor};

/// Fractional bits of the reciprocal used for the range division.
pub const RECIP_FRAC_BITS: u32 = 16;

/// Floating-point normalization parameters (reference path).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    /// Stability constant; only the layer-norm reference uses it.
    pub epsilon: f32,
}

/// Integer-path parameters: 16-bit gamma/beta plus the output format.
#[derive(Debug, Clone)]
pub struct RangeNormParams {
    pub gamma: QTensor,
    pub beta: QTensor,
    pub out_scale_exp: i32,
    pub out_bits: u32,
}

fn rows_and_features(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [rows, n] => Ok((*rows, *n)),
        other => Err(Error::ShapeMismatch {
            expected: "[features] or [tokens, features]".into(),
            actual: format!("{other:?}"),
        }),
    }
}

/// Integer range normalization over the feature (last) dimension:
/// `y_i = gamma * (x_i - mu) / range(x - mu) + beta` with an integer mean and
/// a fixed-point reciprocal. A zero range degenerates to broadcasting beta.
pub fn range_norm(x: &QTensor, params: &RangeNormParams) -> Result<QTensor> {
    let (rows, n) = rows_and_features(x.shape())?;
    if params.gamma.len() != n || params.beta.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("gamma/beta of length {n}"),
            actual: format!("{} / {}", params.gamma.len(), params.beta.len()),
        });
    }
    let gamma = &params.gamma;
    let beta = &params.beta;
    // accumulator scale after gamma * ratio_fx
    let acc_scale = gamma.scale_exp() - RECIP_FRAC_BITS as i32;
    let (out_lo, out_hi) = int_range(params.out_bits);
    let one_fx = 1i64 << RECIP_FRAC_BITS;

    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let row = &x.data()[r * n..(r + 1) * n];
        let sum: i64 = row.iter().sum();
        let mean = div_round_half_away(sum, n as i64);
        let max_c = row.iter().map(|&v| v - mean).max().unwrap();
        let min_c = row.iter().map(|&v| v - mean).min().unwrap();
        let range = max_c - min_c;
        if range == 0 {
            for i in 0..n {
                let b = shift_round(beta.data()[i], params.out_scale_exp - beta.scale_exp());
                out.push(b.clamp(out_lo, out_hi));
            }
            continue;
        }
        let recip = div_round_half_away(one_fx, range);
        for i in 0..n {
            let centered = row[i] - mean;
            // |centered| <= range, so the ratio is clamped to +-1.0 in fx form
            let ratio_fx = (centered * recip).clamp(-one_fx, one_fx);
            let mut acc = gamma.data()[i] * ratio_fx;
            acc += shift_round(beta.data()[i], acc_scale - beta.scale_exp());
            let y = shift_round(acc, params.out_scale_exp - acc_scale);
            out.push(y.clamp(out_lo, out_hi));
        }
    }
    QTensor::new(out, x.shape().to_vec(), params.out_bits, params.out_scale_exp)
}

/// Floating-point range normalization (real mean, real range). The reference
/// path of the model uses this, so quantized-vs-float deltas come only from
/// quantization and the integer mean.
pub fn range_norm_ref(x: &RealTensor, params: &NormParams) -> Result<RealTensor> {
    let (rows, n) = rows_and_features(&x.shape)?;
    check_param_len(params, n)?;
    let mut out = Vec::with_capacity(x.data.len());
    for r in 0..rows {
        let row = &x.data[r * n..(r + 1) * n];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let max_c = row.iter().map(|&v| v as f64 - mean).fold(f64::NEG_INFINITY, f64::max);
        let min_c = row.iter().map(|&v| v as f64 - mean).fold(f64::INFINITY, f64::min);
        let range = max_c - min_c;
        for i in 0..n {
            let y = if range == 0.0 {
                params.beta[i] as f64
            } else {
                params.gamma[i] as f64 * ((row[i] as f64 - mean) / range) + params.beta[i] as f64
            };
            out.push(y as f32);
        }
    }
    RealTensor::new(out, x.shape.clone())
}

/// Exact layer normalization; exists only as an oracle/baseline.
pub fn layer_norm_ref(x: &RealTensor, params: &NormParams) -> Result<RealTensor> {
    let (rows, n) = rows_and_features(&x.shape)?;
    if n < 2 {
        return Err(Error::Config("layer norm needs feature dim > 1".into()));
    }
    check_param_len(params, n)?;
    let mut out = Vec::with_capacity(x.data.len());
    for r in 0..rows {
        let row = &x.data[r * n..(r + 1) * n];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        let denom = (var + params.epsilon as f64).sqrt();
        for i in 0..n {
            let norm = if denom == 0.0 { 0.0 } else { (row[i] as f64 - mean) / denom };
            out.push((params.gamma[i] as f64 * norm + params.beta[i] as f64) as f32);
        }
    }
    RealTensor::new(out, x.shape.clone())
}

fn check_param_len(params: &NormParams, n: usize) -> Result<()> {
    if params.gamma.len() != n || params.beta.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("gamma/beta of length {n}"),
            actual: format!("{} / {}", params.gamma.len(), params.beta.len()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnum::{dequantize, quantize};

    fn qparams(gamma: &[f32], beta: &[f32], out_scale: i32) -> RangeNormParams {
        RangeNormParams {
            gamma: quantize(&RealTensor::from_vec(gamma.to_vec()), -8, 16).unwrap(),
            beta: quantize(&RealTensor::from_vec(beta.to_vec()), -8, 16).unwrap(),
            out_scale_exp: out_scale,
            out_bits: 8,
        }
    }

    #[test]
    fn hand_computed_example() {
        // x = [1,2,3], gamma = 1, beta = 0: mu = 2, range = 2 -> [-0.5, 0, 0.5]
        let x = QTensor::new(vec![1, 2, 3], vec![3], 8, 0).unwrap();
        let p = qparams(&[1.0; 3], &[0.0; 3], -6);
        let y = dequantize(&range_norm(&x, &p).unwrap());
        assert_eq!(y.data, vec![-0.5, 0.0, 0.5]);
    }

    #[test]
    fn zero_range_broadcasts_beta() {
        let x = QTensor::new(vec![5, 5, 5], vec![3], 8, 0).unwrap();
        let p = qparams(&[3.0, -2.0, 0.5], &[0.25, -0.75, 1.5], -6);
        let y = dequantize(&range_norm(&x, &p).unwrap());
        assert_eq!(y.data, vec![0.25, -0.75, 1.5]);
    }

    #[test]
    fn affine_of_the_base_case() {
        // gamma = 2, beta = 1 over [1,2,3] -> [0, 1, 2]
        let x = QTensor::new(vec![1, 2, 3], vec![3], 8, 0).unwrap();
        let p = qparams(&[2.0; 3], &[1.0; 3], -5);
        let y = dequantize(&range_norm(&x, &p).unwrap());
        assert_eq!(y.data, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn translation_invariant_for_integer_shifts() {
        let base = vec![-17i64, 3, 42, -8, 25, 11, 0, -30];
        let p = qparams(&[1.0; 8], &[0.0; 8], -7);
        let x = QTensor::new(base.clone(), vec![8], 8, -2).unwrap();
        let y0 = range_norm(&x, &p).unwrap();
        for k in [-40i64, -3, 5, 60] {
            let shifted: Vec<i64> = base.iter().map(|v| v + k).collect();
            let x = QTensor::new(shifted, vec![8], 8, -2).unwrap();
            let y = range_norm(&x, &p).unwrap();
            assert_eq!(y.data(), y0.data(), "shift {k}");
        }
    }

    #[test]
    fn pre_affine_output_bounded_by_one() {
        // with gamma = 1, beta = 0 the dequantized output is the clamped ratio
        let mut rng = 12345u64;
        let mut next = move || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as i64 % 101) - 50
        };
        let p = qparams(&[1.0; 6], &[0.0; 6], -7);
        for _ in 0..500 {
            let vals: Vec<i64> = (0..6).map(|_| next()).collect();
            let x = QTensor::new(vals, vec![6], 8, -1).unwrap();
            let y = dequantize(&range_norm(&x, &p).unwrap());
            for v in y.data {
                assert!(v.abs() <= 1.0, "|{v}| > 1");
            }
        }
    }

    #[test]
    fn integer_kernel_tracks_float_reference() {
        let xs: Vec<f32> = vec![0.11, -0.52, 0.83, 0.27, -0.94, 0.66];
        let x_real = RealTensor::from_vec(xs.clone());
        let np = NormParams {
            gamma: vec![1.2, 0.8, -0.5, 1.0, 0.3, -1.1],
            beta: vec![0.05, -0.1, 0.2, 0.0, 0.15, -0.05],
            epsilon: 0.0,
        };
        let want = range_norm_ref(&x_real, &np).unwrap();
        let x_q = quantize(&x_real, -7, 8).unwrap();
        let p = RangeNormParams {
            gamma: quantize(&RealTensor::from_vec(np.gamma.clone()), -10, 16).unwrap(),
            beta: quantize(&RealTensor::from_vec(np.beta.clone()), -10, 16).unwrap(),
            out_scale_exp: -6,
            out_bits: 8,
        };
        let got = dequantize(&range_norm(&x_q, &p).unwrap());
        for (g, w) in got.data.iter().zip(want.data.iter()) {
            // one output LSB of slack plus the integer-mean rounding
            assert!((g - w).abs() <= 0.05, "{g} vs {w}");
        }
    }

    #[test]
    fn layer_norm_reference_examples() {
        let p = NormParams {
            gamma: vec![1.0, 1.0],
            beta: vec![0.0, 0.0],
            epsilon: 0.0,
        };
        let x = RealTensor::from_vec(vec![1.0, -1.0]);
        let y = layer_norm_ref(&x, &p).unwrap();
        assert_eq!(y.data, vec![1.0, -1.0]);

        // constant input with epsilon > 0 collapses to beta
        let p = NormParams {
            gamma: vec![2.0, 2.0],
            beta: vec![0.7, -0.3],
            epsilon: 1e-5,
        };
        let x = RealTensor::from_vec(vec![4.0, 4.0]);
        let y = layer_norm_ref(&x, &p).unwrap();
        assert!((y.data[0] - 0.7).abs() < 1e-6);
        assert!((y.data[1] + 0.3).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_reference_standardizes() {
        let n = 64;
        let vals: Vec<f32> = (0..n).map(|i| ((i * 37 + 11) % 97) as f32 * 0.13 - 5.0).collect();
        let p = NormParams {
            gamma: vec![1.0; n],
            beta: vec![0.0; n],
            epsilon: 0.0,
        };
        let y = layer_norm_ref(&RealTensor::from_vec(vals), &p).unwrap();
        let mean = y.data.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = y.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }
}
