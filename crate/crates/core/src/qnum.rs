//! Fixed-point numeric core.
//!
//! Everything downstream moves values around as [`QTensor`]s: flat signed
//! integers with a bit-width and a power-of-two scale `S = 2^scale_exp`.
//! Quantization is symmetric (zero point fixed at 0), narrowing always
//! saturates, and rescaling between layers is a pure shift, so the whole
//! inference path stays in integer arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default scale exponent returned when calibration sees only zeros.
pub const DEFAULT_SCALE_EXP: i32 = -7;

/// Widest storable element width. Elements live in `i64`, so anything up to
/// 63 bits is representable; [`quantize`] itself only accepts 2..=32.
pub const MAX_BITS: u32 = 63;

// ---------------------------------------------------------------------------
// tensors

/// Integer tensor with a power-of-two scale. The universal value carrier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QTensor {
    data: Vec<i64>,
    shape: Vec<usize>,
    /// Bit-width `b`; every element lies in `[-2^(b-1), 2^(b-1)-1]`.
    bits: u32,
    /// Scale exponent `s`; the represented value of element `q` is `q * 2^s`.
    scale_exp: i32,
}

/// Flat real-valued tensor, used by the floating-point reference path and
/// by calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealTensor {
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
}

impl RealTensor {
    pub fn new(data: Vec<f32>, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} elements for shape {:?}", shape.iter().product::<usize>(), shape),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(RealTensor { data, shape })
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let shape = vec![data.len()];
        RealTensor { data, shape }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Signed range limits for a bit-width: `[-2^(b-1), 2^(b-1)-1]`.
pub fn int_range(bits: u32) -> (i64, i64) {
    debug_assert!(bits >= 1 && bits <= MAX_BITS);
    let max = (1i64 << (bits - 1)) - 1;
    (-max - 1, max)
}

impl QTensor {
    /// Builds a tensor, checking the range invariant for `bits`.
    pub fn new(data: Vec<i64>, shape: Vec<usize>, bits: u32, scale_exp: i32) -> Result<Self> {
        if bits < 2 || bits > MAX_BITS {
            return Err(Error::Config(format!("bit-width {bits} outside 2..={MAX_BITS}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} elements for shape {:?}", shape.iter().product::<usize>(), shape),
                actual: format!("{} elements", data.len()),
            });
        }
        let (lo, hi) = int_range(bits);
        if let Some(bad) = data.iter().find(|&&v| v < lo || v > hi) {
            return Err(Error::InvalidInput(format!(
                "element {bad} outside {bits}-bit range [{lo}, {hi}]"
            )));
        }
        Ok(QTensor {
            data,
            shape,
            bits,
            scale_exp,
        })
    }

    pub fn zeros(shape: Vec<usize>, bits: u32, scale_exp: i32) -> Self {
        let n = shape.iter().product();
        QTensor {
            data: vec![0; n],
            shape,
            bits,
            scale_exp,
        }
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn scale_exp(&self) -> i32 {
        self.scale_exp
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reinterprets the shape; the element count must be unchanged.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} elements", self.data.len()),
                actual: format!("shape {shape:?}"),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Moves the tensor to `(scale_exp, bits)`. Right shifts round to nearest
    /// (half up); left shifts are exact; the result saturates to `bits`.
    pub fn rescale_to(&self, scale_exp: i32, bits: u32) -> QTensor {
        let shift = scale_exp - self.scale_exp;
        let (lo, hi) = int_range(bits);
        let data = self
            .data
            .iter()
            .map(|&v| shift_round(v, shift).clamp(lo, hi))
            .collect();
        QTensor {
            data,
            shape: self.shape.clone(),
            bits,
            scale_exp,
        }
    }
}

/// `v / 2^shift` rounded to nearest (ties toward +inf) for `shift > 0`,
/// `v * 2^-shift` for `shift <= 0`. Left shifts assume headroom in `i64`.
pub fn shift_round(v: i64, shift: i32) -> i64 {
    if shift > 0 {
        let s = shift.min(62) as u32;
        (v + (1i64 << (s - 1))) >> s
    } else if shift < 0 {
        v << (-shift).min(62) as u32
    } else {
        v
    }
}

/// Integer division rounding to nearest, ties away from zero. `d > 0`.
pub fn div_round_half_away(n: i64, d: i64) -> i64 {
    debug_assert!(d > 0);
    let n = n as i128;
    let d = d as i128;
    let adj = if n >= 0 { d } else { -d };
    ((2 * n + adj) / (2 * d)) as i64
}

// ---------------------------------------------------------------------------
// quantize / dequantize

/// Quantizes a real tensor to `bits` at scale `2^scale_exp`:
/// `clamp(round(x / 2^s), -2^(b-1), 2^(b-1)-1)`, rounding half away from zero.
pub fn quantize(x: &RealTensor, scale_exp: i32, bits: u32) -> Result<QTensor> {
    if bits < 2 || bits > 32 {
        return Err(Error::Config(format!("quantize bit-width {bits} outside 2..=32")));
    }
    if let Some(bad) = x.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite value {bad}")));
    }
    let scale = (scale_exp as f64).exp2();
    let (lo, hi) = int_range(bits);
    let data = x
        .data
        .iter()
        // f64::round is round-half-away-from-zero
        .map(|&v| ((v as f64 / scale).round() as i64).clamp(lo, hi))
        .collect();
    Ok(QTensor {
        data,
        shape: x.shape.clone(),
        bits,
        scale_exp,
    })
}

/// Maps a quantized tensor back to reals: element-wise `q * 2^scale_exp`.
pub fn dequantize(q: &QTensor) -> RealTensor {
    let scale = (q.scale_exp as f64).exp2();
    RealTensor {
        data: q.data.iter().map(|&v| (v as f64 * scale) as f32).collect(),
        shape: q.shape.clone(),
    }
}

// ---------------------------------------------------------------------------
// calibration

/// Smallest scale exponent `s` such that the `coverage`-quantile of `|samples|`
/// quantizes to `bits` without clipping. Deterministic for a fixed input.
/// All-zero samples fall back to [`DEFAULT_SCALE_EXP`].
pub fn calibrate_scale(samples: &RealTensor, bits: u32, coverage: f64) -> Result<i32> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty calibration sample set".into()));
    }
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Config(format!("coverage {coverage} outside (0, 1]")));
    }
    if let Some(bad) = samples.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite calibration value {bad}")));
    }
    let mut mags: Vec<f64> = samples.data.iter().map(|&v| (v as f64).abs()).collect();
    mags.sort_by(f64::total_cmp);
    // smallest v with at least `coverage` of the samples <= v
    let idx = ((coverage * mags.len() as f64).ceil() as usize).clamp(1, mags.len()) - 1;
    let q = mags[idx];
    if q == 0.0 {
        return Ok(DEFAULT_SCALE_EXP);
    }
    let (_, hi) = int_range(bits);
    // Clipping-free condition is monotone in s; scan upward.
    for s in -60..=60 {
        let scale = (s as f64).exp2();
        if (q / scale).round() <= hi as f64 {
            return Ok(s);
        }
    }
    Err(Error::InvalidInput(format!("calibration magnitude {q} out of representable range")))
}

// ---------------------------------------------------------------------------
// requantization and multiplication

/// Narrows `q` by `shift` bits: round-to-nearest of `q_i / 2^shift`
/// (implemented as add `2^(shift-1)` then arithmetic right shift), clamped to
/// `out_bits`. The scale exponent grows by `shift`, preserving value.
pub fn requant_shift(q: &QTensor, shift: u32, out_bits: u32) -> Result<QTensor> {
    if out_bits > q.bits {
        return Err(Error::Config(format!(
            "requant_shift out_bits {out_bits} exceeds input width {}",
            q.bits
        )));
    }
    let (lo, hi) = int_range(out_bits);
    let data = q
        .data
        .iter()
        .map(|&v| shift_round(v, shift as i32).clamp(lo, hi))
        .collect();
    Ok(QTensor {
        data,
        shape: q.shape.clone(),
        bits: out_bits,
        scale_exp: q.scale_exp + shift as i32,
    })
}

/// Element-wise integer product at `acc_bits` width with numpy-style
/// broadcasting. Scale exponents add; no rounding occurs, so the dequantized
/// result equals the product of the dequantized operands exactly.
pub fn fixed_mul(a: &QTensor, b: &QTensor, acc_bits: u32) -> Result<QTensor> {
    if acc_bits < a.bits + b.bits {
        return Err(Error::Config(format!(
            "accumulator width {acc_bits} below {} + {} bits",
            a.bits, b.bits
        )));
    }
    if acc_bits > MAX_BITS {
        return Err(Error::Config(format!("accumulator width {acc_bits} exceeds {MAX_BITS}")));
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let a_idx = BroadcastIndexer::new(&a.shape, &shape);
    let b_idx = BroadcastIndexer::new(&b.shape, &shape);
    for i in 0..n {
        data.push(a.data[a_idx.map(i)] * b.data[b_idx.map(i)]);
    }
    Ok(QTensor {
        data,
        shape,
        bits: acc_bits,
        scale_exp: a.scale_exp + b.scale_exp,
    })
}

/// Broadcast result shape, aligning dimensions from the right.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch {
                expected: format!("broadcast-compatible with {a:?}"),
                actual: format!("{b:?}"),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Maps flat indices in the broadcast shape back to flat indices in a source
/// shape (size-1 source dimensions repeat).
struct BroadcastIndexer {
    // (out_stride, src_stride) per output dim, src_stride 0 where broadcast
    strides: Vec<(usize, usize)>,
}

impl BroadcastIndexer {
    fn new(src: &[usize], out: &[usize]) -> Self {
        let rank = out.len();
        let offset = rank - src.len();
        let mut src_strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            src_strides[offset + i] = if src[i] == 1 { 0 } else { acc };
            acc *= src[i];
        }
        let mut out_strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            out_strides[i] = acc;
            acc *= out[i];
        }
        BroadcastIndexer {
            strides: out_strides.into_iter().zip(src_strides).collect(),
        }
    }

    fn map(&self, flat: usize) -> usize {
        let mut rem = flat;
        let mut idx = 0;
        for &(out_stride, src_stride) in &self.strides {
            let d = rem / out_stride;
            rem %= out_stride;
            idx += d * src_stride;
        }
        idx
    }
}
