//! Model and tensor container I/O.
//!
//! Layout: 4 magic bytes `QMAM`, a little-endian u32 manifest length, the
//! JSON manifest, then one raw blob. The manifest lists every tensor with
//! name, shape, dtype, bit-width, scale exponent, and its blob slice.
//! Integer tensors pack as little-endian two's complement at their declared
//! width rounded up to whole bytes; reference tensors as 32-bit IEEE-754.
//! A save/load round trip reproduces every bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::approx::PiecewiseLinearFn;
use crate::error::{Error, Result};
use crate::qnum::{int_range, QTensor, RealTensor};

use super::config::MambaConfig;
use super::quantize::QuantizedModel;
use super::weights::{BlockWeights, MambaWeights, ModelScales, WeightTensor};

pub const MAGIC: &[u8; 4] = b"QMAM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    /// Integer tensors only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale_exp: Option<i32>,
    offset: usize,
    byte_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    Int,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<MambaConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scales: Option<ModelScales>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    silu_fit: Option<PiecewiseLinearFn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exp_fit: Option<PiecewiseLinearFn>,
    tensors: Vec<TensorEntry>,
}

/// In-memory form of a container: named tensors plus optional model metadata.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub config: Option<MambaConfig>,
    pub scales: Option<ModelScales>,
    pub silu_fit: Option<PiecewiseLinearFn>,
    pub exp_fit: Option<PiecewiseLinearFn>,
    pub tensors: Vec<(String, TensorData)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real(RealTensor),
    Quant(QTensor),
}

fn int_width_bytes(bits: u32) -> usize {
    bits.div_ceil(8) as usize
}

fn pack_int(data: &[i64], bits: u32, out: &mut Vec<u8>) {
    let w = int_width_bytes(bits);
    for &v in data {
        let bytes = v.to_le_bytes();
        out.extend_from_slice(&bytes[..w]);
    }
}

fn unpack_int(bytes: &[u8], bits: u32, count: usize, name: &str) -> Result<Vec<i64>> {
    let w = int_width_bytes(bits);
    if bytes.len() != w * count {
        return Err(Error::Parse(format!(
            "tensor {name}: blob slice holds {} bytes, expected {}",
            bytes.len(),
            w * count
        )));
    }
    let mut out = Vec::with_capacity(count);
    for chunk in bytes.chunks_exact(w) {
        let mut buf = [0u8; 8];
        buf[..w].copy_from_slice(chunk);
        // sign extend from the top stored byte
        if chunk[w - 1] & 0x80 != 0 {
            for b in buf.iter_mut().skip(w) {
                *b = 0xff;
            }
        }
        out.push(i64::from_le_bytes(buf));
    }
    Ok(out)
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn real_tensor(&self, name: &str) -> Result<&RealTensor> {
        match self.tensor(name) {
            Some(TensorData::Real(t)) => Ok(t),
            Some(TensorData::Quant(_)) => {
                Err(Error::Parse(format!("tensor {name} is integer, expected f32")))
            }
            None => Err(Error::Parse(format!("container has no tensor {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, tensor) in &self.tensors {
            let offset = blob.len();
            let entry = match tensor {
                TensorData::Real(t) => {
                    for v in &t.data {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                    TensorEntry {
                        name: name.clone(),
                        shape: t.shape.clone(),
                        dtype: Dtype::F32,
                        bits: None,
                        scale_exp: None,
                        offset,
                        byte_len: blob.len() - offset,
                    }
                }
                TensorData::Quant(t) => {
                    pack_int(t.data(), t.bits(), &mut blob);
                    TensorEntry {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                        dtype: Dtype::Int,
                        bits: Some(t.bits()),
                        scale_exp: Some(t.scale_exp()),
                        offset,
                        byte_len: blob.len() - offset,
                    }
                }
            };
            entries.push(entry);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            scales: self.scales.clone(),
            silu_fit: self.silu_fit.clone(),
            exp_fit: self.exp_fit.clone(),
            tensors: entries,
        };
        let manifest_json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + manifest_json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest_json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Parse("container truncated before header".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Parse(format!(
                "bad magic {:?}, expected {MAGIC:?}",
                &bytes[0..4]
            )));
        }
        let manifest_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + manifest_len {
            return Err(Error::Parse("container truncated inside manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + manifest_len])
            .map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let blob = &bytes[8 + manifest_len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let count: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.byte_len).filter(|&end| end <= blob.len());
            let slice = match end {
                Some(end) => &blob[e.offset..end],
                None => {
                    return Err(Error::Parse(format!(
                        "tensor {}: blob slice {}..+{} outside blob of {} bytes",
                        e.name,
                        e.offset,
                        e.byte_len,
                        blob.len()
                    )))
                }
            };
            let data = match e.dtype {
                Dtype::F32 => {
                    if slice.len() != 4 * count {
                        return Err(Error::Parse(format!(
                            "tensor {}: manifest shape {:?} disagrees with {} blob bytes",
                            e.name,
                            e.shape,
                            slice.len()
                        )));
                    }
                    let vals = slice
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    TensorData::Real(RealTensor::new(vals, e.shape.clone()).map_err(|err| {
                        Error::Parse(format!("tensor {}: {err}", e.name))
                    })?)
                }
                Dtype::Int => {
                    let bits = e.bits.ok_or_else(|| {
                        Error::Parse(format!("tensor {}: integer entry without bits", e.name))
                    })?;
                    let scale = e.scale_exp.ok_or_else(|| {
                        Error::Parse(format!("tensor {}: integer entry without scale_exp", e.name))
                    })?;
                    let vals = unpack_int(slice, bits, count, &e.name)?;
                    let (lo, hi) = int_range(bits);
                    if let Some(bad) = vals.iter().find(|&&v| v < lo || v > hi) {
                        return Err(Error::Parse(format!(
                            "tensor {}: value {bad} outside {bits}-bit range",
                            e.name
                        )));
                    }
                    TensorData::Quant(
                        QTensor::new(vals, e.shape.clone(), bits, scale)
                            .map_err(|err| Error::Parse(format!("tensor {}: {err}", e.name)))?,
                    )
                }
            };
            tensors.push((e.name.clone(), data));
        }
        Ok(Container {
            config: manifest.config,
            scales: manifest.scales,
            silu_fit: manifest.silu_fit,
            exp_fit: manifest.exp_fit,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Container::from_bytes(&fs::read(path)?)
    }
}

// ---------------------------------------------------------------------------
// model <-> container

fn push_weight(tensors: &mut Vec<(String, TensorData)>, name: &str, t: &WeightTensor) {
    tensors.push((format!("ref/{name}"), TensorData::Real(t.real.clone())));
    if let Some(q) = &t.quant {
        tensors.push((format!("q/{name}"), TensorData::Quant(q.clone())));
    }
}

/// Serializes config + weights (reference tensors, plus integer twins when
/// present) into a container.
pub fn model_container(config: &MambaConfig, weights: &MambaWeights) -> Container {
    let mut tensors = Vec::new();
    weights.for_each(|name, t| push_weight(&mut tensors, name, t));
    Container {
        config: Some(config.clone()),
        scales: None,
        silu_fit: None,
        exp_fit: None,
        tensors,
    }
}

/// Serializes a fully quantized model, including scales and the fitted
/// approximations.
pub fn quantized_model_container(model: &QuantizedModel) -> Container {
    let mut c = model_container(&model.config, &model.weights);
    c.scales = Some(model.scales.clone());
    c.silu_fit = Some(model.silu_fit.clone());
    c.exp_fit = Some(model.exp_fit.clone());
    c
}

fn take_weight(c: &Container, name: &str) -> Result<WeightTensor> {
    let real = c.real_tensor(&format!("ref/{name}"))?.clone();
    let quant = match c.tensor(&format!("q/{name}")) {
        Some(TensorData::Quant(q)) => Some(q.clone()),
        Some(TensorData::Real(_)) => {
            return Err(Error::Parse(format!("tensor q/{name} is not integer")))
        }
        None => None,
    };
    Ok(WeightTensor { real, quant })
}

/// Rebuilds config and weights from a container, shape-checking everything.
pub fn model_from_container(c: &Container) -> Result<(MambaConfig, MambaWeights)> {
    let config = c
        .config
        .clone()
        .ok_or_else(|| Error::Parse("container carries no model config".into()))?;
    config.validate()?;
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for i in 0..config.num_blocks {
        let p = |s: &str| format!("block{i}.{s}");
        blocks.push(BlockWeights {
            norm_gamma: take_weight(c, &p("norm.gamma"))?,
            norm_beta: take_weight(c, &p("norm.beta"))?,
            in_main_w: take_weight(c, &p("in_main.w"))?,
            in_main_b: take_weight(c, &p("in_main.b"))?,
            in_gate_w: take_weight(c, &p("in_gate.w"))?,
            in_gate_b: take_weight(c, &p("in_gate.b"))?,
            conv_kernel: take_weight(c, &p("conv.kernel"))?,
            delta_w: take_weight(c, &p("delta.w"))?,
            delta_b: take_weight(c, &p("delta.b"))?,
            b_proj_w: take_weight(c, &p("b_proj.w"))?,
            b_proj_b: take_weight(c, &p("b_proj.b"))?,
            c_proj_w: take_weight(c, &p("c_proj.w"))?,
            c_proj_b: take_weight(c, &p("c_proj.b"))?,
            a_matrix: take_weight(c, &p("a"))?,
            d_skip: take_weight(c, &p("d_skip"))?,
            out_proj_w: take_weight(c, &p("out_proj.w"))?,
            out_proj_b: take_weight(c, &p("out_proj.b"))?,
        });
    }
    let weights = MambaWeights {
        patch_embed_w: take_weight(c, "patch_embed.w")?,
        patch_embed_b: take_weight(c, "patch_embed.b")?,
        blocks,
        head_w: take_weight(c, "head.w")?,
        head_b: take_weight(c, "head.b")?,
    };
    weights.shape_check(&config)?;
    Ok((config, weights))
}

/// Rebuilds a fully quantized model; errors if scales, fits, or any integer
/// twin is missing.
pub fn quantized_model_from_container(c: &Container) -> Result<QuantizedModel> {
    let (config, weights) = model_from_container(c)?;
    let scales = c
        .scales
        .clone()
        .ok_or_else(|| Error::Parse("container carries no activation scales".into()))?;
    if scales.blocks.len() != config.num_blocks {
        return Err(Error::Parse(format!(
            "scales cover {} blocks, config has {}",
            scales.blocks.len(),
            config.num_blocks
        )));
    }
    let silu_fit = c
        .silu_fit
        .clone()
        .ok_or_else(|| Error::Parse("container carries no silu fit".into()))?;
    let exp_fit = c
        .exp_fit
        .clone()
        .ok_or_else(|| Error::Parse("container carries no exp fit".into()))?;
    let mut missing = None;
    weights.for_each(|name, t| {
        if t.quant.is_none() {
            missing.get_or_insert(name.to_string());
        }
    });
    if let Some(name) = missing {
        return Err(Error::Parse(format!("tensor {name} has no quantized form")));
    }
    Ok(QuantizedModel {
        config,
        weights,
        scales,
        silu_fit,
        exp_fit,
    })
}
