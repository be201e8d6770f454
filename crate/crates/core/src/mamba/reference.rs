//! Floating-point reference path. Architecturally identical to the integer
//! path — range normalization, ReLU in the step-size branch, the same
//! recurrence — but with exact SiLU and exponential, so quantized-vs-float
//! deltas are attributable to quantization and piecewise error alone.
//!
//! A [`RefTrace`] collects per-site activation samples; calibration derives
//! every activation scale from one traced run over the calibration frames.

use std::collections::BTreeMap;

use crate::approx::{range_norm_ref, silu_ref, NormParams};
use crate::error::Result;
use crate::qnum::RealTensor;

use super::config::MambaConfig;
use super::forward::extract_patches_real;
use super::weights::{BlockWeights, MambaWeights};

/// Activation samples grouped by site name, in deterministic order.
#[derive(Debug, Default)]
pub struct RefTrace {
    sites: BTreeMap<String, Vec<f32>>,
}

impl RefTrace {
    pub fn record(&mut self, site: &str, values: &[f32]) {
        self.sites.entry(site.to_string()).or_default().extend_from_slice(values);
    }

    pub fn samples(&self, site: &str) -> Option<&[f32]> {
        self.sites.get(site).map(|v| v.as_slice())
    }

    pub fn site_tensor(&self, site: &str) -> Option<RealTensor> {
        self.sites.get(site).map(|v| RealTensor::from_vec(v.clone()))
    }
}

fn record(trace: &mut Option<&mut RefTrace>, site: &str, values: &[f32]) {
    if let Some(t) = trace.as_deref_mut() {
        t.record(site, values);
    }
}

/// `y = W x + b` over the last dimension; rows of `x` are independent.
pub fn linear_ref(x: &[f32], rows: usize, w: &RealTensor, b: &RealTensor) -> Vec<f32> {
    let out_dim = w.shape[0];
    let in_dim = w.shape[1];
    debug_assert_eq!(x.len(), rows * in_dim);
    let mut out = Vec::with_capacity(rows * out_dim);
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let mut acc = b.data[o] as f64;
            for i in 0..in_dim {
                acc += w.data[o * in_dim + i] as f64 * xr[i] as f64;
            }
            out.push(acc as f32);
        }
    }
    out
}

/// Depthwise causal 1-D convolution: `y[t] = sum_j k[j] * x[t-j]` per channel,
/// zero left padding.
pub fn conv1d_causal_ref(tokens: &[f32], seq_len: usize, kernels: &RealTensor) -> Vec<f32> {
    let ed = kernels.shape[0];
    let k = kernels.shape[1];
    let mut out = vec![0.0f32; seq_len * ed];
    for t in 0..seq_len {
        for c in 0..ed {
            let mut acc = 0.0f64;
            for j in 0..k {
                if t >= j {
                    acc += kernels.data[c * k + j] as f64 * tokens[(t - j) * ed + c] as f64;
                }
            }
            out[t * ed + c] = acc as f32;
        }
    }
    out
}

struct BlockSites<'a> {
    prefix: String,
    trace: Option<&'a mut RefTrace>,
}

impl BlockSites<'_> {
    fn rec(&mut self, site: &str, values: &[f32]) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.record(&format!("{}.{}", self.prefix, site), values);
        }
    }
}

fn block_forward_ref(
    x_in: &[f32],
    seq_len: usize,
    config: &MambaConfig,
    block: &BlockWeights,
    sites: &mut BlockSites<'_>,
) -> Result<Vec<f32>> {
    let d = config.model_dim;
    let ed = config.inner_dim();
    let n = config.state_dim;

    let norm_params = NormParams {
        gamma: block.norm_gamma.real.data.clone(),
        beta: block.norm_beta.real.data.clone(),
        epsilon: 0.0,
    };
    let x_t = RealTensor::new(x_in.to_vec(), vec![seq_len, d])?;
    let normed = range_norm_ref(&x_t, &norm_params)?.data;
    sites.rec("norm_out", &normed);

    let gate_lin = linear_ref(&normed, seq_len, &block.in_gate_w.real, &block.in_gate_b.real);
    sites.rec("gate_lin", &gate_lin);
    let gate_act: Vec<f32> = gate_lin.iter().map(|&v| silu_ref(v as f64) as f32).collect();
    sites.rec("gate_act", &gate_act);

    let main_lin = linear_ref(&normed, seq_len, &block.in_main_w.real, &block.in_main_b.real);
    sites.rec("main_lin", &main_lin);
    let conv_out = conv1d_causal_ref(&main_lin, seq_len, &block.conv_kernel.real);
    sites.rec("conv_out", &conv_out);
    let main_act: Vec<f32> = conv_out.iter().map(|&v| silu_ref(v as f64) as f32).collect();
    sites.rec("main_act", &main_act);

    // SSM scan: per token, derive delta (ReLU), B, C; discretize; recur.
    let mut h = vec![0.0f64; ed * n];
    let a = &block.a_matrix.real.data;
    let mut ssm_out = vec![0.0f32; seq_len * ed];
    for t in 0..seq_len {
        let x_row = &main_act[t * ed..(t + 1) * ed];
        let delta_lin = linear_ref(x_row, 1, &block.delta_w.real, &block.delta_b.real);
        let delta: Vec<f32> = delta_lin.iter().map(|&v| v.max(0.0)).collect();
        sites.rec("delta_out", &delta);
        let b_t = linear_ref(x_row, 1, &block.b_proj_w.real, &block.b_proj_b.real);
        sites.rec("b_out", &b_t);
        let c_t = linear_ref(x_row, 1, &block.c_proj_w.real, &block.c_proj_b.real);
        sites.rec("c_out", &c_t);

        let mut bbar = vec![0.0f32; ed * n];
        for c in 0..ed {
            for s in 0..n {
                bbar[c * n + s] = delta[c] * b_t[s];
            }
        }
        sites.rec("bbar", &bbar);

        let mut h_now = vec![0.0f32; ed * n];
        for c in 0..ed {
            for s in 0..n {
                let abar = (delta[c] as f64 * a[c * n + s] as f64).exp();
                let hv = abar * h[c * n + s] + bbar[c * n + s] as f64 * x_row[c] as f64;
                h[c * n + s] = hv;
                h_now[c * n + s] = hv as f32;
            }
        }
        sites.rec("h_wide", &h_now);

        for c in 0..ed {
            let mut acc = 0.0f64;
            for s in 0..n {
                acc += c_t[s] as f64 * h[c * n + s];
            }
            acc += block.d_skip.real.data[c] as f64 * x_row[c] as f64;
            ssm_out[t * ed + c] = acc as f32;
        }
    }
    sites.rec("ssm_out", &ssm_out);

    let gated: Vec<f32> = gate_act.iter().zip(ssm_out.iter()).map(|(g, s)| g * s).collect();
    sites.rec("gated", &gated);
    let proj = linear_ref(&gated, seq_len, &block.out_proj_w.real, &block.out_proj_b.real);
    sites.rec("proj_out", &proj);

    let resid: Vec<f32> = x_in.iter().zip(proj.iter()).map(|(x, p)| x + p).collect();
    sites.rec("resid_out", &resid);
    Ok(resid)
}

/// Full floating-point forward pass: patchify, M blocks, mean-pool, head.
/// With a trace attached, every activation site is sampled.
pub fn reference_forward(
    frame: &RealTensor,
    config: &MambaConfig,
    weights: &MambaWeights,
    mut trace: Option<&mut RefTrace>,
) -> Result<RealTensor> {
    config.validate()?;
    weights.shape_check(config)?;
    let seq_len = config.seq_len();
    let d = config.model_dim;

    record(&mut trace, "input", &frame.data);
    let patches = extract_patches_real(frame, config)?;
    let mut tokens = linear_ref(
        &patches.data,
        seq_len,
        &weights.patch_embed_w.real,
        &weights.patch_embed_b.real,
    );
    record(&mut trace, "embed_out", &tokens);

    for (i, block) in weights.blocks.iter().enumerate() {
        let mut sites = BlockSites {
            prefix: format!("b{i}"),
            trace: trace.as_deref_mut(),
        };
        tokens = block_forward_ref(&tokens, seq_len, config, block, &mut sites)?;
    }

    // mean-pool over tokens, then the head projection
    let mut pooled = vec![0.0f32; d];
    for t in 0..seq_len {
        for i in 0..d {
            pooled[i] += tokens[t * d + i];
        }
    }
    for v in pooled.iter_mut() {
        *v /= seq_len as f32;
    }
    let out = linear_ref(&pooled, 1, &weights.head_w.real, &weights.head_b.real);
    record(&mut trace, "head_out", &out);
    RealTensor::new(out, vec![config.out_dim])
}
