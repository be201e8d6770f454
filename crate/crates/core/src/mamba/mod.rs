//! The Mamba block computation graph: patching, projections, causal
//! convolution, discretization, the scale-aware quantized SSM scan, gating,
//! and residuals — with a floating-point reference path as oracle and a
//! binary container format for model I/O.

mod config;
mod container;
mod forward;
mod quantize;
mod reference;
mod weights;

pub use config::MambaConfig;
pub use container::{
    model_container, model_from_container, quantized_model_container,
    quantized_model_from_container, Container, TensorData, FORMAT_VERSION, MAGIC,
};
pub use forward::{
    add_rescaled, conv1d_causal, extract_patches, extract_patches_real, linear, mean_pool, pooled_head,
    ssm_step, SSMState, SsmContext,
};
pub use quantize::{
    deploy_fits, discretize, mamba_block_forward, model_forward, quantize_model,
    quantize_model_with_fits, ssm_scan, PreparedBlock, DEPLOY_FIT_MAX_ERR,
    PreparedModel, QuantizedModel,
};
pub use reference::{conv1d_causal_ref, linear_ref, reference_forward, RefTrace};
pub use weights::{
    random_frames, random_weights, zero_weights, BlockScales, BlockWeights, MambaWeights, ModelScales,
    WeightTensor, ABAR_SCALE_EXP,
};
