//! LLaMA-style decoder built from switchable activation-sharing layers.

mod config;
mod forward;
mod gradcheck;
mod params;
mod share;

pub use config::{param_count, ModelConfig, ShareKind, PRESETS};
pub use forward::{
    bind_params, check_tokens, forward, logits, window_loss, ForwardPass, LayerTrace, LayerVars,
    ParamVars, ShareCache,
};
pub use gradcheck::check_model_gradients;
pub use params::{param_shapes, LayerParams, ModelParams};
pub use share::ShareSet;
