//! Micro-GPT with swappable norm, attention, feed-forward and position
//! components.

pub mod attention;
pub mod config;
pub mod gpt;
pub mod norm;

pub use config::{AttnKind, FfnKind, ModelConfig, NormKind, PosKind};
pub use gpt::{lm_loss, param_specs, ForwardOptions, ForwardOutput, Gpt, Init, NormTap, ParamSpec};
pub use norm::{norm_apply, NormParams};
