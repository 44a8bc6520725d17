//! v-objective diffusion: schedule, conditioned U-Net, training loss and
//! samplers.

pub mod model;
pub mod sampler;
pub mod schedule;
pub mod unet;

use thiserror::Error;
use tpdm_nn::NnError;

pub use model::{ConditionTokens, ConditioningBundle, ModelConfig, TimbreModel};
pub use sampler::{ddim_sample, ddpm_sample, sample, Conditioned, SamplerConfig, VelocityModel};
pub use schedule::{alpha_sigma, eps_from_v, q_sample, v_target, x0_from_v};
pub use unet::{UNet, UNetConfig};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("diffusion time {0} outside [0, 1]")]
    TOutOfRange(f64),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}
