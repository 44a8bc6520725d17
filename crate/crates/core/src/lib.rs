pub mod audio;
pub mod config;
pub mod conversion;
pub mod dataset;
pub mod diffusion;
pub mod evaluation;
pub mod loudness;
pub mod pitch;
pub mod training;
pub mod vq;
