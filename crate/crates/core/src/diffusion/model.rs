//! The trainable decoder: pitch and loudness embeddings feeding the U-Net.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tpdm_nn::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use super::schedule::v_target;
use super::unet::{UNet, UNetConfig};
use super::DiffusionError;
use crate::pitch::PITCH_CLASSES;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub pitch_dim: usize,
    pub loudness_dim: usize,
    pub codebook_size: usize,
    pub hop_samples: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { unet: UNetConfig::default(), pitch_dim: 64, loudness_dim: 64, codebook_size: 32, hop_samples: 512 }
    }
}

impl ModelConfig {
    /// Condition frames for one input window, `ceil(input_length / hop)`.
    pub fn frames(&self) -> usize {
        self.unet.input_length.div_ceil(self.hop_samples)
    }

    /// Copies the derived condition shape into the U-Net config.
    pub fn normalized(mut self) -> Self {
        self.unet.condition_width = self.pitch_dim + self.loudness_dim;
        self.unet.condition_timeline = self.frames();
        self
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.hop_samples == 0 || self.pitch_dim == 0 || self.loudness_dim == 0 || self.codebook_size == 0 {
            return Err(DiffusionError::InvalidConfig("hop, embedding widths and codebook size must be positive".into()));
        }
        if self.unet.condition_width != self.pitch_dim + self.loudness_dim || self.unet.condition_timeline != self.frames() {
            return Err(DiffusionError::InvalidConfig(format!(
                "condition shape [{}, {}] does not match embeddings [{}, {}]",
                self.unet.condition_width,
                self.unet.condition_timeline,
                self.pitch_dim + self.loudness_dim,
                self.frames()
            )));
        }
        self.unet.validate()
    }
}

/// Per-frame pitch and loudness codes for one input window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConditionTokens {
    pub pitch: Vec<usize>,
    pub loudness: Vec<usize>,
}

/// `[frames, pitch_dim + loudness_dim]` embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub matrix: Tensor<f32>,
}

impl ConditioningBundle {
    pub fn width(&self) -> usize {
        self.matrix.dims()[1]
    }

    pub fn rows(&self) -> usize {
        self.matrix.dims()[0]
    }
}

#[derive(Clone, Debug)]
pub struct TimbreModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub unet: UNet,
    pub pitch_embedding: ParamId,
    pub loudness_embedding: ParamId,
}

fn one_hot_columns<T: Scalar>(indices: &[usize], classes: usize) -> Result<Tensor<T>, DiffusionError> {
    let mut t = Tensor::zeros(&[classes, indices.len()]);
    for (col, &i) in indices.iter().enumerate() {
        if i >= classes {
            return Err(DiffusionError::DimMismatch(format!("code {i} outside {classes} classes")));
        }
        t.data_mut()[i * indices.len() + col] = T::one();
    }
    Ok(t)
}

impl<T: Scalar> TimbreModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, DiffusionError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pitch_embedding = store.normal("embed.pitch", &[config.pitch_dim, PITCH_CLASSES], 1.0, &mut rng);
        let loudness_embedding = store.normal("embed.loudness", &[config.loudness_dim, config.codebook_size], 1.0, &mut rng);
        let unet = UNet::new(&mut store, &config.unet, &mut rng)?;
        Ok(TimbreModel { config, store, unet, pitch_embedding, loudness_embedding })
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> TimbreModel<U> {
        TimbreModel {
            config: self.config.clone(),
            store: self.store.cast(),
            unet: self.unet.clone(),
            pitch_embedding: self.pitch_embedding,
            loudness_embedding: self.loudness_embedding,
        }
    }

    fn check_tokens(&self, tokens: &ConditionTokens) -> Result<(), DiffusionError> {
        let frames = self.config.frames();
        if tokens.pitch.len() != frames || tokens.loudness.len() != frames {
            return Err(DiffusionError::DimMismatch(format!(
                "{} pitch and {} loudness frames, expected {frames}",
                tokens.pitch.len(),
                tokens.loudness.len()
            )));
        }
        Ok(())
    }

    /// Condition `[pitch_dim + loudness_dim, frames]` recorded on the graph
    /// so the embeddings receive gradients.
    pub fn condition(&self, g: &mut Graph<'_, T>, tokens: &ConditionTokens) -> Result<Var, DiffusionError> {
        self.check_tokens(tokens)?;
        let p_hot = g.input(one_hot_columns(&tokens.pitch, PITCH_CLASSES)?);
        let l_hot = g.input(one_hot_columns(&tokens.loudness, self.config.codebook_size)?);
        let (wp, wl) = (g.param(self.pitch_embedding), g.param(self.loudness_embedding));
        let p = g.matmul(wp, p_hot, false, false)?;
        let l = g.matmul(wl, l_hot, false, false)?;
        Ok(g.concat_rows(&[p, l])?)
    }

    /// Predicted `v` for a `[1, L]` input.
    pub fn forward(&self, g: &mut Graph<'_, T>, x_t: Var, t: f64, tokens: &ConditionTokens) -> Result<Var, DiffusionError> {
        let cond = self.condition(g, tokens)?;
        self.unet.forward(g, x_t, t, cond)
    }

    pub fn predict_v(&self, x_t: &Tensor<T>, t: f64, tokens: &ConditionTokens) -> Result<Tensor<T>, DiffusionError> {
        let mut g = Graph::new(&self.store);
        let x = g.input(x_t.clone());
        let v = self.forward(&mut g, x, t, tokens)?;
        Ok(g.value(v).clone())
    }

    /// Squared-error loss node for one element at a fixed `t` and noise.
    pub fn element_loss(
        &self,
        g: &mut Graph<'_, T>,
        x0: &Tensor<T>,
        noise: &Tensor<T>,
        t: f64,
        tokens: &ConditionTokens,
    ) -> Result<Var, DiffusionError> {
        let x_t = super::schedule::q_sample(x0, noise, t)?;
        let target = g.input(v_target(x0, noise, t)?);
        let x = g.input(x_t);
        let v = self.forward(g, x, t, tokens)?;
        Ok(g.mse(v, target)?)
    }
}
