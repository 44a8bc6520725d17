//! DDIM (eta = 0) and ancestral DDPM (eta = 1) sampling on a uniform time
//! grid from t = 1 to t = 0.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tpdm_nn::{Scalar, Tensor};

use super::model::{ConditionTokens, TimbreModel};
use super::schedule::alpha_sigma;
use super::DiffusionError;

/// Anything that predicts `v` from `(x_t, t)`.
pub trait VelocityModel<T: Scalar> {
    fn predict_v(&self, x_t: &Tensor<T>, t: f64) -> Result<Tensor<T>, DiffusionError>;
}

impl<T: Scalar, F> VelocityModel<T> for F
where
    F: Fn(&Tensor<T>, f64) -> Result<Tensor<T>, DiffusionError>,
{
    fn predict_v(&self, x_t: &Tensor<T>, t: f64) -> Result<Tensor<T>, DiffusionError> {
        self(x_t, t)
    }
}

/// A model bound to one window's condition.
pub struct Conditioned<'a, T: Scalar> {
    pub model: &'a TimbreModel<T>,
    pub tokens: &'a ConditionTokens,
}

impl<T: Scalar> VelocityModel<T> for Conditioned<'_, T> {
    fn predict_v(&self, x_t: &Tensor<T>, t: f64) -> Result<Tensor<T>, DiffusionError> {
        self.model.predict_v(x_t, t, self.tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// 0 is deterministic DDIM, 1 is ancestral DDPM.
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, eta: 0.0, seed: 0 }
    }
}

fn normal_tensor<T: Scalar>(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(dims, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z)
    })
}

/// Runs the reverse process from seeded standard-normal noise of `dims`.
pub fn sample<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    dims: &[usize],
    cfg: &SamplerConfig,
) -> Result<Tensor<T>, DiffusionError> {
    if cfg.steps == 0 {
        return Err(DiffusionError::InvalidConfig("sampler needs at least one step".into()));
    }
    if !(cfg.eta >= 0.0) {
        return Err(DiffusionError::InvalidConfig(format!("eta {} must be non-negative", cfg.eta)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x: Tensor<T> = normal_tensor(dims, &mut rng);
    for i in 0..cfg.steps {
        let t = 1.0 - i as f64 / cfg.steps as f64;
        let t_next = 1.0 - (i + 1) as f64 / cfg.steps as f64;
        let (a, s) = alpha_sigma(t)?;
        let v = model.predict_v(&x, t)?;
        if v.dims() != x.dims() {
            return Err(DiffusionError::DimMismatch(format!("model returned {:?} for {:?}", v.dims(), x.dims())));
        }
        if i + 1 == cfg.steps {
            for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
                *xi = T::from_f64(a * xi.to_f64() - s * vi.to_f64());
            }
            break;
        }
        let (a_n, s_n) = alpha_sigma(t_next)?;
        let ddim_sigma = cfg.eta * (s_n * s_n / (s * s)).sqrt() * (1.0 - a * a / (a_n * a_n)).max(0.0).sqrt();
        let adjusted = (s_n * s_n - ddim_sigma * ddim_sigma).max(0.0).sqrt();
        let noise: Option<Tensor<T>> = (ddim_sigma > 0.0).then(|| normal_tensor(dims, &mut rng));
        for (j, (xi, &vi)) in x.data_mut().iter_mut().zip(v.data()).enumerate() {
            let (xf, vf) = (xi.to_f64(), vi.to_f64());
            let pred = a * xf - s * vf;
            let eps = s * xf + a * vf;
            let mut next = pred * a_n + eps * adjusted;
            if let Some(n) = &noise {
                next += ddim_sigma * n.data()[j].to_f64();
            }
            *xi = T::from_f64(next);
        }
    }
    Ok(x)
}

pub fn ddim_sample<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    dims: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Tensor<T>, DiffusionError> {
    sample(model, dims, &SamplerConfig { steps, eta: 0.0, seed })
}

pub fn ddpm_sample<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    dims: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Tensor<T>, DiffusionError> {
    sample(model, dims, &SamplerConfig { steps, eta: 1.0, seed })
}
