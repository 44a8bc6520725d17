//! Cosine noise schedule and the v-parametrization identities.

use tpdm_nn::{Scalar, Tensor};

use super::DiffusionError;

/// `(alpha, sigma) = (cos(pi t / 2), sin(pi t / 2))`, exact at both ends.
pub fn alpha_sigma(t: f64) -> Result<(f64, f64), DiffusionError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DiffusionError::TOutOfRange(t));
    }
    Ok(if t == 0.0 {
        (1.0, 0.0)
    } else if t == 1.0 {
        (0.0, 1.0)
    } else {
        let a = std::f64::consts::FRAC_PI_2 * t;
        (a.cos(), a.sin())
    })
}

/// `p * a + q * b` elementwise, evaluated in double precision.
fn combine<T: Scalar>(p: f64, a: &Tensor<T>, q: f64, b: &Tensor<T>, op: &str) -> Result<Tensor<T>, DiffusionError> {
    if a.dims() != b.dims() {
        return Err(DiffusionError::DimMismatch(format!("{op}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| T::from_f64(p * x.to_f64() + q * y.to_f64())).collect();
    Ok(Tensor::new(a.dims().to_vec(), data)?)
}

/// `x_t = alpha x0 + sigma noise`.
pub fn q_sample<T: Scalar>(x0: &Tensor<T>, noise: &Tensor<T>, t: f64) -> Result<Tensor<T>, DiffusionError> {
    let (a, s) = alpha_sigma(t)?;
    combine(a, x0, s, noise, "q_sample")
}

/// `v = alpha noise - sigma x0`.
pub fn v_target<T: Scalar>(x0: &Tensor<T>, noise: &Tensor<T>, t: f64) -> Result<Tensor<T>, DiffusionError> {
    let (a, s) = alpha_sigma(t)?;
    combine(a, noise, -s, x0, "v_target")
}

/// `x0 = alpha x_t - sigma v`.
pub fn x0_from_v<T: Scalar>(x_t: &Tensor<T>, v: &Tensor<T>, t: f64) -> Result<Tensor<T>, DiffusionError> {
    let (a, s) = alpha_sigma(t)?;
    combine(a, x_t, -s, v, "x0_from_v")
}

/// `noise = sigma x_t + alpha v`.
pub fn eps_from_v<T: Scalar>(x_t: &Tensor<T>, v: &Tensor<T>, t: f64) -> Result<Tensor<T>, DiffusionError> {
    let (a, s) = alpha_sigma(t)?;
    combine(s, x_t, a, v, "eps_from_v")
}
