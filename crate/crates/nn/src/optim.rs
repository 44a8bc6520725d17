use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// untouched; call [`ParamStore::zero_grad`] before the next accumulation.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let one = T::one();
        for p in store.iter_mut() {
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = T::from_f64(1.0 - self.beta1.powi(t));
            let bc2 = T::from_f64(1.0 - self.beta2.powi(t));
            let lr = T::from_f64(self.lr);
            let eps = T::from_f64(self.eps);
            let g = p.grad.data();
            let m = p.adam_m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (one - b1) * gi;
            }
            let v = p.adam_v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            }
            let (m, v) = (p.adam_m.data(), p.adam_v.data());
            for ((w, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
