//! Central finite-difference verification of recorded gradients.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen elements per parameter.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, max_elements: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub rel_error: f64,
    /// Largest `|analytic - numeric|` over the checked elements.
    pub max_abs_error: f64,
    /// Largest gradient magnitude seen, analytic or numeric.
    pub max_magnitude: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    /// Largest absolute error over all parameters, normalised by the
    /// largest gradient magnitude anywhere in the network. Unlike
    /// [`Self::max_rel_error`] this is not dominated by tensors whose true
    /// gradient is near zero, where a low-precision numeric estimate is
    /// pure rounding noise.
    pub fn global_rel_error(&self) -> f64 {
        let mag = self.params.iter().map(|p| p.max_magnitude).fold(0.0, f64::max);
        let err = self.params.iter().map(|p| p.max_abs_error).fold(0.0, f64::max);
        if mag == 0.0 {
            0.0
        } else {
            err / mag
        }
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares backward-pass gradients of the scalar built by `loss` against
/// central differences.
///
/// The error for a parameter is `max|analytic - numeric| / max(max|analytic|,
/// max|numeric|)` over the checked elements; parameters whose gradients are
/// both exactly zero report 0.
pub fn check_gradients<T, F>(store: &mut ParamStore<T>, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new(store);
        let out = loss(&mut g)?;
        Ok(g.value(out).data()[0].to_f64())
    };
    let analytic = {
        let mut g = Graph::new(store);
        let out = loss(&mut g)?;
        g.backward(out)?
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { params: Vec::new() };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.len();
        let picks: Vec<usize> = match opts.max_elements {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut max_diff = 0.0f64;
        let mut max_mag = 0.0f64;
        for &i in &picks {
            let orig = store.get(id).value.data()[i];
            let h = T::from_f64(opts.step);
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            // The realised step can differ from `step` after rounding to T.
            let width = ((orig + h) - (orig - h)).to_f64();
            let numeric = (up - down) / width;
            let exact = analytic.get(id).map(|g| g.data()[i].to_f64()).unwrap_or(0.0);
            max_diff = max_diff.max((numeric - exact).abs());
            max_mag = max_mag.max(numeric.abs()).max(exact.abs());
        }
        let rel_error = if max_mag == 0.0 { 0.0 } else { max_diff / max_mag };
        report.params.push(ParamCheck {
            name: store.get(id).name.clone(),
            elements: picks.len(),
            rel_error,
            max_abs_error: max_diff,
            max_magnitude: max_mag,
        });
    }
    Ok(report)
}
