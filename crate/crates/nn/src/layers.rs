//! Parameterised layers built on [`Graph`] primitives.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.uniform(format!("{name}.weight"), &[out_features, in_features], in_features, rng),
            bias: store.uniform(format!("{name}.bias"), &[out_features], in_features, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    /// Stride-1 convolution with "same" padding (odd kernels only).
    pub fn same<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Self::new(store, name, in_ch, out_ch, kernel, 1, kernel / 2, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel;
        Conv1d {
            weight: store.uniform(format!("{name}.weight"), &[out_ch, in_ch, kernel], fan_in, rng),
            bias: store.uniform(format!("{name}.bias"), &[out_ch], fan_in, rng),
            stride,
            padding,
        }
    }

    /// Same layer with weights and bias set to zero.
    pub fn zeroed<T: Scalar>(self, store: &mut ParamStore<T>) -> Self {
        store.get_mut(self.weight).value.fill(T::zero());
        store.get_mut(self.bias).value.fill(T::zero());
        self
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv1d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "{channels} channels not divisible into {groups} groups");
        GroupNorm {
            gamma: store.ones(format!("{name}.gamma"), &[channels]),
            beta: store.zeros(format!("{name}.beta"), &[channels]),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, gm, bt, self.groups, self.eps)
    }
}

/// Largest group count up to `max` dividing `channels`.
pub fn group_count(channels: usize, max: usize) -> usize {
    (1..=max.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Multi-head self-attention over the time axis of a `[C, L]` signal,
/// pre-normalised, with a residual connection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub norm: GroupNorm,
    pub qkv: Conv1d,
    pub proj: Conv1d,
    pub heads: usize,
    pub channels: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(dim_err("self_attention", format!("{channels} channels over {heads} heads")));
        }
        Ok(SelfAttention {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, group_count(channels, 8)),
            qkv: Conv1d::same(store, &format!("{name}.qkv"), channels, 3 * channels, 1, rng),
            proj: Conv1d::same(store, &format!("{name}.proj"), channels, channels, 1, rng),
            heads,
            channels,
        })
    }

    fn attend<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        match g.dims(x) {
            [c, _] if *c == self.channels => {}
            d => return Err(dim_err("self_attention", format!("input {d:?}, expected {} channels", self.channels))),
        }
        let h = self.norm.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let head_dim = self.channels / self.heads;
        let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let lo = head * head_dim;
            let q = g.slice_rows(qkv, lo, lo + head_dim)?;
            let k = g.slice_rows(qkv, self.channels + lo, self.channels + lo + head_dim)?;
            let v = g.slice_rows(qkv, 2 * self.channels + lo, 2 * self.channels + lo + head_dim)?;
            // scores[i, j] = <q_i, k_j>; rows are query positions.
            let scores = g.matmul(q, k, true, false)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax_rows(scores)?;
            weights.push(attn);
            outs.push(g.matmul(v, attn, false, true)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs)? };
        let out = self.proj.forward(g, merged)?;
        Ok((g.add(x, out)?, weights))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.attend(g, x).map(|(y, _)| y)
    }

    /// Runs the block outside of any training graph.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(store);
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    /// Per-head `[L, L]` attention weight matrices for `x`.
    pub fn attention_weights<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new(store);
        let xv = g.input(x.clone());
        let (_, w) = self.attend(&mut g, xv)?;
        Ok(w.into_iter().map(|v| g.value(v).clone()).collect())
    }
}
