//! Conditioned 1-D U-Net predicting `v` from `(x_t, t, condition)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tpdm_nn::{group_count, Conv1d, Graph, GroupNorm, Linear, ParamStore, Result as NnResult, Scalar, SelfAttention, Tensor, Var};

use super::DiffusionError;

pub const TIME_FEATURES: usize = 64;
const MAX_GROUPS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub input_length: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub downsample_factors: Vec<usize>,
    /// Encoder/decoder levels (0 = full resolution) that get self-attention.
    pub attention_levels: Vec<usize>,
    /// Self-attention between the two bottleneck blocks.
    pub mid_attention: bool,
    pub attention_heads: usize,
    pub condition_width: usize,
    pub condition_timeline: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_length: 1 << 14,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4, 4],
            downsample_factors: vec![4, 4, 4, 4],
            attention_levels: vec![3],
            mid_attention: true,
            attention_heads: 4,
            condition_width: 128,
            condition_timeline: 32,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: String| Err(DiffusionError::InvalidConfig(m));
        let levels = self.channel_multipliers.len();
        if levels == 0 || self.downsample_factors.len() != levels {
            return bad(format!(
                "{levels} channel multipliers vs {} downsample factors",
                self.downsample_factors.len()
            ));
        }
        if self.base_channels == 0 || self.channel_multipliers.contains(&0) || self.downsample_factors.contains(&0) {
            return bad("channel counts and factors must be positive".into());
        }
        let total: usize = self.downsample_factors.iter().product();
        if self.input_length == 0 || self.input_length % total != 0 {
            return bad(format!("input length {} not divisible by {total}", self.input_length));
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= levels) {
            return bad(format!("attention level {l} beyond {levels} levels"));
        }
        let mut attn_channels: Vec<usize> =
            self.attention_levels.iter().map(|&l| self.channels(l)).collect();
        if self.mid_attention {
            attn_channels.push(self.channels(levels - 1));
        }
        if self.attention_heads == 0 || attn_channels.iter().any(|c| c % self.attention_heads != 0) {
            return bad(format!("{} heads do not divide attention channels {attn_channels:?}", self.attention_heads));
        }
        if self.condition_width == 0 || self.condition_timeline == 0 {
            return bad("condition width and timeline must be positive".into());
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Signal length at `level`; `levels()` is the bottleneck.
    pub fn length_at(&self, level: usize) -> usize {
        self.input_length / self.downsample_factors[..level].iter().product::<usize>()
    }

    fn time_width(&self) -> usize {
        4 * self.base_channels
    }
}

/// Sinusoidal features of `1000 t`, half sines then half cosines.
pub fn time_features(t: f64) -> Vec<f64> {
    let half = TIME_FEATURES / 2;
    let mut out = vec![0.0; TIME_FEATURES];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv1d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv1d,
    skip: Option<Conv1d>,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        time_width: usize,
        rng: &mut R,
    ) -> Self {
        ResBlock {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c_in, group_count(c_in, MAX_GROUPS)),
            conv1: Conv1d::same(store, &format!("{name}.conv1"), c_in, c_out, 3, rng),
            time: Linear::new(store, &format!("{name}.time"), time_width, c_out, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c_out, group_count(c_out, MAX_GROUPS)),
            conv2: Conv1d::same(store, &format!("{name}.conv2"), c_out, c_out, 3, rng),
            skip: (c_in != c_out).then(|| Conv1d::same(store, &format!("{name}.skip"), c_in, c_out, 1, rng)),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, temb: Var) -> NnResult<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h)?;
        let h = self.conv1.forward(g, h)?;
        let bias = self.time.forward(g, temb)?;
        let h = g.add_row_bias(h, bias)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    block: ResBlock,
    attn: Option<SelfAttention>,
    down: Conv1d,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv1d,
    block: ResBlock,
    attn: Option<SelfAttention>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    time_in: Linear,
    time_out: Linear,
    in_conv: Conv1d,
    encoder: Vec<EncoderLevel>,
    mid1: ResBlock,
    mid_attn: Option<SelfAttention>,
    mid2: ResBlock,
    decoder: Vec<DecoderLevel>,
    out_norm: GroupNorm,
    out_conv: Conv1d,
}

impl UNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &UNetConfig,
        rng: &mut R,
    ) -> Result<Self, DiffusionError> {
        config.validate()?;
        let tw = config.time_width();
        let c0 = config.base_channels;
        let cw = config.condition_width;
        let heads = config.attention_heads;
        let time_in = Linear::new(store, "time.in", TIME_FEATURES, tw, rng);
        let time_out = Linear::new(store, "time.out", tw, tw, rng);
        let in_conv = Conv1d::same(store, "in_conv", 1, c0, 7, rng);
        let mut encoder = Vec::new();
        let mut c_prev = c0;
        for level in 0..config.levels() {
            let c = config.channels(level);
            let f = config.downsample_factors[level];
            let name = format!("enc{level}");
            let block = ResBlock::new(store, &format!("{name}.block"), c_prev + cw, c, tw, rng);
            let attn = if config.attention_levels.contains(&level) {
                Some(SelfAttention::new(store, &format!("{name}.attn"), c, heads, rng)?)
            } else {
                None
            };
            let down = Conv1d::new(store, &format!("{name}.down"), c, c, f, f, 0, rng);
            encoder.push(EncoderLevel { block, attn, down });
            c_prev = c;
        }
        let mid1 = ResBlock::new(store, "mid.block1", c_prev, c_prev, tw, rng);
        let mid_attn = if config.mid_attention {
            Some(SelfAttention::new(store, "mid.attn", c_prev, heads, rng)?)
        } else {
            None
        };
        let mid2 = ResBlock::new(store, "mid.block2", c_prev, c_prev, tw, rng);
        let mut decoder = Vec::new();
        let mut c_cur = c_prev;
        for level in (0..config.levels()).rev() {
            let c = config.channels(level);
            let name = format!("dec{level}");
            let up = Conv1d::same(store, &format!("{name}.up"), c_cur, c_cur, 3, rng);
            let block = ResBlock::new(store, &format!("{name}.block"), c_cur + c, c, tw, rng);
            let attn = if config.attention_levels.contains(&level) {
                Some(SelfAttention::new(store, &format!("{name}.attn"), c, heads, rng)?)
            } else {
                None
            };
            decoder.push(DecoderLevel { up, block, attn });
            c_cur = c;
        }
        let out_norm = GroupNorm::new(store, "out.norm", c0, group_count(c0, MAX_GROUPS));
        let out_conv = Conv1d::same(store, "out.conv", c0, 1, 3, rng).zeroed(store);
        Ok(UNet {
            config: config.clone(),
            time_in,
            time_out,
            in_conv,
            encoder,
            mid1,
            mid_attn,
            mid2,
            decoder,
            out_norm,
            out_conv,
        })
    }

    /// The zero-initialized output convolution.
    pub fn output_conv(&self) -> &Conv1d {
        &self.out_conv
    }

    /// `x_t: [1, L]`, `cond: [condition_width, condition_timeline]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x_t: Var, t: f64, cond: Var) -> Result<Var, DiffusionError> {
        let cfg = &self.config;
        if g.dims(x_t) != [1, cfg.input_length] {
            return Err(DiffusionError::DimMismatch(format!(
                "input {:?}, expected [1, {}]",
                g.dims(x_t),
                cfg.input_length
            )));
        }
        if g.dims(cond) != [cfg.condition_width, cfg.condition_timeline] {
            return Err(DiffusionError::DimMismatch(format!(
                "condition {:?}, expected [{}, {}]",
                g.dims(cond),
                cfg.condition_width,
                cfg.condition_timeline
            )));
        }
        let feats = Tensor::new(vec![1, TIME_FEATURES], time_features(t).into_iter().map(T::from_f64).collect())?;
        let feats = g.input(feats);
        let temb = self.time_in.forward(g, feats)?;
        let temb = g.silu(temb)?;
        let temb = self.time_out.forward(g, temb)?;
        // Every block consumes the embedding through its own projection.
        let temb = g.silu(temb)?;

        let mut h = self.in_conv.forward(g, x_t)?;
        let mut skips = Vec::with_capacity(cfg.levels());
        for (level, enc) in self.encoder.iter().enumerate() {
            let c = g.resample_nearest(cond, cfg.length_at(level))?;
            h = g.concat_rows(&[h, c])?;
            h = enc.block.forward(g, h, temb)?;
            if let Some(a) = &enc.attn {
                h = a.forward(g, h)?;
            }
            skips.push(h);
            h = enc.down.forward(g, h)?;
        }
        h = self.mid1.forward(g, h, temb)?;
        if let Some(a) = &self.mid_attn {
            h = a.forward(g, h)?;
        }
        h = self.mid2.forward(g, h, temb)?;
        for (dec, level) in self.decoder.iter().zip((0..cfg.levels()).rev()) {
            h = g.resample_nearest(h, cfg.length_at(level))?;
            h = dec.up.forward(g, h)?;
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_rows(&[h, skip])?;
            h = dec.block.forward(g, h, temb)?;
            if let Some(a) = &dec.attn {
                h = a.forward(g, h)?;
            }
        }
        let h = self.out_norm.forward(g, h)?;
        let h = g.silu(h)?;
        Ok(self.out_conv.forward(g, h)?)
    }
}
