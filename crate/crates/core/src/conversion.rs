//! Whole-file conversion: fixed-length chunks, each re-synthesised from its
//! own pitch and loudness condition.

use crate::audio::{resample, AudioClip};
use crate::diffusion::{sample, Conditioned, SamplerConfig, TimbreModel};
use crate::pitch::F0Params;
use crate::training::{condition_tokens, TrainError};
use crate::vq::LoudnessCodebook;

/// Chunk start offsets covering `len` samples with windows of `n` that
/// overlap by `overlap`. The final window may run past the end.
pub fn chunk_starts(len: usize, n: usize, overlap: usize) -> Vec<usize> {
    assert!(overlap < n, "overlap must be shorter than the chunk");
    let step = n - overlap;
    let mut starts = vec![0];
    while starts.last().unwrap() + n < len {
        starts.push(starts.last().unwrap() + step);
    }
    starts
}

/// Converts `input` to the model's timbre. The input is resampled to
/// `rate`, cut into `input_length` chunks (the tail zero-padded), each
/// chunk sampled with seed `seed + chunk ordinal`, and the result trimmed
/// back to the input duration. Overlapping chunks are blended linearly.
pub fn convert_clip(
    model: &TimbreModel<f32>,
    codebook: &LoudnessCodebook,
    input: &AudioClip,
    rate: u32,
    f0: &F0Params,
    sampler: &SamplerConfig,
    overlap: usize,
) -> Result<AudioClip, TrainError> {
    let clip = if input.sample_rate == rate { input.clone() } else { resample(input, rate).map_err(crate::loudness::LoudnessError::from)? };
    let n = model.config.unet.input_length;
    if overlap >= n {
        return Err(TrainError::InvalidConfig(format!("overlap {overlap} not below chunk length {n}")));
    }
    let len = clip.len();
    let starts = chunk_starts(len, n, overlap);
    let total = starts.last().unwrap() + n;
    let mut out = vec![0.0f64; total];
    let mut weight = vec![0.0f64; total];
    for (ordinal, &start) in starts.iter().enumerate() {
        let mut chunk = vec![0.0f32; n];
        let end = (start + n).min(len);
        if start < end {
            chunk[..end - start].copy_from_slice(&clip.samples[start..end]);
        }
        let tokens = condition_tokens(&AudioClip::new(chunk, rate), codebook, f0)?;
        let cfg = SamplerConfig { seed: sampler.seed.wrapping_add(ordinal as u64), ..sampler.clone() };
        let y = sample(&Conditioned { model, tokens: &tokens }, &[1, n], &cfg)?;
        for (i, &v) in y.data().iter().enumerate() {
            let w = crossfade_weight(i, n, overlap, ordinal == 0, ordinal + 1 == starts.len());
            out[start + i] += w * v as f64;
            weight[start + i] += w;
        }
    }
    let samples = out[..len]
        .iter()
        .zip(&weight)
        .map(|(&v, &w)| if w > 0.0 { (v / w) as f32 } else { 0.0 })
        .collect();
    Ok(AudioClip::new(samples, rate))
}

/// Linear ramps over the overlapped edges; interior samples weigh 1.
fn crossfade_weight(i: usize, n: usize, overlap: usize, first: bool, last: bool) -> f64 {
    if overlap == 0 {
        return 1.0;
    }
    let ramp = |k: usize| (k as f64 + 0.5) / overlap as f64;
    if !first && i < overlap {
        ramp(i)
    } else if !last && i >= n - overlap {
        ramp(n - 1 - i)
    } else {
        1.0
    }
}
