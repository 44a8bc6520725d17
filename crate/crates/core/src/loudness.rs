//! Segment loudness in LKFS (K-weighted, ungated), its quantization through
//! a codebook and its expansion onto the pitch frame timeline.

use thiserror::Error;
use tpdm_nn::Tensor;

use crate::audio::{resample, AudioClip, AudioError};
use crate::vq::{Codebook, JointCodebook, LoudnessCodebook};

pub const SEGMENTS: usize = 16;
pub const FLOOR_LKFS: f64 = -70.0;
pub const WEIGHTING_RATE: u32 = 48_000;

#[derive(Debug, Error)]
pub enum LoudnessError {
    #[error("K-weighting needs {WEIGHTING_RATE} Hz audio, got {0} Hz")]
    WrongSampleRate(u32),
    #[error("no samples to measure")]
    EmptyInput,
    #[error("clip of {len} samples is too short (need at least {min})")]
    ClipTooShort { len: usize, min: usize },
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("index {index} out of range for {k} embeddings")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Second-order IIR section, `a0` normalized to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Direct form I over the whole sequence from a zero state.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = b0 * x0 + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
                (x2, x1, y2, y1) = (x1, x0, y1, y0);
                y0
            })
            .collect()
    }

    /// Magnitude response at `freq` Hz for sample rate `rate`.
    pub fn magnitude(&self, freq: f64, rate: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq / rate;
        let eval = |c: &[f64; 3]| {
            let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
            let im = -c[1] * w.sin() - c[2] * (2.0 * w).sin();
            (re * re + im * im).sqrt()
        };
        eval(&self.b) / eval(&self.a)
    }
}

/// The standard's two K-weighting stages at 48 kHz: a high shelf followed by
/// a high-pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KWeightingFilter {
    pub shelf: Biquad,
    pub high_pass: Biquad,
}

pub const K_WEIGHTING: KWeightingFilter = KWeightingFilter {
    shelf: Biquad {
        b: [1.53512485958697, -2.69169618940638, 1.19839281085285],
        a: [1.0, -1.69065929318241, 0.73248077421585],
    },
    high_pass: Biquad { b: [1.0, -2.0, 1.0], a: [1.0, -1.99004745483398, 0.99007225036621] },
};

impl KWeightingFilter {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.high_pass.apply(&self.shelf.apply(x))
    }

    pub fn gain_db(&self, freq: f64) -> f64 {
        let r = WEIGHTING_RATE as f64;
        20.0 * (self.shelf.magnitude(freq, r) * self.high_pass.magnitude(freq, r)).log10()
    }
}

pub fn k_weight(clip: &AudioClip) -> Result<Vec<f64>, LoudnessError> {
    if clip.sample_rate != WEIGHTING_RATE {
        return Err(LoudnessError::WrongSampleRate(clip.sample_rate));
    }
    let x: Vec<f64> = clip.samples.iter().map(|&s| s as f64).collect();
    Ok(K_WEIGHTING.apply(&x))
}

/// `-0.691 + 10 log10(mean square)` of an already K-weighted mono signal,
/// floored at -70 LKFS.
pub fn integrated_loudness(weighted: &[f64]) -> Result<f64, LoudnessError> {
    if weighted.is_empty() {
        return Err(LoudnessError::EmptyInput);
    }
    let ms = weighted.iter().map(|v| v * v).sum::<f64>() / weighted.len() as f64;
    if ms <= 0.0 {
        return Ok(FLOOR_LKFS);
    }
    Ok((-0.691 + 10.0 * ms.log10()).max(FLOOR_LKFS))
}

/// Loudness of a clip at any rate; the clip is resampled to 48 kHz first.
pub fn clip_loudness(clip: &AudioClip) -> Result<f64, LoudnessError> {
    if clip.is_empty() {
        return Err(LoudnessError::EmptyInput);
    }
    let at_rate = if clip.sample_rate == WEIGHTING_RATE { clip.clone() } else { resample(clip, WEIGHTING_RATE)? };
    if at_rate.is_empty() {
        return Err(LoudnessError::EmptyInput);
    }
    integrated_loudness(&k_weight(&at_rate)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoudnessVector {
    pub values: [f64; SEGMENTS],
}

/// Boundaries of the 16 segments: `floor(N / 16)` samples each, the
/// remainder going to the last.
pub fn segment_bounds(len: usize) -> [(usize, usize); SEGMENTS] {
    let seg = len / SEGMENTS;
    std::array::from_fn(|i| (i * seg, if i + 1 == SEGMENTS { len } else { (i + 1) * seg }))
}

/// Per-segment loudness; each segment is measured independently.
pub fn segment_loudness(clip: &AudioClip) -> Result<LoudnessVector, LoudnessError> {
    if clip.len() < SEGMENTS {
        return Err(LoudnessError::ClipTooShort { len: clip.len(), min: SEGMENTS });
    }
    let mut values = [FLOOR_LKFS; SEGMENTS];
    for (v, (lo, hi)) in values.iter_mut().zip(segment_bounds(clip.len())) {
        let part = AudioClip::new(clip.samples[lo..hi].to_vec(), clip.sample_rate);
        if part.samples.iter().all(|&s| s == 0.0) {
            continue;
        }
        *v = clip_loudness(&part)?;
    }
    Ok(LoudnessVector { values })
}

pub fn encode_loudness(vector: &LoudnessVector, codebook: &Codebook) -> Result<[usize; SEGMENTS], LoudnessError> {
    if codebook.k() == 0 {
        return Err(LoudnessError::EmptyCodebook);
    }
    Ok(vector.values.map(|v| codebook.encode(v)))
}

/// Joint mode: the whole vector maps to one code, repeated for every segment.
pub fn encode_loudness_joint(
    vector: &LoudnessVector,
    codebook: &JointCodebook,
) -> Result<[usize; SEGMENTS], LoudnessError> {
    let j = codebook.encode(&vector.values).map_err(|e| LoudnessError::DimMismatch(e.to_string()))?;
    Ok([j; SEGMENTS])
}

pub fn encode_with(vector: &LoudnessVector, codebook: &LoudnessCodebook) -> Result<[usize; SEGMENTS], LoudnessError> {
    match codebook {
        LoudnessCodebook::Scalar(c) => encode_loudness(vector, c),
        LoudnessCodebook::Joint(c) => encode_loudness_joint(vector, c),
    }
}

/// `aligned[t] = indices[floor(t * 16 / target_len)]`.
pub fn align_to_timeline(indices: &[usize; SEGMENTS], target_len: usize) -> Vec<usize> {
    (0..target_len).map(|t| indices[t * SEGMENTS / target_len]).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoudnessTrack {
    pub segment_indices: [usize; SEGMENTS],
    pub aligned_indices: Vec<usize>,
}

pub fn loudness_track(
    clip: &AudioClip,
    codebook: &LoudnessCodebook,
    frames: usize,
) -> Result<(LoudnessVector, LoudnessTrack), LoudnessError> {
    let vector = segment_loudness(clip)?;
    let segment_indices = encode_with(&vector, codebook)?;
    let aligned_indices = align_to_timeline(&segment_indices, frames);
    Ok((vector, LoudnessTrack { segment_indices, aligned_indices }))
}

/// Row `t` is column `aligned[t]` of `W: [D_loud, K]`.
pub fn embed_loudness(aligned: &[usize], weight: &Tensor<f32>) -> Result<Tensor<f32>, LoudnessError> {
    let (d, k) = weight
        .shape2()
        .ok_or_else(|| LoudnessError::DimMismatch(format!("weight dims {:?}", weight.dims())))?;
    let mut data = Vec::with_capacity(aligned.len() * d);
    for &idx in aligned {
        if idx >= k {
            return Err(LoudnessError::IndexOutOfRange { index: idx, k });
        }
        data.extend((0..d).map(|r| weight.data()[r * k + idx]));
    }
    Tensor::new(vec![aligned.len(), d], data).map_err(|e| LoudnessError::DimMismatch(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_reads_floor() {
        assert_eq!(integrated_loudness(&[0.0; 100]).unwrap(), -70.0);
        assert!(matches!(integrated_loudness(&[]), Err(LoudnessError::EmptyInput)));
    }

    #[test]
    fn wrong_rate_rejected() {
        let clip = AudioClip::silence(100, 44_100);
        assert!(matches!(k_weight(&clip), Err(LoudnessError::WrongSampleRate(44_100))));
    }

    #[test]
    fn segment_bounds_cover_clip() {
        let b = segment_bounds(1 << 18);
        assert_eq!(b[0], (0, 16_384));
        assert_eq!(b[15].1, 1 << 18);
        let b = segment_bounds(100);
        assert_eq!(b[15], (90, 100));
        assert!(b.windows(2).all(|w| w[0].1 == w[1].0));
    }

    #[test]
    fn alignment_examples() {
        let idx: [usize; 16] = std::array::from_fn(|i| i * 2);
        assert_eq!(align_to_timeline(&idx, 16), idx.to_vec());
        let a = align_to_timeline(&idx, 512);
        for (t, v) in a.iter().enumerate() {
            assert_eq!(*v, idx[t / 32]);
        }
        let a = align_to_timeline(&idx, 20);
        assert_eq!(a[19], idx[15]);
        assert_eq!(a[1], idx[0]);
    }

    #[test]
    fn embedding_lookup() {
        let w = Tensor::from_fn(&[3, 5], |i| i as f32);
        let e = embed_loudness(&[4, 4, 0], &w).unwrap();
        assert_eq!(e.dims(), &[3, 3]);
        assert_eq!(&e.data()[0..3], &[4.0, 9.0, 14.0]);
        assert_eq!(&e.data()[0..3], &e.data()[3..6]);
        assert!(matches!(embed_loudness(&[5], &w), Err(LoudnessError::IndexOutOfRange { index: 5, k: 5 })));
    }
}
