//! Fundamental frequency estimation, pitch tokenization and pitch embedding.
//!
//! The estimator is a cumulative-mean-normalized difference (YIN style)
//! tracker. Its output is quantized onto a fixed 37-entry pitch table:
//! index 0 means unvoiced, indices 1..=36 cover C4 through B6.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tpdm_nn::Tensor;

use crate::audio::AudioClip;

#[derive(Debug, Error, PartialEq)]
pub enum PitchError {
    #[error("clip of {len} samples is shorter than the {window}-sample analysis window")]
    ClipTooShort { len: usize, window: usize },
    #[error("negative or non-finite frequency {0}")]
    NegativeFrequency(f64),
    #[error("pitch index {0} outside 0..=36")]
    IndexOutOfRange(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid analysis parameters: {0}")]
    InvalidParams(String),
}

pub const PITCH_CLASSES: usize = 37;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchEntry {
    pub index: usize,
    pub name: &'static str,
    pub f0: f64,
}

/// The fixed pitch table; row `i` has index `i`.
pub const PITCH_TABLE: [PitchEntry; PITCH_CLASSES] = {
    const fn e(index: usize, name: &'static str, f0: f64) -> PitchEntry {
        PitchEntry { index, name, f0 }
    }
    [
        e(0, "None", 0.0),
        e(1, "C4", 261.63),
        e(2, "C#4/Db4", 277.18),
        e(3, "D4", 293.66),
        e(4, "D#4/Eb4", 311.13),
        e(5, "E4", 329.63),
        e(6, "F4", 349.23),
        e(7, "F#4/Gb4", 369.99),
        e(8, "G4", 392.00),
        e(9, "G#4/Ab4", 415.30),
        e(10, "A4", 440.00),
        e(11, "A#4/Bb4", 466.16),
        e(12, "B4", 493.88),
        e(13, "C5", 523.25),
        e(14, "C#5/Db5", 554.37),
        e(15, "D5", 587.33),
        e(16, "D#5/Eb5", 622.25),
        e(17, "E5", 659.25),
        e(18, "F5", 698.46),
        e(19, "F#5/Gb5", 739.99),
        e(20, "G5", 783.99),
        e(21, "G#5/Ab5", 830.61),
        e(22, "A5", 880.00),
        e(23, "A#5/Bb5", 932.33),
        e(24, "B5", 987.77),
        e(25, "C6", 1046.50),
        e(26, "C#6/Db6", 1108.73),
        e(27, "D6", 1174.66),
        e(28, "D#6/Eb6", 1244.51),
        e(29, "E6", 1318.51),
        e(30, "F6", 1396.91),
        e(31, "F#6/Gb6", 1479.98),
        e(32, "G6", 1567.98),
        e(33, "G#6/Ab6", 1661.22),
        e(34, "A6", 1760.00),
        e(35, "A#6/Bb6", 1864.66),
        e(36, "B6", 1975.53),
    ]
};

/// Table lookup by name (`"A4"`, `"C#5/Db5"`, ...).
pub fn index_of(name: &str) -> Option<usize> {
    PITCH_TABLE.iter().find(|e| e.name == name).map(|e| e.index)
}

pub fn f0_of(index: usize) -> Option<f64> {
    PITCH_TABLE.get(index).map(|e| e.f0)
}

/// Table rendered as JSON rows of `{index, name, f0}`.
pub fn pitch_table_json() -> String {
    serde_json::to_string_pretty(&PITCH_TABLE[..]).expect("static table serializes")
}

/// What to do with voiced frequencies outside the table's range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfRange {
    /// Map to the nearest extreme entry (1 or 36).
    #[default]
    Clamp,
    /// Treat as unvoiced (index 0).
    Unvoiced,
}

const TIE_CENTS: f64 = 1e-9;

fn cents(a: f64, b: f64) -> f64 {
    1200.0 * (a / b).log2()
}

/// Nearest table index in cents; 0 Hz is index 0; ties go to the lower index.
pub fn tokenize_f0(f0_hz: f64) -> Result<usize, PitchError> {
    tokenize_f0_with(f0_hz, OutOfRange::Clamp)
}

pub fn tokenize_f0_with(f0_hz: f64, policy: OutOfRange) -> Result<usize, PitchError> {
    if !(f0_hz >= 0.0) || !f0_hz.is_finite() {
        return Err(PitchError::NegativeFrequency(f0_hz));
    }
    if f0_hz == 0.0 {
        return Ok(0);
    }
    if policy == OutOfRange::Unvoiced
        && (cents(f0_hz, PITCH_TABLE[1].f0) < -50.0 || cents(f0_hz, PITCH_TABLE[36].f0) > 50.0)
    {
        return Ok(0);
    }
    let mut best = 1;
    let mut best_dist = f64::INFINITY;
    for e in &PITCH_TABLE[1..] {
        let d = cents(f0_hz, e.f0).abs();
        // Distances within rounding noise count as ties and keep the lower index.
        if d < best_dist - TIE_CENTS {
            best = e.index;
            best_dist = d;
        }
    }
    Ok(best)
}

/// One-hot vector of length 37.
pub fn one_hot(index: usize) -> Result<[f32; PITCH_CLASSES], PitchError> {
    if index >= PITCH_CLASSES {
        return Err(PitchError::IndexOutOfRange(index));
    }
    let mut v = [0.0; PITCH_CLASSES];
    v[index] = 1.0;
    Ok(v)
}

/// Analysis parameters of the F0 tracker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct F0Params {
    pub hop_samples: usize,
    pub window_samples: usize,
    pub threshold: f64,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub out_of_range: OutOfRange,
}

impl Default for F0Params {
    fn default() -> Self {
        F0Params {
            hop_samples: 512,
            window_samples: 2048,
            threshold: 0.2,
            fmin_hz: 60.0,
            fmax_hz: 2100.0,
            out_of_range: OutOfRange::Clamp,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct F0Track {
    pub f0_hz: Vec<f64>,
    pub confidence: Vec<f64>,
    pub hop_samples: usize,
    pub frame_window_samples: usize,
}

impl F0Track {
    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PitchTrack {
    pub indices: Vec<usize>,
    pub hop_samples: usize,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Frames per clip: `ceil(len / hop)`.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len.div_ceil(hop)
}

/// Mean square below this (about -100 dBFS) is treated as silence.
const SILENCE_MEAN_SQUARE: f64 = 1e-10;

/// Estimates one F0 per hop. Frame `t` is centred on sample
/// `t * hop + hop / 2`; the difference function integrates over half the
/// window.
pub fn estimate_f0(clip: &AudioClip, params: &F0Params) -> Result<F0Track, PitchError> {
    let (hop, window) = (params.hop_samples, params.window_samples);
    if hop == 0 || window < 4 || !(params.fmin_hz > 0.0) || params.fmax_hz <= params.fmin_hz {
        return Err(PitchError::InvalidParams(format!("{params:?}")));
    }
    if clip.len() < window {
        return Err(PitchError::ClipTooShort { len: clip.len(), window });
    }
    let sr = clip.sample_rate as f64;
    let integration = window / 2;
    let tau_max = ((sr / params.fmin_hz).ceil() as usize).min(window / 2);
    let tau_min = ((sr / params.fmax_hz).floor() as usize).max(2);
    if tau_min + 1 >= tau_max {
        return Err(PitchError::InvalidParams(format!(
            "lag range {tau_min}..{tau_max} empty at {sr} Hz"
        )));
    }
    let span = integration + tau_max;
    let frames = frame_count(clip.len(), hop);
    let x = &clip.samples;
    let mut buf = vec![0.0f64; span];
    let mut diff = vec![0.0f64; tau_max + 1];
    let mut cmnd = vec![1.0f64; tau_max + 1];
    let mut f0 = Vec::with_capacity(frames);
    let mut confidence = Vec::with_capacity(frames);
    for t in 0..frames {
        let center = (t * hop + hop / 2) as i64;
        let start = center - (span / 2) as i64;
        for (j, b) in buf.iter_mut().enumerate() {
            let idx = start + j as i64;
            *b = if idx >= 0 && (idx as usize) < x.len() { x[idx as usize] as f64 } else { 0.0 };
        }
        let energy = buf[..integration].iter().map(|v| v * v).sum::<f64>() / integration as f64;
        if energy < SILENCE_MEAN_SQUARE {
            f0.push(0.0);
            confidence.push(0.0);
            continue;
        }
        for tau in 1..=tau_max {
            diff[tau] = (0..integration).map(|j| {
                let d = buf[j] - buf[j + tau];
                d * d
            }).sum();
        }
        let mut running = 0.0;
        for tau in 1..=tau_max {
            running += diff[tau];
            cmnd[tau] = if running > 0.0 { diff[tau] * tau as f64 / running } else { 1.0 };
        }
        let mut found = None;
        let mut tau = tau_min;
        while tau <= tau_max {
            if cmnd[tau] < params.threshold {
                while tau < tau_max && cmnd[tau + 1] < cmnd[tau] {
                    tau += 1;
                }
                found = Some(tau);
                break;
            }
            tau += 1;
        }
        match found {
            None => {
                f0.push(0.0);
                confidence.push(0.0);
            }
            Some(tau) => {
                let refined = if tau > 1 && tau < tau_max {
                    let (a, b, c) = (diff[tau - 1], diff[tau], diff[tau + 1]);
                    let denom = a - 2.0 * b + c;
                    let shift = if denom.abs() > 1e-18 { 0.5 * (a - c) / denom } else { 0.0 };
                    tau as f64 + shift.clamp(-1.0, 1.0)
                } else {
                    tau as f64
                };
                f0.push(sr / refined);
                confidence.push((1.0 - cmnd[tau]).clamp(0.0, 1.0));
            }
        }
    }
    Ok(F0Track { f0_hz: f0, confidence, hop_samples: hop, frame_window_samples: window })
}

pub fn tokenize_track(track: &F0Track, policy: OutOfRange) -> PitchTrack {
    let indices = track
        .f0_hz
        .iter()
        .map(|&f| tokenize_f0_with(f, policy).expect("tracker frequencies are non-negative"))
        .collect();
    PitchTrack { indices, hop_samples: track.hop_samples }
}

/// `estimate_f0` followed by tokenization.
pub fn pitch_track(clip: &AudioClip, params: &F0Params) -> Result<PitchTrack, PitchError> {
    Ok(tokenize_track(&estimate_f0(clip, params)?, params.out_of_range))
}

/// Rows are per-frame embeddings of width `D_pitch`.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchEmbedding {
    pub matrix: Tensor<f32>,
}

/// Row `t` is `W * one_hot(index_t)`, i.e. column `index_t` of `W: [D, 37]`.
pub fn embed_pitch(track: &PitchTrack, weight: &Tensor<f32>) -> Result<PitchEmbedding, PitchError> {
    let (d, cols) = weight
        .shape2()
        .ok_or_else(|| PitchError::DimMismatch(format!("weight dims {:?}", weight.dims())))?;
    if cols != PITCH_CLASSES {
        return Err(PitchError::DimMismatch(format!("weight has {cols} columns, expected 37")));
    }
    let mut data = Vec::with_capacity(track.len() * d);
    for &idx in &track.indices {
        if idx >= PITCH_CLASSES {
            return Err(PitchError::IndexOutOfRange(idx));
        }
        data.extend((0..d).map(|r| weight.data()[r * cols + idx]));
    }
    let matrix = Tensor::new(vec![track.len().max(1), d], data)
        .map_err(|e| PitchError::DimMismatch(e.to_string()))?;
    Ok(PitchEmbedding { matrix })
}
