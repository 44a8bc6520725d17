//! Source-versus-converted comparisons: loudness curves and their
//! difference, magnitude spectrograms and pitch-token agreement.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{resample, AudioClip, AudioError};
use crate::loudness::{integrated_loudness, k_weight, LoudnessError, WEIGHTING_RATE};
use crate::pitch::{pitch_track, F0Params, PitchError};

pub const REPORT_VERSION: u32 = 1;
pub const CURVES_CSV_HEADER: &str = "time_s,source_lkfs,converted_lkfs,difference_lu";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("clip of {len} samples is shorter than the {min}-sample window")]
    ClipTooShort { len: usize, min: usize },
    #[error("loudness curves are on different time grids")]
    GridMismatch,
    #[error("durations differ: {source_secs:.4} s vs {converted_secs:.4} s")]
    DurationMismatch { source_secs: f64, converted_secs: f64 },
    #[error("invalid analysis parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Loudness(#[from] LoudnessError),
    #[error(transparent)]
    Pitch(#[from] PitchError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoudnessCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub window_s: f64,
    pub hop_s: f64,
}

impl LoudnessCurve {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Number of whole windows: `floor((duration - window) / hop) + 1`.
pub fn window_count(duration_s: f64, window_s: f64, hop_s: f64) -> usize {
    // The epsilon keeps exact multiples (2.0 s / 0.1 s) from rounding down.
    ((duration_s - window_s) / hop_s + 1e-9).floor() as usize + 1
}

/// K-weighted loudness of each sliding window, floored at -70 LKFS. Times
/// are window centres.
pub fn loudness_curve(clip: &AudioClip, window_s: f64, hop_s: f64) -> Result<LoudnessCurve, EvalError> {
    if !(window_s > 0.0 && hop_s > 0.0) {
        return Err(EvalError::InvalidParams(format!("window {window_s} s, hop {hop_s} s")));
    }
    let min = (window_s * clip.sample_rate as f64).ceil() as usize;
    if clip.len() < min {
        return Err(EvalError::ClipTooShort { len: clip.len(), min });
    }
    let at_rate = if clip.sample_rate == WEIGHTING_RATE { clip.clone() } else { resample(clip, WEIGHTING_RATE)? };
    let weighted = k_weight(&at_rate)?;
    let rate = WEIGHTING_RATE as f64;
    let win = (window_s * rate).round() as usize;
    let count = window_count(clip.duration_secs(), window_s, hop_s);
    let mut times = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let start_s = i as f64 * hop_s;
        let lo = ((start_s * rate).round() as usize).min(weighted.len().saturating_sub(win));
        let hi = (lo + win).min(weighted.len());
        times.push(start_s + window_s / 2.0);
        values.push(integrated_loudness(&weighted[lo..hi])?);
    }
    Ok(LoudnessCurve { times, values, window_s, hop_s })
}

/// Elementwise `a - b` in LU.
pub fn loudness_difference(a: &LoudnessCurve, b: &LoudnessCurve) -> Result<Vec<f64>, EvalError> {
    let same_grid = a.len() == b.len()
        && a.times.iter().zip(&b.times).all(|(x, y)| (x - y).abs() < 1e-9)
        && a.window_s == b.window_s
        && a.hop_s == b.hop_s;
    if !same_grid {
        return Err(EvalError::GridMismatch);
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect())
}

/// Hann-windowed STFT magnitudes, `frames x (nfft / 2 + 1)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub nfft: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub magnitudes: Vec<f64>,
}

impl Spectrogram {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.magnitudes[i * self.bins..(i + 1) * self.bins]
    }

    pub fn bin_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / self.nfft as f64
    }

    /// Magnitude averaged over frames.
    pub fn mean_spectrum(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.bins];
        for f in 0..self.frames {
            for (m, v) in mean.iter_mut().zip(self.frame(f)) {
                *m += v / self.frames as f64;
            }
        }
        mean
    }
}

pub fn spectrogram(clip: &AudioClip, nfft: usize, hop: usize) -> Result<Spectrogram, EvalError> {
    if nfft < 2 || hop == 0 {
        return Err(EvalError::InvalidParams(format!("nfft {nfft}, hop {hop}")));
    }
    if clip.len() < nfft {
        return Err(EvalError::ClipTooShort { len: clip.len(), min: nfft });
    }
    let frames = (clip.len() - nfft) / hop + 1;
    let bins = nfft / 2 + 1;
    let window: Vec<f64> = (0..nfft)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / nfft as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut magnitudes = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(clip.samples[start + n] as f64 * window[n], 0.0);
        }
        fft.process(&mut buf);
        magnitudes.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Ok(Spectrogram { frames, bins, nfft, hop, sample_rate: clip.sample_rate, magnitudes })
}

fn same_duration(a: &AudioClip, b: &AudioClip) -> Result<(), EvalError> {
    let (da, db) = (a.duration_secs(), b.duration_secs());
    let tolerance = 1.0 / a.sample_rate.min(b.sample_rate) as f64;
    if (da - db).abs() > tolerance * 0.5 {
        return Err(EvalError::DurationMismatch { source_secs: da, converted_secs: db });
    }
    Ok(())
}

/// Fraction of frames whose pitch tokens agree. `converted` is brought to
/// the source rate first so both tracks share one frame grid.
pub fn pitch_accuracy(source: &AudioClip, converted: &AudioClip, params: &F0Params) -> Result<f64, EvalError> {
    same_duration(source, converted)?;
    let converted = if converted.sample_rate == source.sample_rate {
        converted.clone()
    } else {
        let mut c = resample(converted, source.sample_rate)?;
        c.samples.resize(source.len(), 0.0);
        c
    };
    let a = pitch_track(source, params)?;
    let b = pitch_track(&converted, params)?;
    let matches = a.indices.iter().zip(&b.indices).filter(|(x, y)| x == y).count();
    Ok(matches as f64 / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub window_s: f64,
    pub hop_s: f64,
    pub nfft: usize,
    pub spectrogram_hop: usize,
    pub f0: F0Params,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { window_s: 0.4, hop_s: 0.1, nfft: 2048, spectrogram_hop: 512, f0: F0Params::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub times: Vec<f64>,
    pub source_lkfs: Vec<f64>,
    pub converted_lkfs: Vec<f64>,
    pub difference_lu: Vec<f64>,
}

/// A compact view of a spectrogram: the strongest peaks of the mean
/// spectrum and its centroid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub frames: usize,
    pub bins: usize,
    pub peak_hz: Vec<f64>,
    pub centroid_hz: f64,
}

pub fn summarize(spec: &Spectrogram, peaks: usize) -> SpectrumSummary {
    let mean = spec.mean_spectrum();
    let total: f64 = mean.iter().sum();
    let centroid_hz = if total > 0.0 {
        mean.iter().enumerate().map(|(b, m)| spec.bin_hz(b) * m).sum::<f64>() / total
    } else {
        0.0
    };
    let mut local: Vec<(usize, f64)> = (1..mean.len().saturating_sub(1))
        .filter(|&b| mean[b] > 0.0 && mean[b] >= mean[b - 1] && mean[b] > mean[b + 1])
        .map(|b| (b, mean[b]))
        .collect();
    local.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let peak_hz = local.iter().take(peaks).map(|&(b, _)| spec.bin_hz(b)).collect();
    SpectrumSummary { frames: spec.frames, bins: spec.bins, peak_hz, centroid_hz }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub source: Option<PathBuf>,
    pub converted: Option<PathBuf>,
    pub checkpoint: Option<String>,
    pub options: EvalOptions,
    pub pitch_accuracy: f64,
    pub mean_abs_difference_lu: f64,
    pub max_abs_difference_lu: f64,
    pub curves: CurveSeries,
    pub source_spectrum: SpectrumSummary,
    pub converted_spectrum: SpectrumSummary,
}

pub fn evaluate(source: &AudioClip, converted: &AudioClip, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    let pitch_accuracy = pitch_accuracy(source, converted, &opts.f0)?;
    let a = loudness_curve(source, opts.window_s, opts.hop_s)?;
    let b = loudness_curve(converted, opts.window_s, opts.hop_s)?;
    let difference = loudness_difference(&a, &b)?;
    let abs = difference.iter().map(|d| d.abs());
    let mean_abs_difference_lu = abs.clone().sum::<f64>() / difference.len() as f64;
    let max_abs_difference_lu = abs.fold(0.0, f64::max);
    let spec_a = spectrogram(source, opts.nfft, opts.spectrogram_hop)?;
    let spec_b = spectrogram(converted, opts.nfft, opts.spectrogram_hop)?;
    Ok(EvalReport {
        version: REPORT_VERSION,
        source: None,
        converted: None,
        checkpoint: None,
        options: opts.clone(),
        pitch_accuracy,
        mean_abs_difference_lu,
        max_abs_difference_lu,
        curves: CurveSeries { times: a.times, source_lkfs: a.values, converted_lkfs: b.values, difference_lu: difference },
        source_spectrum: summarize(&spec_a, 8),
        converted_spectrum: summarize(&spec_b, 8),
    })
}

pub fn curves_csv(curves: &CurveSeries) -> String {
    let mut out = String::from(CURVES_CSV_HEADER);
    out.push('\n');
    for i in 0..curves.times.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            curves.times[i], curves.source_lkfs[i], curves.converted_lkfs[i], curves.difference_lu[i]
        );
    }
    out
}

const SVG_WIDTH: f64 = 800.0;
const SVG_HEIGHT: f64 = 400.0;
const SVG_MARGIN: f64 = 40.0;

/// Source in red, converted in green, difference in blue on a shared axis.
pub fn curves_svg(curves: &CurveSeries) -> String {
    let series = [("red", &curves.source_lkfs), ("green", &curves.converted_lkfs), ("blue", &curves.difference_lu)];
    let (mut lo, mut hi) = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (-70.0, 0.0);
    }
    if hi - lo < 1e-9 {
        (lo, hi) = (lo - 1.0, hi + 1.0);
    }
    let t0 = curves.times.first().copied().unwrap_or(0.0);
    let t1 = curves.times.last().copied().unwrap_or(1.0).max(t0 + 1e-9);
    let x = |t: f64| SVG_MARGIN + (t - t0) / (t1 - t0) * (SVG_WIDTH - 2.0 * SVG_MARGIN);
    let y = |v: f64| SVG_HEIGHT - SVG_MARGIN - (v - lo) / (hi - lo) * (SVG_HEIGHT - 2.0 * SVG_MARGIN);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_WIDTH} {SVG_HEIGHT}\">\n\
         <rect x=\"0\" y=\"0\" width=\"{SVG_WIDTH}\" height=\"{SVG_HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{SVG_MARGIN}\" y=\"20\" font-size=\"12\">loudness (LKFS) and difference (LU), {lo:.1} to {hi:.1}</text>\n"
    );
    for (colour, values) in series {
        let points: Vec<String> =
            curves.times.iter().zip(values.iter()).map(|(&t, &v)| format!("{:.2},{:.2}", x(t), y(v))).collect();
        let _ = writeln!(out, "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>", points.join(" "));
    }
    out.push_str("</svg>\n");
    out
}

/// Writes `report.json`, `curves.csv` and `curves.svg` into `out_dir`.
pub fn write_report(report: &EvalReport, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, EvalError> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let files = [
        (dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n"),
        (dir.join("curves.csv"), curves_csv(&report.curves)),
        (dir.join("curves.svg"), curves_svg(&report.curves)),
    ];
    for (path, body) in &files {
        std::fs::write(path, body)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, secs: f64, sr: u32) -> AudioClip {
        let n = (secs * sr as f64).round() as usize;
        AudioClip::new(
            (0..n).map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()) as f32).collect(),
            sr,
        )
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_count(2.0, 0.4, 0.1), 17);
        assert_eq!(window_count(0.4, 0.4, 0.1), 1);
        assert_eq!(window_count(0.45, 0.4, 0.1), 1);
        let c = loudness_curve(&sine(500.0, 0.5, 2.0, 16_000), 0.4, 0.1).unwrap();
        assert_eq!(c.len(), 17);
        assert!(c.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn too_short() {
        assert!(matches!(
            loudness_curve(&AudioClip::silence(100, 16_000), 0.4, 0.1),
            Err(EvalError::ClipTooShort { .. })
        ));
        assert!(matches!(spectrogram(&AudioClip::silence(100, 16_000), 2048, 512), Err(EvalError::ClipTooShort { .. })));
    }

    #[test]
    fn csv_and_svg_shape() {
        let c = CurveSeries {
            times: vec![0.2, 0.3],
            source_lkfs: vec![-20.0, -21.0],
            converted_lkfs: vec![-22.0, -70.0],
            difference_lu: vec![2.0, 49.0],
        };
        let csv = curves_csv(&c);
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().next(), Some(CURVES_CSV_HEADER));
        let svg = curves_svg(&c);
        assert_eq!(svg.matches("<polyline").count(), 3);
        for colour in ["red", "green", "blue"] {
            assert!(svg.contains(&format!("stroke=\"{colour}\"")));
        }
    }
}
