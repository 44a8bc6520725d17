//! WAV input/output, channel mixdown and band-limited resampling.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Cursor, Read, Seek};
use std::path::Path;

use log::warn;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("file not found: {0}")]
    MissingFile(String),
    #[error("unsupported sample encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("clip has no samples or no channels")]
    EmptyClip,
    #[error("invalid sample rate {0}")]
    InvalidSampleRate(u32),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Mono audio in `[-1, 1]` at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        AudioClip { samples, sample_rate }
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        AudioClip::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

/// Audio as decoded from a file, before mixdown.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelClip {
    pub channels: Vec<Vec<f32>>,
    pub sample_rate: u32,
}

impl MultiChannelClip {
    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn frames(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }
}

impl From<AudioClip> for MultiChannelClip {
    fn from(c: AudioClip) -> Self {
        MultiChannelClip { channels: vec![c.samples], sample_rate: c.sample_rate }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Pcm16,
    Float32,
}

fn map_hound(e: hound::Error) -> AudioError {
    match e {
        // hound reports truncation as a generic `Other` error.
        hound::Error::IoError(e)
            if matches!(e.kind(), std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::Other) =>
        {
            AudioError::MalformedHeader(format!("truncated file: {e}"))
        }
        hound::Error::IoError(e) => AudioError::Io(e),
        hound::Error::FormatError(m) => AudioError::MalformedHeader(m.into()),
        hound::Error::Unsupported => AudioError::UnsupportedEncoding("codec not supported".into()),
        hound::Error::InvalidSampleFormat => AudioError::UnsupportedEncoding("invalid sample format".into()),
        other => AudioError::MalformedHeader(other.to_string()),
    }
}

fn decode<R: Read + Seek>(reader: R) -> Result<MultiChannelClip, AudioError> {
    let reader = hound::WavReader::new(reader).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(AudioError::MalformedHeader("zero channels".into()));
    }
    if spec.sample_rate == 0 {
        return Err(AudioError::MalformedHeader("zero sample rate".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().collect::<Result<_, _>>().map_err(map_hound)?
        }
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<Result<_, _>>()
                .map_err(map_hound)?
        }
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!("{fmt:?} with {bits} bits per sample")));
        }
    };
    let n_ch = spec.channels as usize;
    let frames = interleaved.len() / n_ch;
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (ch, &s) in channels.iter_mut().zip(frame) {
            ch.push(if s.is_finite() { s } else { 0.0 });
        }
    }
    Ok(MultiChannelClip { channels, sample_rate: spec.sample_rate })
}

/// Decodes a WAV file held in memory.
pub fn read_wav_bytes(bytes: &[u8]) -> Result<MultiChannelClip, AudioError> {
    decode(Cursor::new(bytes))
}

/// Reads a PCM (8/16/24/32-bit integer) or 32-bit float WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<MultiChannelClip, AudioError> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(AudioError::MissingFile(path.display().to_string()));
    }
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    decode(file)
}

/// Convenience: read and mix down in one go.
pub fn read_wav_mono(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    to_mono(&read_wav(path)?)
}

/// Per-sample mean across channels.
pub fn to_mono(clip: &MultiChannelClip) -> Result<AudioClip, AudioError> {
    if clip.channels.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    if clip.sample_rate == 0 {
        return Err(AudioError::InvalidSampleRate(0));
    }
    if clip.channels.len() == 1 {
        return Ok(AudioClip::new(clip.channels[0].clone(), clip.sample_rate));
    }
    let n = clip.frames();
    let k = clip.channels.len() as f64;
    let samples = (0..n)
        .map(|i| (clip.channels.iter().map(|c| c[i] as f64).sum::<f64>() / k) as f32)
        .collect();
    Ok(AudioClip::new(samples, clip.sample_rate))
}

/// Encodes a clip as WAV bytes; returns the bytes and the number of samples
/// that had to be clipped into `[-1, 1]`.
pub fn encode_wav(clip: &AudioClip, depth: BitDepth) -> Result<(Vec<u8>, usize), AudioError> {
    if clip.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: match depth {
            BitDepth::Pcm16 => 16,
            BitDepth::Float32 => 32,
        },
        sample_format: match depth {
            BitDepth::Pcm16 => hound::SampleFormat::Int,
            BitDepth::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut cursor = Cursor::new(Vec::new());
    let mut clipped = 0usize;
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec).map_err(map_hound)?;
        for &s in &clip.samples {
            let v = if !s.is_finite() {
                clipped += 1;
                0.0
            } else if s.abs() > 1.0 {
                clipped += 1;
                s.clamp(-1.0, 1.0)
            } else {
                s
            };
            match depth {
                BitDepth::Pcm16 => {
                    let q = (v as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q).map_err(map_hound)?;
                }
                BitDepth::Float32 => writer.write_sample(v).map_err(map_hound)?,
            }
        }
        writer.finalize().map_err(map_hound)?;
    }
    Ok((cursor.into_inner(), clipped))
}

/// Writes a mono WAV file. Out-of-range samples are hard clipped; the
/// returned count says how many.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>, depth: BitDepth) -> Result<usize, AudioError> {
    let (bytes, clipped) = encode_wav(clip, depth)?;
    std::fs::write(path.as_ref(), bytes)?;
    if clipped > 0 {
        warn!("{}: clipped {clipped} samples into [-1, 1]", path.as_ref().display());
    }
    Ok(clipped)
}

const RESAMPLE_TAPS: usize = 64;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Output length for a rate conversion: `round(len * target / source)`.
pub fn resampled_len(len: usize, source_rate: u32, target_rate: u32) -> usize {
    ((len as f64) * target_rate as f64 / source_rate as f64).round() as usize
}

/// Windowed-sinc (64 taps, Hann window) sample rate conversion.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidSampleRate(target_rate));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let (src, dst) = (clip.sample_rate as u64, target_rate as u64);
    let g = gcd(src, dst);
    let (up, down) = (dst / g, src / g);
    let cutoff = (dst as f64 / src as f64).min(1.0);
    let half = (RESAMPLE_TAPS / 2) as i64;
    let out_len = resampled_len(clip.len(), clip.sample_rate, target_rate);

    // Output j sits at source position j * down / up; the fractional part
    // only takes `up` distinct values, so kernels are cached per phase.
    let kernel_for = |phase: u64| -> Vec<f64> {
        let frac = phase as f64 / up as f64;
        let mut taps: Vec<f64> = (-half + 1..=half)
            .map(|i| {
                let d = frac - i as f64;
                let w = 0.5 * (1.0 + (PI * d / half as f64).cos());
                cutoff * sinc(cutoff * d) * w
            })
            .collect();
        // Unity DC gain.
        let sum: f64 = taps.iter().sum();
        if sum.abs() > 1e-12 {
            taps.iter_mut().for_each(|t| *t /= sum);
        }
        taps
    };
    let mut cache: HashMap<u64, Vec<f64>> = HashMap::new();
    let x = &clip.samples;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len as u64 {
        let pos = j * down;
        let base = (pos / up) as i64;
        let phase = pos % up;
        let fresh;
        let kernel = if up <= 4096 {
            cache.entry(phase).or_insert_with(|| kernel_for(phase))
        } else {
            fresh = kernel_for(phase);
            &fresh
        };
        let mut acc = 0.0f64;
        for (n, &k) in kernel.iter().enumerate() {
            let idx = base + n as i64 - half + 1;
            if idx >= 0 && (idx as usize) < x.len() {
                acc += x[idx as usize] as f64 * k;
            }
        }
        out.push(acc as f32);
    }
    Ok(AudioClip::new(out, target_rate))
}
