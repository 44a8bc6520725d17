//! Synthetic monophonic corpus drawn from the reference pitch and note-length
//! statistics, rendered with simple additive timbres.

use std::path::{Path, PathBuf};

use log::info;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError, BitDepth};
use crate::pitch::{f0_of, index_of, PITCH_CLASSES};

pub const TICKS_PER_SECOND: u32 = 960;
pub const TICKS_PER_QUARTER: u32 = 480;
pub const TICKS_PER_MEASURE: u32 = 1920;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("pitch index 0 is a rest and cannot be rendered as a note")]
    PitchIndexZeroInScore,
    #[error("pitch index {0} outside the table")]
    PitchOutOfRange(usize),
    #[error("unknown timbre preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("manifest JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One row of the corpus pitch statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitchCount {
    pub name: &'static str,
    pub count: u32,
}

pub const PITCH_COUNTS: [PitchCount; 20] = {
    const fn p(name: &'static str, count: u32) -> PitchCount {
        PitchCount { name, count }
    }
    [
        p("E4", 2),
        p("G4", 178),
        p("A4", 429),
        p("B4", 20),
        p("C5", 987),
        p("D5", 1337),
        p("E5", 1763),
        p("F5", 24),
        p("G5", 2465),
        p("A5", 1887),
        p("B5", 54),
        p("C6", 1591),
        p("D6", 1027),
        p("E6", 758),
        p("F6", 10),
        p("G6", 485),
        p("A6", 141),
        p("B6", 4),
        p("C7", 49),
        p("D7", 5),
    ]
};

/// Table index for a statistics row. C7 and D7 lie above the table and are
/// clamped to B6 (36).
pub fn pitch_row_index(row: &PitchCount) -> usize {
    index_of(row.name).unwrap_or(PITCH_CLASSES - 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DurationCount {
    pub ticks: u32,
    pub name: &'static str,
    pub count: u32,
}

pub const DURATION_COUNTS: [DurationCount; 10] = {
    const fn d(ticks: u32, name: &'static str, count: u32) -> DurationCount {
        DurationCount { ticks, name, count }
    }
    [
        d(180, "Dotted Sixteenth Note", 75),
        d(240, "Eighth Note", 4813),
        d(360, "Dotted Eighth Note", 531),
        d(480, "Quarter Note", 1017),
        d(720, "Dotted Quarter Note", 209),
        d(960, "Half Note", 572),
        d(1440, "Dotted Half Note", 20),
        d(1920, "Whole Note", 16),
        d(3840, "Double Whole Note", 70),
        d(160, "Quarter Note Triplet", 8),
    ]
};

pub fn ticks_to_seconds(ticks: u32) -> f64 {
    ticks as f64 / TICKS_PER_SECOND as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub pitch: usize,
    pub start_tick: u32,
    pub duration_tick: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub notes: Vec<Note>,
}

impl Score {
    pub fn end_tick(&self) -> u32 {
        self.notes.last().map_or(0, |n| n.start_tick + n.duration_tick)
    }

    /// Table index sounding at `tick`, 0 when silent.
    pub fn pitch_at(&self, tick: f64) -> usize {
        self.notes
            .iter()
            .find(|n| tick >= n.start_tick as f64 && tick < (n.start_tick + n.duration_tick) as f64)
            .map_or(0, |n| n.pitch)
    }
}

/// Draws rows of the statistics tables in proportion to their counts.
#[derive(Clone, Debug)]
pub struct ScoreSampler {
    pitch: WeightedIndex<u32>,
    duration: WeightedIndex<u32>,
}

impl Default for ScoreSampler {
    fn default() -> Self {
        ScoreSampler {
            pitch: WeightedIndex::new(PITCH_COUNTS.iter().map(|p| p.count)).expect("positive counts"),
            duration: WeightedIndex::new(DURATION_COUNTS.iter().map(|d| d.count)).expect("positive counts"),
        }
    }
}

impl ScoreSampler {
    /// Row of [`PITCH_COUNTS`].
    pub fn pitch_row<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.pitch.sample(rng)
    }

    /// Row of [`DURATION_COUNTS`].
    pub fn duration_row<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.duration.sample(rng)
    }

    /// Notes drawn independently until `total_ticks` is filled; the last
    /// note is truncated at the boundary.
    pub fn score<R: Rng + ?Sized>(&self, rng: &mut R, total_ticks: u32) -> Score {
        let mut notes = Vec::new();
        let mut tick = 0;
        let mut clamped = 0;
        while tick < total_ticks {
            let row = &PITCH_COUNTS[self.pitch_row(rng)];
            let pitch = pitch_row_index(row);
            if index_of(row.name).is_none() {
                clamped += 1;
            }
            let duration = DURATION_COUNTS[self.duration_row(rng)].ticks.min(total_ticks - tick);
            notes.push(Note { pitch, start_tick: tick, duration_tick: duration });
            tick += duration;
        }
        if clamped > 0 {
            info!("{clamped} notes above B6 clamped to B6");
        }
        Score { notes }
    }
}

pub fn sample_score<R: Rng + ?Sized>(rng: &mut R, total_ticks: u32) -> Result<Score, DatasetError> {
    if total_ticks < 240 {
        return Err(DatasetError::Invalid(format!("score of {total_ticks} ticks is shorter than an eighth note")));
    }
    Ok(ScoreSampler::default().score(rng, total_ticks))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimbrePreset {
    pub name: String,
    /// Relative amplitude of harmonic `k + 1`.
    pub harmonics: Vec<f64>,
    pub attack_s: f64,
    /// Exponential decay time constant; `None` sustains.
    pub decay_tau_s: Option<f64>,
    /// Uniform noise amplitude relative to the note amplitude.
    pub noise: f64,
    /// Peak amplitude bound of the harmonic sum.
    pub gain: f64,
}

impl TimbrePreset {
    pub fn piano() -> Self {
        TimbrePreset {
            name: "piano".into(),
            harmonics: (1..=10).map(|k| 1.0 / k as f64).collect(),
            attack_s: 0.0,
            decay_tau_s: Some(0.4),
            noise: 0.0,
            gain: 0.5,
        }
    }

    pub fn violin() -> Self {
        TimbrePreset {
            name: "violin".into(),
            harmonics: (1..=16).map(|k| 1.0 / k as f64).collect(),
            attack_s: 0.08,
            decay_tau_s: None,
            noise: 0.0,
            gain: 0.5,
        }
    }

    pub fn flute() -> Self {
        TimbrePreset {
            name: "flute".into(),
            harmonics: vec![1.0, 0.15, 0.06, 0.02],
            attack_s: 0.04,
            decay_tau_s: None,
            noise: 0.03,
            gain: 0.5,
        }
    }

    pub fn by_name(name: &str) -> Result<Self, DatasetError> {
        match name {
            "piano" => Ok(Self::piano()),
            "violin" => Ok(Self::violin()),
            "flute" => Ok(Self::flute()),
            other => Err(DatasetError::UnknownPreset(other.into())),
        }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.harmonics.is_empty() || self.harmonics.iter().any(|&a| !(a >= 0.0)) || self.harmonics.iter().sum::<f64>() <= 0.0 {
            return Err(DatasetError::Invalid("harmonic amplitudes must be non-negative with a positive sum".into()));
        }
        if !(self.gain > 0.0 && self.gain + self.noise <= 1.0) || !(self.noise >= 0.0) || !(self.attack_s >= 0.0) {
            return Err(DatasetError::Invalid(format!("preset {} amplitude settings out of range", self.name)));
        }
        if matches!(self.decay_tau_s, Some(t) if !(t > 0.0)) {
            return Err(DatasetError::Invalid("decay time must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderOptions {
    /// Transpose down one octave (fundamental halved).
    pub octave_down: bool,
    /// Seed for the noise component.
    pub seed: u64,
}

const FADE_S: f64 = 0.005;

fn tick_to_sample(tick: u32, sample_rate: u32) -> usize {
    (tick as f64 * sample_rate as f64 / TICKS_PER_SECOND as f64).round() as usize
}

/// Additive rendering of each note at its table frequency, shaped by the
/// preset envelope with 5 ms raised-cosine fades at both ends.
pub fn render_score(
    score: &Score,
    preset: &TimbrePreset,
    sample_rate: u32,
    opts: &RenderOptions,
) -> Result<AudioClip, DatasetError> {
    preset.validate()?;
    if sample_rate == 0 {
        return Err(DatasetError::Invalid("sample rate must be positive".into()));
    }
    let len = tick_to_sample(score.end_tick(), sample_rate);
    let mut out = vec![0.0f32; len];
    let sr = sample_rate as f64;
    let norm = preset.gain / preset.harmonics.iter().sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let fade = (FADE_S * sr).round().max(1.0);
    for note in &score.notes {
        let f0 = match note.pitch {
            0 => return Err(DatasetError::PitchIndexZeroInScore),
            p => f0_of(p).ok_or(DatasetError::PitchOutOfRange(p))?,
        };
        let f0 = if opts.octave_down { f0 / 2.0 } else { f0 };
        let start = tick_to_sample(note.start_tick, sample_rate);
        let end = tick_to_sample(note.start_tick + note.duration_tick, sample_rate).min(len);
        let n = end.saturating_sub(start);
        let partials: Vec<(f64, f64)> = preset
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &a)| ((k + 1) as f64 * f0, a))
            .filter(|&(f, _)| f < 0.45 * sr)
            .collect();
        for i in 0..n {
            let time = i as f64 / sr;
            let mut env = match preset.decay_tau_s {
                Some(tau) => (-time / tau).exp(),
                None => 1.0,
            };
            if preset.attack_s > 0.0 && time < preset.attack_s {
                env *= time / preset.attack_s;
            }
            let edge = (i as f64).min((n - 1 - i) as f64);
            if edge < fade {
                env *= 0.5 - 0.5 * (std::f64::consts::PI * edge / fade).cos();
            }
            let phase = 2.0 * std::f64::consts::PI * time;
            let tone: f64 = partials.iter().map(|&(f, a)| a * (phase * f).sin()).sum();
            let noise = if preset.noise > 0.0 { preset.noise * rng.random_range(-1.0..=1.0) } else { 0.0 };
            out[start + i] = (env * (norm * tone + noise * preset.gain)).clamp(-1.0, 1.0) as f32;
        }
    }
    Ok(AudioClip::new(out, sample_rate))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub samples: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub sample_rate: u32,
    pub preset: String,
    pub seed: u64,
    #[serde(default)]
    pub octave_down: bool,
    pub entries: Vec<ManifestEntry>,
    /// SHA-256 over the entry hashes in order.
    pub checksum: String,
}

fn entries_checksum(entries: &[ManifestEntry]) -> String {
    let mut h = Sha256::new();
    for e in entries {
        h.update(e.file.as_bytes());
        h.update([0]);
        h.update(e.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let m: Manifest = serde_json::from_str(text)?;
        if m.version != MANIFEST_VERSION {
            return Err(DatasetError::Manifest(format!("unsupported version {}", m.version)));
        }
        if m.sample_rate == 0 {
            return Err(DatasetError::Manifest("zero sample rate".into()));
        }
        if m.entries.is_empty() {
            return Err(DatasetError::Manifest("no entries".into()));
        }
        if let Some(e) = m.entries.iter().find(|e| e.file.is_empty() || Path::new(&e.file).is_absolute() || e.file.contains("..")) {
            return Err(DatasetError::Manifest(format!("entry path {:?} must be relative to the manifest", e.file)));
        }
        if entries_checksum(&m.entries) != m.checksum {
            return Err(DatasetError::Manifest("checksum does not match entries".into()));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// A validated corpus on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub entries: Vec<(PathBuf, usize)>,
    pub sample_rate: u32,
    pub checksum: String,
}

impl DatasetIndex {
    /// Loads a manifest and checks that every listed file is readable with
    /// the recorded length and hash.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::from_json(&std::fs::read_to_string(manifest_path)?)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let path = root.join(&e.file);
            let bytes = std::fs::read(&path).map_err(|err| DatasetError::Manifest(format!("{}: {err}", path.display())))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(DatasetError::Manifest(format!("{} does not match its recorded hash", e.file)));
            }
            let clip = audio::to_mono(&audio::read_wav_bytes(&bytes)?)?;
            if clip.len() != e.samples || clip.sample_rate != manifest.sample_rate {
                return Err(DatasetError::Manifest(format!("{} has unexpected length or rate", e.file)));
            }
            entries.push((path, e.samples));
        }
        Ok(DatasetIndex { entries, sample_rate: manifest.sample_rate, checksum: manifest.checksum })
    }

    pub fn read_clip(&self, i: usize) -> Result<AudioClip, DatasetError> {
        Ok(audio::read_wav_mono(&self.entries[i].0)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub clips: usize,
    pub clip_seconds: f64,
    pub preset: String,
    pub seed: u64,
    pub sample_rate: u32,
    pub octave_down: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { clips: 8, clip_seconds: 6.0, preset: "piano".into(), seed: 0, sample_rate: 16_000, octave_down: false }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Score for clip `ordinal` of a corpus; clip seeds are `seed + ordinal`.
pub fn corpus_score(spec: &CorpusSpec, ordinal: usize) -> Score {
    let total = (spec.clip_seconds * TICKS_PER_SECOND as f64).round() as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(ordinal as u64));
    ScoreSampler::default().score(&mut rng, total)
}

/// Renders `spec.clips` clips of exactly `clip_seconds * sample_rate`
/// samples into `out_dir` and writes the manifest next to them.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: impl AsRef<Path>) -> Result<DatasetIndex, DatasetError> {
    if spec.clips == 0 {
        return Err(DatasetError::Invalid("at least one clip is required".into()));
    }
    if !(spec.clip_seconds > 0.0) || spec.sample_rate == 0 {
        return Err(DatasetError::Invalid("clip length and sample rate must be positive".into()));
    }
    let total_ticks = (spec.clip_seconds * TICKS_PER_SECOND as f64).round() as u32;
    if total_ticks < 240 {
        return Err(DatasetError::Invalid("clips must last at least an eighth note".into()));
    }
    let preset = TimbrePreset::by_name(&spec.preset)?;
    let samples = (spec.clip_seconds * spec.sample_rate as f64).round() as usize;
    let mut clips = Vec::with_capacity(spec.clips);
    for ordinal in 0..spec.clips {
        let score = corpus_score(spec, ordinal);
        let opts = RenderOptions { octave_down: spec.octave_down, seed: spec.seed.wrapping_add(ordinal as u64) };
        let mut clip = render_score(&score, &preset, spec.sample_rate, &opts)?;
        clip.samples.resize(samples, 0.0);
        clips.push(clip);
    }
    write_dataset(&clips, &spec.preset, spec.seed, spec.octave_down, out_dir)
}

/// Writes `clips` as float32 WAV files plus a manifest and loads the
/// resulting index. All clips must share one sample rate.
pub fn write_dataset(
    clips: &[AudioClip],
    preset: &str,
    seed: u64,
    octave_down: bool,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetIndex, DatasetError> {
    let Some(first) = clips.first() else {
        return Err(DatasetError::Invalid("at least one clip is required".into()));
    };
    if clips.iter().any(|c| c.sample_rate != first.sample_rate) {
        return Err(DatasetError::Invalid("clips have different sample rates".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(clips.len());
    for (ordinal, clip) in clips.iter().enumerate() {
        let (bytes, _) = audio::encode_wav(clip, BitDepth::Float32)?;
        let file = format!("clip_{ordinal:04}.wav");
        std::fs::write(out_dir.join(&file), &bytes)?;
        entries.push(ManifestEntry { file, samples: clip.len(), sha256: sha256_hex(&bytes) });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        sample_rate: first.sample_rate,
        preset: preset.to_string(),
        seed,
        octave_down,
        checksum: entries_checksum(&entries),
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json())?;
    DatasetIndex::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tick_arithmetic() {
        assert_eq!(ticks_to_seconds(480), 0.5);
        assert_eq!(ticks_to_seconds(240), 0.25);
        assert_eq!(ticks_to_seconds(0), 0.0);
        assert_eq!(TICKS_PER_MEASURE, 4 * TICKS_PER_QUARTER);
    }

    #[test]
    fn table_totals() {
        assert_eq!(DURATION_COUNTS.iter().map(|d| d.count).sum::<u32>(), 7331);
        assert_eq!(PITCH_COUNTS.iter().map(|p| p.count).sum::<u32>(), 13_216);
        let modal = PITCH_COUNTS.iter().max_by_key(|p| p.count).unwrap();
        assert_eq!(modal.name, "G5");
    }

    #[test]
    fn clamped_rows() {
        let c7 = PITCH_COUNTS.iter().find(|p| p.name == "C7").unwrap();
        assert_eq!(pitch_row_index(c7), 36);
        let g5 = PITCH_COUNTS.iter().find(|p| p.name == "G5").unwrap();
        assert_eq!(pitch_row_index(g5), 20);
    }

    #[test]
    fn score_fills_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_score(&mut rng, 5000).unwrap();
        assert_eq!(s.end_tick(), 5000);
        assert!(s.notes.windows(2).all(|w| w[0].start_tick + w[0].duration_tick == w[1].start_tick));
        assert!(sample_score(&mut rng, 100).is_err());
    }

    #[test]
    fn rest_pitch_rejected() {
        let s = Score { notes: vec![Note { pitch: 0, start_tick: 0, duration_tick: 480 }] };
        assert!(matches!(
            render_score(&s, &TimbrePreset::piano(), 16_000, &RenderOptions::default()),
            Err(DatasetError::PitchIndexZeroInScore)
        ));
    }

    #[test]
    fn empty_score_is_empty_clip() {
        let clip = render_score(&Score::default(), &TimbrePreset::piano(), 16_000, &RenderOptions::default()).unwrap();
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }
}
