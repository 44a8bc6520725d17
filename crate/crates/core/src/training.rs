//! Conditioning construction, the training loop and checkpoint files.

use std::io::{Read, Write};
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tpdm_nn::{Adam, Graph, Tensor};

use crate::audio::AudioClip;
use crate::dataset::{DatasetError, DatasetIndex};
use crate::diffusion::{ConditionTokens, ConditioningBundle, DiffusionError, ModelConfig, TimbreModel};
use crate::loudness::{embed_loudness, loudness_track, LoudnessError, SEGMENTS};
use crate::pitch::{embed_pitch, pitch_track, F0Params, PitchError};
use crate::vq::{Codebook, FitOptions, JointCodebook, LoudnessCodebook, VqError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPDM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("segment of {found} samples, model expects {expected}")]
    SegmentLength { expected: usize, found: usize },
    #[error("codebook has {found} entries, model expects {expected}")]
    CodebookSize { expected: usize, found: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Pitch(#[from] PitchError),
    #[error(transparent)]
    Loudness(#[from] LoudnessError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("tensor {name}: dims {found:?} do not match the model's {expected:?}")]
    TensorDimMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sample_rate: u32,
    pub segment_length: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<u64>,
    /// Peak Adam learning rate.
    pub learning_rate: f64,
    /// Linear ramp from 0 to `learning_rate` over this many steps.
    pub warmup_steps: u64,
    pub lr_decay: LrDecay,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub codebook_path: Option<String>,
    pub f0: F0Params,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sample_rate: 16_000,
            segment_length: 1 << 14,
            batch_size: 4,
            epochs: 10,
            max_steps: None,
            learning_rate: 1e-4,
            warmup_steps: 0,
            lr_decay: LrDecay::Constant,
            seed: 0,
            checkpoint_every: 100,
            codebook_path: None,
            f0: F0Params::default(),
            model: ModelConfig::default().normalized(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from the peak rate down to 0 at the final step.
    Cosine,
}

impl TrainConfig {
    /// Learning rate for the update that produces step `step + 1` of
    /// `total` steps.
    pub fn learning_rate_at(&self, step: u64, total: u64) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.lr_decay {
            LrDecay::Constant => peak,
            LrDecay::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
                peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.segment_length != self.model.unet.input_length {
            return Err(TrainError::InvalidConfig(format!(
                "segment length {} differs from model input length {}",
                self.segment_length, self.model.unet.input_length
            )));
        }
        if self.f0.hop_samples != self.model.hop_samples {
            return Err(TrainError::InvalidConfig("pitch hop differs from the model's condition hop".into()));
        }
        if self.segment_length < self.f0.window_samples {
            return Err(TrainError::InvalidConfig("segment shorter than the pitch analysis window".into()));
        }
        if self.batch_size == 0 || self.sample_rate == 0 || !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("batch size, sample rate and learning rate must be positive".into()));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// A window of exactly `n` samples: a uniformly random offset when the clip
/// is long enough, otherwise the clip followed by zeros.
pub fn crop_segment<R: Rng + ?Sized>(clip: &AudioClip, n: usize, rng: &mut R) -> Tensor<f32> {
    let mut data = vec![0.0f32; n];
    if clip.len() >= n {
        let offset = rng.random_range(0..=clip.len() - n);
        data.copy_from_slice(&clip.samples[offset..offset + n]);
    } else {
        data[..clip.len()].copy_from_slice(&clip.samples);
    }
    Tensor::new(vec![1, n], data).expect("length matches")
}

/// Pitch and loudness codes for one model-length segment.
pub fn condition_tokens(
    segment: &AudioClip,
    codebook: &LoudnessCodebook,
    f0: &F0Params,
) -> Result<ConditionTokens, TrainError> {
    let pitch = pitch_track(segment, f0)?;
    let (_, loud) = loudness_track(segment, codebook, pitch.len())?;
    Ok(ConditionTokens { pitch: pitch.indices, loudness: loud.aligned_indices })
}

/// Tokens plus their embedding rows under the model's current weights.
pub fn build_conditioning(
    model: &TimbreModel<f32>,
    segment: &AudioClip,
    codebook: &LoudnessCodebook,
    f0: &F0Params,
) -> Result<(ConditionTokens, ConditioningBundle), TrainError> {
    if segment.len() != model.config.unet.input_length {
        return Err(TrainError::SegmentLength { expected: model.config.unet.input_length, found: segment.len() });
    }
    if codebook.k() != model.config.codebook_size {
        return Err(TrainError::CodebookSize { expected: model.config.codebook_size, found: codebook.k() });
    }
    let tokens = condition_tokens(segment, codebook, f0)?;
    let track = crate::pitch::PitchTrack { indices: tokens.pitch.clone(), hop_samples: f0.hop_samples };
    let p = embed_pitch(&track, model.store.value(model.pitch_embedding))?.matrix;
    let l = embed_loudness(&tokens.loudness, model.store.value(model.loudness_embedding))?;
    let (dp, dl) = (p.dims()[1], l.dims()[1]);
    let mut data = Vec::with_capacity(track.len() * (dp + dl));
    for (pr, lr) in p.data().chunks(dp).zip(l.data().chunks(dl)) {
        data.extend_from_slice(pr);
        data.extend_from_slice(lr);
    }
    let matrix = Tensor::new(vec![track.len(), dp + dl], data).map_err(DiffusionError::from)?;
    Ok((tokens, ConditioningBundle { matrix }))
}

/// One training element: clean signal, its condition, and the diffusion
/// time and noise drawn for it.
#[derive(Clone, Debug)]
pub struct Draw {
    pub x0: Tensor<f32>,
    pub tokens: ConditionTokens,
    pub t: f64,
    pub noise: Tensor<f32>,
}

pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> (f64, Tensor<f32>) {
    let t = rng.random::<f64>();
    let noise = Tensor::from_fn(&[1, n], |_| rng.sample::<f32, _>(StandardNormal));
    (t, noise)
}

/// Mean over the batch of the per-element v-prediction MSE.
pub fn loss_v(model: &TimbreModel<f32>, batch: &[Draw]) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = 0.0;
    for d in batch {
        let mut g = Graph::new(&model.store);
        let l = model.element_loss(&mut g, &d.x0, &d.noise, d.t, &d.tokens)?;
        total += g.value(l).data()[0] as f64;
    }
    Ok(total / batch.len() as f64)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: TimbreModel<f32>,
    pub codebook: LoudnessCodebook,
    pub optimizer: Adam,
    pub step: u64,
    /// Run length used by learning-rate decay when `max_steps` is unset.
    pub planned_steps: u64,
    rng: ChaCha8Rng,
}

/// Per-step randomness depends only on the seed and the step number, so a
/// resumed run draws what the uninterrupted run would have.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

impl Trainer {
    pub fn new(config: TrainConfig, codebook: LoudnessCodebook) -> Result<Self, TrainError> {
        config.validate()?;
        if codebook.k() != config.model.codebook_size {
            return Err(TrainError::CodebookSize { expected: config.model.codebook_size, found: codebook.k() });
        }
        let model = TimbreModel::new(config.model.clone(), config.seed)?;
        Ok(Self::from_parts(config, model, codebook, 0))
    }

    pub fn from_parts(config: TrainConfig, model: TimbreModel<f32>, codebook: LoudnessCodebook, step: u64) -> Self {
        let optimizer = Adam::new(config.learning_rate);
        let rng = step_rng(config.seed, step);
        Trainer { config, model, codebook, optimizer, step, planned_steps: u64::MAX, rng }
    }

    pub fn resume(checkpoint: &Checkpoint, codebook: LoudnessCodebook) -> Result<Self, TrainError> {
        if codebook.k() != checkpoint.config.model.codebook_size {
            return Err(TrainError::CodebookSize { expected: checkpoint.config.model.codebook_size, found: codebook.k() });
        }
        Ok(Self::from_parts(checkpoint.config.clone(), checkpoint.model.clone(), codebook, checkpoint.step))
    }

    /// Condition, noise and time for each clip crop in the batch.
    pub fn prepare(&mut self, segments: &[Tensor<f32>]) -> Result<Vec<Draw>, TrainError> {
        let n = self.config.segment_length;
        segments
            .iter()
            .map(|x0| {
                if x0.len() != n {
                    return Err(TrainError::SegmentLength { expected: n, found: x0.len() });
                }
                let clip = AudioClip::new(x0.data().to_vec(), self.config.sample_rate);
                let tokens = condition_tokens(&clip, &self.codebook, &self.config.f0)?;
                let (t, noise) = draw_noise(&mut self.rng, n);
                Ok(Draw { x0: x0.clone(), tokens, t, noise })
            })
            .collect()
    }

    /// One Adam update on the mean loss of `segments`; conditions are derived
    /// from the segments themselves.
    pub fn train_step(&mut self, segments: &[Tensor<f32>]) -> Result<f64, TrainError> {
        if segments.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let draws = self.prepare(segments)?;
        self.apply(&draws)
    }

    /// Accumulates gradients over `draws` and applies the update.
    pub fn apply(&mut self, draws: &[Draw]) -> Result<f64, TrainError> {
        if draws.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let scale = 1.0 / draws.len() as f32;
        self.model.store.zero_grad();
        let mut total = 0.0f64;
        for d in draws {
            let grads = {
                let mut g = Graph::new(&self.model.store);
                let l = self.model.element_loss(&mut g, &d.x0, &d.noise, d.t, &d.tokens)?;
                let value = g.value(l).data()[0] as f64;
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step: self.step + 1 });
                }
                total += value;
                g.backward(l).map_err(DiffusionError::from)?
            };
            self.model.store.accumulate(&grads, scale);
        }
        if self.model.store.iter().any(|p| !p.grad.all_finite()) {
            return Err(TrainError::NonFiniteLoss { step: self.step + 1 });
        }
        let planned = self.config.max_steps.unwrap_or(self.planned_steps);
        self.optimizer.lr = self.config.learning_rate_at(self.step, planned);
        self.optimizer.step(&mut self.model.store);
        self.step += 1;
        self.rng = step_rng(self.config.seed, self.step);
        Ok(total / draws.len() as f64)
    }

    /// Steps in one epoch: one random crop per clip, grouped into batches.
    pub fn steps_per_epoch(&self, clips: usize) -> u64 {
        clips.div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self, clips: usize) -> u64 {
        self.config.max_steps.unwrap_or(self.config.epochs as u64 * self.steps_per_epoch(clips))
    }

    /// Trains until `total_steps`, calling `on_step(step, loss)` after each
    /// update. Clip order is reshuffled every epoch.
    pub fn run(
        &mut self,
        clips: &[AudioClip],
        mut on_step: impl FnMut(&Trainer, f64) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        if clips.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let total = self.total_steps(clips.len());
        self.planned_steps = total;
        let per_epoch = self.steps_per_epoch(clips.len());
        let n = self.config.segment_length;
        while self.step < total {
            let epoch = self.step / per_epoch;
            let within = (self.step % per_epoch) as usize;
            let mut order: Vec<usize> = (0..clips.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            let bs = self.config.batch_size;
            let picks = &order[within * bs..((within + 1) * bs).min(order.len())];
            let mut crop_rng = step_rng(self.config.seed.wrapping_add(1), self.step);
            let segments: Vec<Tensor<f32>> = picks.iter().map(|&i| crop_segment(&clips[i], n, &mut crop_rng)).collect();
            let loss = self.train_step(&segments)?;
            debug!("step {} loss {loss:.6}", self.step);
            on_step(self, loss)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            codebook_sha256: crate::dataset::sha256_hex(self.codebook.to_json().as_bytes()),
            model: self.model.clone(),
        }
    }
}

/// Pools the 16 segment readings of every model-length window of every
/// clip. Clips are cut into `ceil(len / segment_length)` windows, the last
/// zero-padded, so the pool holds `clips * windows * 16` values.
pub fn loudness_pool(index: &DatasetIndex, segment_length: usize) -> Result<Vec<[f64; SEGMENTS]>, TrainError> {
    if index.entries.is_empty() {
        return Err(TrainError::Dataset(DatasetError::Invalid("corpus is empty".into())));
    }
    if segment_length < SEGMENTS {
        return Err(TrainError::InvalidConfig("segment length below 16 samples".into()));
    }
    let mut pool = Vec::new();
    for i in 0..index.entries.len() {
        let clip = index.read_clip(i)?;
        let windows = clip.len().div_ceil(segment_length).max(1);
        for w in 0..windows {
            let lo = w * segment_length;
            let hi = (lo + segment_length).min(clip.len());
            let mut samples = clip.samples[lo.min(hi)..hi].to_vec();
            samples.resize(segment_length, 0.0);
            let v = crate::loudness::segment_loudness(&AudioClip::new(samples, clip.sample_rate))?;
            pool.push(v.values);
        }
    }
    Ok(pool)
}

pub fn fit_codebook_from_corpus(
    index: &DatasetIndex,
    k: usize,
    segment_length: usize,
    opts: &FitOptions,
    joint: bool,
) -> Result<LoudnessCodebook, TrainError> {
    let pool = loudness_pool(index, segment_length)?;
    if joint {
        let vectors: Vec<Vec<f64>> = pool.iter().map(|v| v.to_vec()).collect();
        Ok(LoudnessCodebook::Joint(JointCodebook::fit(&vectors, k, opts)?))
    } else {
        let values: Vec<f64> = pool.iter().flatten().copied().collect();
        Ok(LoudnessCodebook::Scalar(Codebook::fit(&values, k, opts)?))
    }
}

/// Model weights, optimizer moments and the configuration that built them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub codebook_sha256: String,
    pub model: TimbreModel<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: TrainConfig,
    step: u64,
    adam_step: u64,
    codebook_sha256: String,
}

const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_HEADER: usize = 1 << 24;

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Malformed(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let adam_step = self.model.store.iter().map(|p| p.step_count).max().unwrap_or(0);
        let header = CheckpointHeader {
            config: self.config.clone(),
            step: self.step,
            adam_step,
            codebook_sha256: self.codebook_sha256.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.store.iter() {
            write_record(&mut out, &p.name, &p.value);
        }
        for p in self.model.store.iter() {
            write_record(&mut out, &format!("adam_m/{}", p.name), &p.adam_m);
            write_record(&mut out, &format!("adam_v/{}", p.name), &p.adam_v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        cur.take(4)?;
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        let hlen = cur.u32()? as usize;
        if hlen > MAX_HEADER {
            return Err(CheckpointError::Malformed(format!("header of {hlen} bytes")));
        }
        let header: CheckpointHeader = serde_json::from_slice(cur.take(hlen)?)
            .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
        header.config.validate().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let mut model = TimbreModel::<f32>::new(header.config.model.clone(), 0)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let mut seen = vec![[false; 3]; model.store.len()];
        while !cur.done() {
            let name_len = cur.u32()? as usize;
            if name_len > MAX_NAME {
                return Err(CheckpointError::Malformed(format!("record name of {name_len} bytes")));
            }
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("record name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            if rank > MAX_RANK {
                return Err(CheckpointError::Malformed(format!("rank {rank} for {name}")));
            }
            let dims = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let (slot, base) = match name.split_once('/') {
                Some(("adam_m", rest)) => (1, rest),
                Some(("adam_v", rest)) => (2, rest),
                _ => (0, name.as_str()),
            };
            let id = model
                .store
                .find(base)
                .ok_or_else(|| CheckpointError::Malformed(format!("unknown tensor {name}")))?;
            let expected = model.store.value(id).dims().to_vec();
            if dims != expected {
                return Err(CheckpointError::TensorDimMismatch { name, expected, found: dims });
            }
            let count: usize = expected.iter().product();
            let payload = cur.take(count * 4)?;
            let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if seen[id.index()][slot] {
                return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
            }
            seen[id.index()][slot] = true;
            let p = model.store.get_mut(id);
            let target = match slot {
                0 => &mut p.value,
                1 => &mut p.adam_m,
                _ => &mut p.adam_v,
            };
            target.data_mut().copy_from_slice(&values);
        }
        if let Some(i) = seen.iter().position(|s| !s[0]) {
            let name = model.store.iter().nth(i).map(|p| p.name.clone()).unwrap_or_default();
            return Err(CheckpointError::Malformed(format!("missing tensor {name}")));
        }
        for p in model.store.iter_mut() {
            p.step_count = header.adam_step;
        }
        Ok(Checkpoint { config: header.config, step: header.step, codebook_sha256: header.codebook_sha256, model })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    trainer.checkpoint().save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::load(path)
}
