//! Subcommands of the `tpdm` tool. Exit codes: 0 success, 1 runtime
//! failure, 2 usage error (bad flags or a named input that does not exist).

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use tpdm_core::audio::{read_wav_mono, resample, write_wav, AudioClip, BitDepth};
use tpdm_core::config::RunConfig;
use tpdm_core::conversion::convert_clip;
use tpdm_core::dataset::{generate_corpus, sha256_hex, DatasetIndex};
use tpdm_core::evaluation::{evaluate, write_report};
use tpdm_core::training::{fit_codebook_from_corpus, Checkpoint, TrainError, Trainer};
use tpdm_core::vq::LoudnessCodebook;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const LOSS_LOG: &str = "loss.csv";
pub const LATEST_CHECKPOINT: &str = "latest.tpdm";

#[derive(Debug, Parser)]
#[command(name = "tpdm", version, about = "Pitch- and loudness-conditioned diffusion timbre conversion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus and its manifest.
    SynthData(SynthDataArgs),
    /// Fit the loudness codebook on a corpus.
    FitCodebook(FitCodebookArgs),
    /// Train the diffusion decoder.
    Train(TrainArgs),
    /// Convert a WAV file to the trained timbre.
    Convert(ConvertArgs),
    /// Compare a source and a converted file.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub seconds: Option<f64>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sample_rate: Option<u32>,
    /// Render every note an octave below its score pitch.
    #[arg(long)]
    pub octave_down: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitCodebookArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    /// Codebook JSON file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Cluster whole loudness vectors instead of single readings.
    #[arg(long)]
    pub joint: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint; its configuration takes precedence.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total optimizer steps, counted from the start of training.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Sampler steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples shared by neighbouring chunks, cross-faded.
    #[arg(long)]
    pub overlap: Option<usize>,
    /// 0 for deterministic DDIM, 1 for ancestral sampling.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub converted: PathBuf,
    /// Directory for report.json, curves.csv and curves.svg.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint identifier recorded in the report.
    #[arg(long)]
    pub checkpoint_id: Option<String>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: EXIT_FAILURE, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::SynthData(a) => cmd_synth_data(a),
        Command::FitCodebook(a) => cmd_fit_codebook(a),
        Command::Train(a) => cmd_train(a),
        Command::Convert(a) => cmd_convert(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => {
            require_file(p, "config")?;
            Ok(RunConfig::load(p)?)
        }
        None => Ok(RunConfig::default()),
    }
}

/// Writes the resolved configuration next to a command's outputs.
fn echo_config(dir: &Path, command: &str, cfg: &RunConfig) -> CmdResult {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{command}.config.json")), cfg.to_json())?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn cmd_synth_data(a: &SynthDataArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    let c = &mut cfg.corpus;
    if let Some(v) = a.clips {
        c.clips = v;
    }
    if let Some(v) = a.seconds {
        c.clip_seconds = v;
    }
    if let Some(v) = &a.preset {
        c.preset = v.clone();
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.sample_rate {
        c.sample_rate = v;
    }
    c.octave_down |= a.octave_down;
    if c.clips == 0 {
        return Err(Failure::usage("--clips must be at least 1"));
    }
    echo_config(&a.out, "synth-data", &cfg)?;
    let index = generate_corpus(&cfg.corpus, &a.out)?;
    info!("wrote {} clips to {} (checksum {})", index.entries.len(), a.out.display(), index.checksum);
    Ok(())
}

pub fn cmd_fit_codebook(a: &FitCodebookArgs) -> CmdResult {
    require_file(&a.manifest, "manifest")?;
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(k) = a.k {
        cfg.codebook.k = k;
        cfg.train.model.codebook_size = k;
    }
    if let Some(s) = a.seed {
        cfg.codebook.fit.seed = s;
    }
    cfg.codebook.joint |= a.joint;
    if cfg.codebook.k == 0 {
        return Err(Failure::usage("--k must be at least 1"));
    }
    let index = DatasetIndex::load(&a.manifest)?;
    let cb = fit_codebook_from_corpus(
        &index,
        cfg.codebook.k,
        cfg.train.segment_length,
        &cfg.codebook.fit,
        cfg.codebook.joint,
    )?;
    echo_config(&parent_dir(&a.out), "fit-codebook", &cfg)?;
    cb.save(&a.out)?;
    info!("wrote {}-entry codebook to {}", cb.k(), a.out.display());
    Ok(())
}

fn load_training_clips(index: &DatasetIndex, rate: u32) -> Result<Vec<AudioClip>, Failure> {
    (0..index.entries.len())
        .map(|i| {
            let clip = index.read_clip(i)?;
            Ok(if clip.sample_rate == rate { clip } else { resample(&clip, rate)? })
        })
        .collect()
}

fn check_codebook(checkpoint: &Checkpoint, codebook: &LoudnessCodebook) -> CmdResult {
    let hash = sha256_hex(codebook.to_json().as_bytes());
    if checkpoint.codebook_sha256 != hash {
        return Err(Failure {
            code: EXIT_FAILURE,
            message: "codebook differs from the one the checkpoint was trained with".into(),
        });
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> CmdResult {
    require_file(&a.manifest, "manifest")?;
    require_file(&a.codebook, "codebook")?;
    if let Some(r) = &a.resume {
        require_file(r, "checkpoint")?;
    }
    let mut cfg = load_config(a.config.as_deref())?;
    let codebook = LoudnessCodebook::load(&a.codebook)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            check_codebook(&ckpt, &codebook)?;
            info!("resuming from step {}", ckpt.step);
            cfg.train = ckpt.config.clone();
            Trainer::resume(&ckpt, codebook)?
        }
        None => {
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            Trainer::new(cfg.train.clone(), codebook)?
        }
    };
    if let Some(steps) = a.steps {
        trainer.config.max_steps = Some(steps);
        cfg.train.max_steps = Some(steps);
    }
    echo_config(&a.out, "train", &cfg)?;
    let index = DatasetIndex::load(&a.manifest)?;
    let clips = load_training_clips(&index, trainer.config.sample_rate)?;

    let log_path = a.out.join(LOSS_LOG);
    let fresh = a.resume.is_none() || !log_path.exists();
    let mut log = OpenOptions::new().create(true).write(true).append(!fresh).truncate(fresh).open(&log_path)?;
    if fresh {
        writeln!(log, "step,loss")?;
    }
    let out = a.out.clone();
    let every = trainer.config.checkpoint_every;
    let result = trainer.run(&clips, |t, loss| {
        writeln!(log, "{},{}", t.step, loss).map_err(io_train)?;
        if every > 0 && t.step % every == 0 {
            save(t, &out)?;
        }
        Ok(())
    });
    log.flush()?;
    match result {
        Ok(()) => {
            save(&trainer, &a.out)?;
            info!("finished at step {}", trainer.step);
            Ok(())
        }
        Err(e @ TrainError::NonFiniteLoss { .. }) => {
            warn!("aborting: {e}");
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn io_train(e: std::io::Error) -> TrainError {
    TrainError::Checkpoint(e.into())
}

fn save(t: &Trainer, out: &Path) -> Result<(), TrainError> {
    let ckpt = t.checkpoint();
    ckpt.save(out.join(format!("step-{:08}.tpdm", t.step)))?;
    ckpt.save(out.join(LATEST_CHECKPOINT))?;
    Ok(())
}

pub fn cmd_convert(a: &ConvertArgs) -> CmdResult {
    require_file(&a.input, "input")?;
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.codebook, "codebook")?;
    let mut cfg = load_config(a.config.as_deref())?;
    let conv = &mut cfg.convert;
    if let Some(v) = a.steps {
        conv.sampler.steps = v;
    }
    if let Some(v) = a.seed {
        conv.sampler.seed = v;
    }
    if let Some(v) = a.eta {
        conv.sampler.eta = v;
    }
    if let Some(v) = a.overlap {
        conv.overlap_samples = v;
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let codebook = LoudnessCodebook::load(&a.codebook)?;
    check_codebook(&ckpt, &codebook)?;
    cfg.train = ckpt.config.clone();
    let input = read_wav_mono(&a.input)?;
    let out = convert_clip(
        &ckpt.model,
        &codebook,
        &input,
        cfg.train.sample_rate,
        &cfg.train.f0,
        &cfg.convert.sampler,
        cfg.convert.overlap_samples,
    )?;
    echo_config(&parent_dir(&a.output), "convert", &cfg)?;
    let clipped = write_wav(&out, &a.output, BitDepth::Float32)?;
    if clipped > 0 {
        warn!("{clipped} samples were outside [-1, 1] and were clipped");
    }
    info!("wrote {} ({:.2} s)", a.output.display(), out.duration_secs());
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CmdResult {
    require_file(&a.source, "source")?;
    require_file(&a.converted, "converted file")?;
    let cfg = load_config(a.config.as_deref())?;
    let source = read_wav_mono(&a.source)?;
    let converted = read_wav_mono(&a.converted)?;
    let mut report = evaluate(&source, &converted, &cfg.evaluate)?;
    report.source = Some(a.source.clone());
    report.converted = Some(a.converted.clone());
    report.checkpoint = a.checkpoint_id.clone();
    echo_config(&a.out, "evaluate", &cfg)?;
    write_report(&report, &a.out)?;
    info!(
        "pitch accuracy {:.3}, mean |difference| {:.2} LU, max {:.2} LU",
        report.pitch_accuracy, report.mean_abs_difference_lu, report.max_abs_difference_lu
    );
    Ok(())
}
