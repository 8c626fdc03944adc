//! Subcommands of the `gsegan` binary, callable in-process.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gsegan::audio_io::{load_canonical, write_wav};
use gsegan::distortions::{binomial4_pmf, compose_random, replay, AppliedDistortions, DistortionConfig};
use gsegan::error::ErrorKind;
use gsegan::losses::PowerLossConfig;
use gsegan::metrics::{evaluate_corpus, list_wavs, MetricsReport};
use gsegan::segan::{DiscriminatorConfig, GeneratorConfig};
use gsegan::synth::{synth_corpus, SynthConfig};
use gsegan::trainer::{self, Corpus, Preset, TrainConfig, TrainOptions, TrainSchedule};
use gsegan::{gradsuite, par, rng};

/// Environment variable supplying the default `--seed`.
pub const SEED_ENV: &str = "GSEGAN_SEED";

pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const DATA: i32 = 4;
    pub const INTEGRITY: i32 = 5;
    pub const CHECK_FAILED: i32 = 6;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] gsegan::Error),
    #[error("cannot parse {path}: {msg}")]
    ConfigFile { path: PathBuf, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("{failed} of {total} gradient checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => exit::CONFIG,
                ErrorKind::Data => exit::DATA,
                ErrorKind::Integrity => exit::INTEGRITY,
                ErrorKind::Io => exit::IO,
            },
            CliError::ConfigFile { .. } => exit::CONFIG,
            CliError::Usage(_) => exit::USAGE,
            CliError::ChecksFailed { .. } => exit::CHECK_FAILED,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "gsegan", version, about = "Generalized speech enhancement GAN toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic pseudo-speech corpus.
    SynthCorpus(SynthArgs),
    /// Apply random distortions to every WAV of a directory, or replay a manifest.
    Distort(DistortArgs),
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Enhance a WAV file or every WAV of a directory.
    Enhance(EnhanceArgs),
    /// Compare degraded against reference WAVs paired by file name.
    Evaluate(EvaluateArgs),
    /// Run finite-difference checks of every op and both models.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long = "n", default_value_t = 200)]
    pub n_utterances: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistortArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// TOML file with distortion settings (same keys as the `[distortion]` table).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the activation probability.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Re-apply the transforms recorded in this manifest instead of drawing new ones.
    #[arg(long, conflicts_with_all = ["config", "p"])]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Used when the config has no `seed`.
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub degraded: PathBuf,
    /// Write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1.0 / 16.0)]
    pub width_scale: f64,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Coordinates probed per model tensor.
    #[arg(long, default_value_t = 4)]
    pub coords: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn default_width() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleScale {
    #[default]
    Full,
    Smoke,
}

/// Optional replacements for the preset's schedule values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleOverrides {
    pub stage1_epochs: Option<usize>,
    pub stage2_epochs: Option<usize>,
    pub lr_d_stage1: Option<f64>,
    pub lr_g_stage1: Option<f64>,
    pub lr_stage2: Option<f64>,
    pub batch_size: Option<usize>,
}

/// Contents of a training config file. Relative paths are resolved
/// against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    #[serde(default)]
    pub scale: ScheduleScale,
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_width")]
    pub width_scale: f64,
    pub seed: Option<u64>,
    pub keep_checkpoints: Option<usize>,
    #[serde(default)]
    pub schedule: ScheduleOverrides,
    #[serde(default)]
    pub distortion: DistortionConfig,
    #[serde(default)]
    pub power_loss: PowerLossConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| CliError::ConfigFile {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.corpus = base.join(&cfg.corpus);
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn schedule(&self) -> TrainSchedule {
        let mut s = match self.scale {
            ScheduleScale::Full => TrainSchedule::preset(self.preset),
            ScheduleScale::Smoke => TrainSchedule::smoke(self.preset),
        };
        let o = &self.schedule;
        s.stage1_epochs = o.stage1_epochs.unwrap_or(s.stage1_epochs);
        s.stage2_epochs = o.stage2_epochs.unwrap_or(s.stage2_epochs);
        s.lr_d_stage1 = o.lr_d_stage1.unwrap_or(s.lr_d_stage1);
        s.lr_g_stage1 = o.lr_g_stage1.unwrap_or(s.lr_g_stage1);
        s.lr_stage2 = o.lr_stage2.unwrap_or(s.lr_stage2);
        s.batch_size = o.batch_size.unwrap_or(s.batch_size);
        s
    }

    /// Validated training config; `fallback_seed` applies when none is set.
    pub fn train_config(&self, fallback_seed: u64) -> CliResult<TrainConfig> {
        let cfg = TrainConfig {
            schedule: self.schedule(),
            generator: GeneratorConfig::scaled(self.width_scale),
            discriminator: DiscriminatorConfig::scaled(self.width_scale),
            distortion: self.distortion.clone(),
            power_loss: self.power_loss,
            seed: self.seed.unwrap_or(fallback_seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of a distortion manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    #[serde(flatten)]
    pub applied: AppliedDistortions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub n_utterances: usize,
    pub activation_p: f64,
    /// Fraction of utterances with 0..=4 active transforms.
    pub observed: [f64; 5],
    pub expected: [f64; 5],
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const HISTOGRAM_FILE: &str = "histogram.json";

pub fn cmd_synth_corpus(args: &SynthArgs) -> CliResult<()> {
    fs::create_dir_all(&args.out)?;
    let corpus = synth_corpus(args.n_utterances, args.seed, &SynthConfig::default());
    for (name, w) in &corpus {
        write_wav(args.out.join(name), w)?;
    }
    println!("wrote {} utterances to {}", corpus.len(), args.out.display());
    Ok(())
}

fn load_distortion_config(args: &DistortArgs) -> CliResult<DistortionConfig> {
    let mut cfg = match &args.config {
        Some(path) => toml::from_str(&fs::read_to_string(path)?).map_err(|e| CliError::ConfigFile {
            path: path.clone(),
            msg: e.to_string(),
        })?,
        None => DistortionConfig::default(),
    };
    if let Some(p) = args.p {
        cfg.activation_p = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_manifest(path: &Path) -> CliResult<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(gsegan::Error::from)?);
        }
    }
    Ok(out)
}

pub fn cmd_distort(args: &DistortArgs) -> CliResult<()> {
    let files = list_wavs(&args.input)?;
    if files.is_empty() {
        return Err(gsegan::Error::Data(format!("no .wav files in {}", args.input.display())).into());
    }
    fs::create_dir_all(&args.output)?;
    if let Some(manifest) = &args.replay {
        let entries = read_manifest(manifest)?;
        let results = par::map(&entries, |e| -> CliResult<()> {
            let path = files
                .get(&e.name)
                .ok_or_else(|| gsegan::Error::Pairing(e.name.clone()))?;
            let out = replay(&load_canonical(path)?, &e.applied)?;
            write_wav(args.output.join(&e.name), &out)?;
            Ok(())
        });
        results.into_iter().collect::<CliResult<Vec<_>>>()?;
        println!("replayed {} utterances into {}", entries.len(), args.output.display());
        return Ok(());
    }

    let cfg = load_distortion_config(args)?;
    let items: Vec<(usize, (&String, &PathBuf))> = files.iter().enumerate().collect();
    let results = par::map(&items, |&(i, (name, path))| -> CliResult<ManifestEntry> {
        let clean = load_canonical(path)?;
        let (out, applied) = compose_random(&clean, &cfg, &mut rng::stream(args.seed, "distort", &[i as u64]));
        write_wav(args.output.join(name), &out)?;
        Ok(ManifestEntry {
            name: name.clone(),
            applied,
        })
    });
    let entries = results.into_iter().collect::<CliResult<Vec<_>>>()?;

    let mut manifest = fs::File::create(args.output.join(MANIFEST_FILE))?;
    let mut counts = [0usize; 5];
    for e in &entries {
        serde_json::to_writer(&mut manifest, e)?;
        manifest.write_all(b"\n")?;
        counts[e.applied.len()] += 1;
    }
    let hist = HistogramReport {
        n_utterances: entries.len(),
        activation_p: cfg.activation_p,
        observed: counts.map(|c| c as f64 / entries.len() as f64),
        expected: binomial4_pmf(cfg.activation_p),
    };
    fs::write(args.output.join(HISTOGRAM_FILE), serde_json::to_string_pretty(&hist)?)?;
    println!("distorted {} utterances into {}", entries.len(), args.output.display());
    println!("active transforms 0..4: {:?}", hist.observed);
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<PathBuf> {
    let exp = ExperimentConfig::load(&args.config)?;
    let cfg = exp.train_config(args.seed)?;
    let corpus = Corpus::load(&exp.corpus)?;
    let opts = TrainOptions {
        resume: args.resume.clone(),
        stop_after: args.stop_after,
        keep_checkpoints: exp.keep_checkpoints,
    };
    let last = trainer::train(&corpus, cfg, &exp.output_dir, &opts)?;
    println!("last checkpoint: {}", last.display());
    Ok(last)
}

pub fn cmd_enhance(args: &EnhanceArgs) -> CliResult<()> {
    let gen = trainer::load_generator(&args.checkpoint)?;
    let pairs: Vec<(PathBuf, PathBuf)> = if args.input.is_dir() {
        fs::create_dir_all(&args.output)?;
        list_wavs(&args.input)?
            .into_iter()
            .map(|(name, path)| (path, args.output.join(name)))
            .collect()
    } else {
        vec![(args.input.clone(), args.output.clone())]
    };
    for (i, (src, dst)) in pairs.iter().enumerate() {
        let w = load_canonical(src)?;
        let y = trainer::enhance(&gen, &w, rng::derive_seed(args.seed, "enhance", &[i as u64]))?;
        write_wav(dst, &y)?;
    }
    println!("enhanced {} file(s)", pairs.len());
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<MetricsReport> {
    let report = evaluate_corpus(&args.reference, &args.degraded)?;
    print!("{}", report.table());
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<Vec<gradsuite::CaseResult>> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let cases = gradsuite::run(args.width_scale, 0..args.seeds, args.coords)?;
    let failed = cases.iter().filter(|c| !c.passed).count();
    let mut worst: Vec<&gradsuite::CaseResult> = Vec::new();
    for c in &cases {
        match worst.iter_mut().find(|w| w.name == c.name) {
            Some(w) if w.max_rel_error < c.max_rel_error => *w = c,
            Some(_) => {}
            None => worst.push(c),
        }
    }
    for w in &worst {
        println!("{:<24} worst rel err {:.3e} (seed {})", w.name, w.max_rel_error, w.seed);
    }
    println!("{} cases, {failed} failed, tolerance {:e}", cases.len(), gradsuite::TOLERANCE);
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_string_pretty(&cases)?)?;
    }
    if failed > 0 {
        return Err(CliError::ChecksFailed {
            failed,
            total: cases.len(),
        });
    }
    Ok(cases)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::SynthCorpus(a) => cmd_synth_corpus(a),
        Command::Distort(a) => cmd_distort(a),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| ()),
        Command::Gradcheck(a) => cmd_gradcheck(a).map(|_| ()),
    }
}
