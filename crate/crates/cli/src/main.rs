mod chat;
mod config;
mod job;
mod manifest;

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use spectra_core::data::instruct::BuildConfig;
use spectra_core::data::{load_msi, InstructionTemplates, Split, Stretch, SynthConfig};
use spectra_core::eval::{Pooling, ProbeConfig, Provenance};
use spectra_core::lm::Task;
use spectra_core::train::{load_checkpoint, ModelConfig, Stage, StageConfig};
use spectra_core::Error as CoreError;

use config::{usage, ConfigFile, UsageError};
use job::{Captioner, Job};
use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "spectra",
    version,
    about = "Multispectral vision-language alignment at desk scale"
)]
struct Cli {
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file; its tables are overlaid on the defaults, flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step (default: config `seed`, else 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize, caption or render multispectral datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Alignment or instruction finetuning.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Linear-probe feature files across the split ratios.
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// Export pooled features and a 2-D PCA embedding.
    #[command(subcommand)]
    Embed(EmbedCmd),
    /// Label-coverage scores for generated or supplied descriptions.
    Score(ScoreArgs),
    /// Interactive chat about one image.
    Chat(ChatArgs),
    /// Re-run the job recorded in a run manifest and compare artifact hashes.
    Replay {
        /// `run_manifest.json` of an earlier run.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Generate the synthetic class-signature corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        bands: Option<usize>,
        /// Noise standard deviation.
        #[arg(long)]
        sigma: Option<f32>,
    },
    /// Caption a labelled dataset and write the instruction JSONL.
    Build {
        #[command(flatten)]
        common: Common,
        /// Directory holding labels.csv and its images.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = CaptionerKind::Stub)]
        captioner: CaptionerKind,
        /// Captioning service URL (remote captioner).
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
        #[arg(long, default_value_t = 3)]
        attempts: u32,
        #[arg(long, default_value_t = 500)]
        backoff_ms: u64,
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        val_fraction: Option<f64>,
    },
    /// Render MSI files as percentile-stretched RGB PNGs.
    ToRgb {
        #[command(flatten)]
        common: Common,
        /// An MSI file or a directory of them.
        #[arg(long)]
        input: PathBuf,
        /// Band indices for red,green,blue (default: Sentinel-2 B4,B3,B2).
        #[arg(long, value_delimiter = ',', num_args = 3)]
        bands: Option<Vec<usize>>,
        /// Lower percentile of the stretch.
        #[arg(long)]
        lo: Option<f64>,
        /// Upper percentile of the stretch.
        #[arg(long)]
        hi: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CaptionerKind {
    Stub,
    Remote,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// instructions.jsonl from `dataset build`.
    #[arg(long)]
    instructions: PathBuf,
    /// Checkpoint to start from (required for finetuning).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    effective_batch: Option<usize>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Train the projector only.
    Align(TrainArgs),
    /// Train the projector and LoRA adapters.
    Finetune(TrainArgs),
}

#[derive(Subcommand)]
enum ProbeCmd {
    /// 9 ratios × k folds per feature file.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// features.csv files from `embed export`.
        #[arg(long, required = true, num_args = 1..)]
        features: Vec<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch: Option<usize>,
        /// Probe raw features instead of z-scored ones.
        #[arg(long)]
        no_standardize: bool,
    },
}

#[derive(Subcommand)]
enum EmbedCmd {
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding labels.csv and its images.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = ProvenanceArg::VisionOnly)]
        provenance: ProvenanceArg,
        #[arg(long, value_enum, default_value_t = PoolingArg::Mean)]
        pooling: PoolingArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ProvenanceArg {
    VisionOnly,
    LanguageGroundedClasslabel,
    LanguageGroundedScenedesc,
}

impl From<ProvenanceArg> for Provenance {
    fn from(p: ProvenanceArg) -> Self {
        match p {
            ProvenanceArg::VisionOnly => Provenance::VisionOnly,
            ProvenanceArg::LanguageGroundedClasslabel => Provenance::LanguageGroundedClasslabel,
            ProvenanceArg::LanguageGroundedScenedesc => Provenance::LanguageGroundedScenedesc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Mean,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    /// JSONL of `{id, text, labels}` to score as-is.
    #[arg(long, conflicts_with_all = ["checkpoint", "instructions"])]
    descriptions: Option<PathBuf>,
    /// Generate captions with this checkpoint instead.
    #[arg(long, requires = "instructions")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    instructions: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 96)]
    max_tokens: usize,
}

#[derive(Args)]
struct ChatArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// MSI image to talk about.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "caption")]
    task: String,
    #[arg(long, default_value_t = 96)]
    max_tokens: usize,
}

fn resolve_seed(common: &Common, cfg: &ConfigFile) -> Result<u64> {
    Ok(match common.seed {
        Some(s) => s,
        None => cfg.seed()?.unwrap_or(0),
    })
}

fn model_config(cfg: &ConfigFile) -> Result<ModelConfig> {
    cfg.section("model", ModelConfig::default())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Turns parsed flags into a fully resolved job plus its output directory.
fn resolve(command: Command) -> Result<(Job, PathBuf)> {
    Ok(match command {
        Command::Dataset(DatasetCmd::Synth {
            common,
            classes,
            per_class,
            image_size,
            bands,
            sigma,
        }) => {
            let cfg = ConfigFile::load(common.config.as_deref())?;
            let mut synth = cfg.section("synth", SynthConfig::default())?;
            set(&mut synth.image_size, image_size);
            set(&mut synth.bands, bands);
            set(&mut synth.sigma, sigma);
            let job = job::SynthJob {
                seed: resolve_seed(&common, &cfg)?,
                classes,
                per_class,
                synth,
            };
            (Job::DatasetSynth(job), common.out)
        }
        Command::Dataset(DatasetCmd::Build {
            common,
            dataset,
            captioner,
            endpoint,
            timeout_ms,
            attempts,
            backoff_ms,
            train_fraction,
            val_fraction,
        }) => {
            let cfg = ConfigFile::load(common.config.as_deref())?;
            let mut build = cfg.section("build", BuildConfig::default())?;
            build.seed = resolve_seed(&common, &cfg)?;
            set(&mut build.train_fraction, train_fraction);
            set(&mut build.val_fraction, val_fraction);
            let captioner = match captioner {
                CaptionerKind::Stub => Captioner::Stub,
                CaptionerKind::Remote => Captioner::Remote {
                    endpoint: endpoint.ok_or_else(|| usage("--captioner remote needs --endpoint"))?,
                    timeout_ms,
                    attempts,
                    backoff_ms,
                },
            };
            let job = job::BuildJob {
                dataset: job::input_path(&dataset)?,
                captioner,
                build,
                templates: cfg.section("templates", InstructionTemplates::default())?,
            };
            (Job::DatasetBuild(job), common.out)
        }
        Command::Dataset(DatasetCmd::ToRgb {
            common,
            input,
            bands,
            lo,
            hi,
        }) => {
            let cfg = ConfigFile::load(common.config.as_deref())?;
            let mut stretch = cfg.section("stretch", Stretch::default())?;
            set(&mut stretch.lo, lo);
            set(&mut stretch.hi, hi);
            let job = job::RgbJob {
                input: job::input_path(&input)?,
                bands: bands.map(|b| [b[0], b[1], b[2]]),
                stretch,
            };
            (Job::DatasetToRgb(job), common.out)
        }
        Command::Train(cmd) => {
            let (stage, a) = match cmd {
                TrainCmd::Align(a) => (Stage::Align, a),
                TrainCmd::Finetune(a) => (Stage::Finetune, a),
            };
            let cfg = ConfigFile::load(a.common.config.as_deref())?;
            let seed = resolve_seed(&a.common, &cfg)?;
            let init = a.checkpoint.as_deref().map(job::input_path).transpose()?;
            let model = match &init {
                Some(p) => job::model_for_checkpoint(p, model_config(&cfg)?)?,
                None => model_config(&cfg)?,
            };
            let mut base = StageConfig::for_stage(stage);
            base.image_size = model.encoder.patch.image_size;
            let mut train = cfg.section("train", base)?;
            if train.stage != stage {
                return Err(usage(format!(
                    "config [train] stage `{}` conflicts with the subcommand",
                    train.stage.name()
                )));
            }
            train.seed = seed;
            set(&mut train.epochs, a.epochs);
            set(&mut train.lr, a.lr);
            set(&mut train.effective_batch, a.effective_batch);
            set(&mut train.micro_batch, a.micro_batch);
            if a.steps.is_some() {
                train.steps = a.steps;
            }
            if a.checkpoint_every.is_some() {
                train.checkpoint_every = a.checkpoint_every;
            }
            train.validate()?;
            let job = job::TrainJob {
                instructions: job::input_path(&a.instructions)?,
                init,
                seed,
                model,
                train,
            };
            (Job::Train(job), a.common.out)
        }
        Command::Probe(ProbeCmd::Sweep {
            common,
            features,
            folds,
            epochs,
            lr,
            batch,
            no_standardize,
        }) => {
            let cfg = ConfigFile::load(common.config.as_deref())?;
            let mut probe = cfg.section("probe", ProbeConfig::default())?;
            probe.seed = resolve_seed(&common, &cfg)?;
            set(&mut probe.folds, folds);
            set(&mut probe.epochs, epochs);
            set(&mut probe.lr, lr);
            set(&mut probe.batch, batch);
            if no_standardize {
                probe.standardize = false;
            }
            probe.validate()?;
            let features = features.iter().map(|p| job::input_path(p)).collect::<Result<_>>()?;
            (Job::ProbeSweep(job::ProbeJob { features, probe }), common.out)
        }
        Command::Embed(EmbedCmd::Export {
            common,
            checkpoint,
            dataset,
            provenance,
            pooling,
        }) => {
            let cfg = ConfigFile::load(common.config.as_deref())?;
            let checkpoint = job::input_path(&checkpoint)?;
            let job = job::EmbedJob {
                model: job::model_for_checkpoint(&checkpoint, model_config(&cfg)?)?,
                checkpoint,
                dataset: job::input_path(&dataset)?,
                provenance: provenance.into(),
                pooling: match pooling {
                    PoolingArg::Mean => Pooling::Mean,
                    PoolingArg::Max => Pooling::Max,
                },
                seed: resolve_seed(&common, &cfg)?,
            };
            (Job::EmbedExport(job), common.out)
        }
        Command::Score(a) => {
            let cfg = ConfigFile::load(a.common.config.as_deref())?;
            let job = match (a.descriptions, a.checkpoint, a.instructions) {
                (Some(path), None, None) => job::ScoreJob::Descriptions {
                    path: job::input_path(&path)?,
                },
                (None, Some(ck), Some(instructions)) => {
                    let checkpoint = job::input_path(&ck)?;
                    job::ScoreJob::Generate {
                        model: job::model_for_checkpoint(&checkpoint, model_config(&cfg)?)?,
                        checkpoint,
                        instructions: job::input_path(&instructions)?,
                        split: match a.split {
                            SplitArg::Train => Some(Split::Train),
                            SplitArg::Val => Some(Split::Val),
                            SplitArg::Test => Some(Split::Test),
                            SplitArg::All => None,
                        },
                        max_tokens: a.max_tokens,
                    }
                }
                _ => return Err(usage("score needs --descriptions, or --checkpoint with --instructions")),
            };
            (Job::Score(job), a.common.out)
        }
        Command::Chat(_) | Command::Replay { .. } => unreachable!("handled before resolution"),
    })
}

fn run_job(job: Job, out: &Path) -> Result<()> {
    log::info!("{} -> {}", job.name(), out.display());
    let summary = job.execute(out)?;
    let path = RunManifest::new(job, out)?.write(out)?;
    println!("{summary}");
    log::info!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug)]
struct ReplayMismatch(Vec<String>);

impl std::fmt::Display for ReplayMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "replay differs from the recorded run: {}", self.0.join(", "))
    }
}

impl std::error::Error for ReplayMismatch {}

fn replay(manifest: &Path, out: &Path) -> Result<()> {
    let recorded = RunManifest::read(manifest)?;
    log::info!("replaying {} from {}", recorded.job.name(), manifest.display());
    recorded.job.execute(out)?;
    let fresh = RunManifest::new(recorded.job.clone(), out)?;
    fresh.write(out)?;
    let diff = manifest::diff(&recorded.artifacts, &fresh.artifacts);
    if !diff.is_empty() {
        return Err(ReplayMismatch(diff).into());
    }
    println!("{} artifacts identical", fresh.artifacts.len());
    Ok(())
}

fn chat(a: ChatArgs) -> Result<()> {
    let task = Task::parse(&a.task).ok_or_else(|| usage(format!("unknown task `{}`", a.task)))?;
    let cfg = ConfigFile::load(a.config.as_deref())?;
    let img = load_msi(&a.image)?;
    let model = job::model_for_checkpoint(&a.checkpoint, model_config(&cfg)?)?;
    let ck = load_checkpoint(&a.checkpoint, &model)?;
    if ck.adapters.is_none() {
        log::warn!("checkpoint has no LoRA adapters; answers come from the aligned base model");
    }
    let image = ck.projector.project(&ck.encoder.encode(&img)?)?;
    let stdin = std::io::stdin();
    let interactive = stdin.is_terminal();
    let mut session = chat::Session {
        checkpoint: &ck,
        image: &image,
        task,
        max_tokens: a.max_tokens,
    };
    let diag: Box<dyn std::io::Write> = if interactive {
        Box::new(std::io::stderr())
    } else {
        Box::new(std::io::sink())
    };
    session.run(stdin.lock(), std::io::stdout().lock(), diag)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() || cause.is::<toml::de::Error>() {
            return 1;
        }
        if cause.is::<ReplayMismatch>() {
            return 3;
        }
        if let Some(c) = cause.downcast_ref::<CoreError>() {
            return match c {
                CoreError::Config(_) | CoreError::InvalidStretch { .. } | CoreError::BandMapping(_) => 1,
                CoreError::NonFiniteLoss(_)
                | CoreError::NonFiniteGradient(_)
                | CoreError::ZeroVariance
                | CoreError::FrozenViolation(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

/// The error chain on one line, skipping causes already spelled out by the
/// message above them.
fn render(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("SPECTRA_NUM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("SPECTRA_NUM_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("SPECTRA_LOG")
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();

    let result = init_threads().and_then(|()| match cli.command {
        Command::Chat(a) => chat(a),
        Command::Replay { manifest, out } => replay(&manifest, &out),
        other => resolve(other).and_then(|(job, out)| run_job(job, &out)),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
