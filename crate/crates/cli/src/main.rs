use std::path::{Path, PathBuf};
use std::process::ExitCode;

use capvqa::autograd::Fault;
use capvqa::captioner::DecodeMode;
use capvqa::harness::{self, Predictor, RunControl, TrainConfig};
use capvqa::metrics::{Ablation, CaptionSource};
use capvqa::microworld::{self, Split, WorldConfig};
use capvqa::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "capvqa", version, about = "Joint VQA and question-steered captioning on a synthetic micro-world")]
struct Cli {
    /// Training configuration file (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation or training; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path: dataset file for gen-data, run directory for train, report file for evaluate.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a micro-world dataset file.
    GenData {
        #[arg(long)]
        train_scenes: Option<usize>,
        #[arg(long)]
        val_scenes: Option<usize>,
        #[arg(long)]
        relevance: Option<f64>,
        #[arg(long)]
        feature_noise: Option<f64>,
    },
    /// Run the two-phase schedule, writing checkpoint, metrics and generated captions.
    Train {
        /// Dataset file; defaults to `dataset` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Print one metrics row per epoch to stderr.
        #[arg(long, short)]
        verbose: bool,
    },
    /// Evaluate a checkpoint on a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = SourceArg::Annotated)]
        captions: SourceArg,
        #[arg(long, value_enum, default_value_t = AblationArg::None)]
        ablation: AblationArg,
    },
    /// Answer one question about one scene.
    Answer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long)]
        question: String,
        #[arg(long, value_enum, default_value_t = SourceArg::Annotated)]
        captions: SourceArg,
    },
    /// Generate a caption for one scene, optionally steered by a question.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long, default_value = "")]
        question: String,
        /// Beam width; 1 decodes greedily.
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Gradient checks, selection oracle, attention normalization and dataset round trip.
    Selftest {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Annotated,
    Generated,
    Zeroed,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    None,
    ZeroCaptions,
    ZeroImages,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

impl From<SourceArg> for CaptionSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Annotated => CaptionSource::Annotated,
            SourceArg::Generated => CaptionSource::Generated,
            SourceArg::Zeroed => CaptionSource::Zeroed,
        }
    }
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::None => Ablation::None,
            AblationArg::ZeroCaptions => Ablation::ZeroCaptions,
            AblationArg::ZeroImages => Ablation::ZeroImages,
        }
    }
}

fn load_config(cli: &Cli) -> Result<TrainConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match &cli.command {
        Command::GenData {
            train_scenes,
            val_scenes,
            relevance,
            feature_noise,
        } => {
            let defaults = WorldConfig::default();
            let cfg = WorldConfig {
                train_scenes: train_scenes.unwrap_or(defaults.train_scenes),
                val_scenes: val_scenes.unwrap_or(defaults.val_scenes),
                relevance: relevance.unwrap_or(defaults.relevance),
                feature_noise: feature_noise.unwrap_or(defaults.feature_noise),
                ..defaults
            };
            let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("microworld.mw1"));
            let ds = microworld::generate_dataset(&cfg, cli.seed.unwrap_or(0))?;
            microworld::write_dataset(&ds, &path)?;
            eprintln!(
                "wrote {} ({} train / {} val scenes, {} words, {} answers)",
                path.display(),
                ds.train.len(),
                ds.val.len(),
                ds.words.len(),
                ds.answers.len()
            );
        }
        Command::Train { data, resume, verbose } => {
            let cfg = load_config(&cli)?;
            let data = data
                .clone()
                .or_else(|| cfg.dataset.clone())
                .ok_or_else(|| Error::Config("no dataset: pass --data or set dataset= in the config".into()))?;
            let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("run"));
            cfg.validate()?;
            let ds = microworld::read_dataset(&data)?;
            let run = harness::train(
                &cfg,
                &ds,
                &out,
                RunControl {
                    resume: *resume,
                    stop_after: None,
                    verbose: *verbose,
                },
            )?;
            if let Some(last) = run.rows.last() {
                println!("{}", harness::METRICS_HEADER);
                println!("{}", last.csv_row());
            }
            eprintln!("checkpoint and metrics in {}", out.display());
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            captions,
            ablation,
        } => {
            let ds = microworld::read_dataset(data)?;
            let report = harness::evaluate(checkpoint, &ds, (*split).into(), (*captions).into(), (*ablation).into())?;
            write_or_print(cli.out.as_deref(), &report.to_string())?;
        }
        Command::Answer {
            checkpoint,
            data,
            scene,
            question,
            captions,
        } => {
            let ds = microworld::read_dataset(data)?;
            let predictor = Predictor::load(&ds, checkpoint)?;
            let a = predictor.answer(&ds, *scene, question, (*captions).into())?;
            for c in &a.captions {
                eprintln!("caption: {c}");
            }
            println!("{}\t{:.4}", a.answer, a.score);
        }
        Command::Caption {
            checkpoint,
            data,
            scene,
            question,
            beam,
        } => {
            let ds = microworld::read_dataset(data)?;
            let predictor = Predictor::load(&ds, checkpoint)?;
            let mode = match beam {
                0 => return Err(Error::InvalidArgument("beam width must be at least 1".into())),
                1 => DecodeMode::Greedy,
                k => DecodeMode::Beam(*k),
            };
            let (text, g) = predictor.caption(&ds, *scene, question, mode)?;
            println!("{text}\t{:.4}", g.logprob);
        }
        Command::Selftest { inject_fault } => {
            let fault = if *inject_fault { Fault::SigmoidDerivative } else { Fault::None };
            let report = capvqa::selfcheck::run(fault)?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{:.1}s", report.seconds);
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
