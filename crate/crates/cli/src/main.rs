//! `deepa`: feature extraction, training, analysis/synthesis, pitch
//! manipulation, evaluation, diagnostics and plotting from one binary.

mod diagnose;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deepa::checkpoint::{load_checkpoint, resolve_checkpoint_path};
use deepa::corpus::{write_corpus, CorpusConfig};
use deepa::eval::{evaluate_corpus, EvalConfig};
use deepa::pipeline::{extract_features, load_latent, save_latent};
use deepa::training::{Dataset, TrainingLog};
use deepa::{load_wav, save_wav, F0Contour, TrainConfig, Trainer, Vocoder};

#[derive(Parser)]
#[command(name = "deepa", version, about = "Analyzer-synthesizer vocoder with an interpretable latent F0 row")]
struct Cli {
    /// JSON config. Fields it leaves out take their defaults; flags win over both.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw (training batches, synthesis noise).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-utterance work (features, eval).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Directory of `<stem>.f0` contours to use instead of the built-in estimator.
    #[arg(long, global = true)]
    f0_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Log-mel containers and F0 files for every WAV in a directory.
    Features { in_dir: PathBuf, out_dir: PathBuf },
    /// Train from a directory of WAVs; writes `<out>/latest` and `<out>/train_log.jsonl`.
    Train {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// WAV to latent container (posterior mean).
    Analyze {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the F0 read back from the latent row.
        #[arg(long)]
        f0_out: Option<PathBuf>,
    },
    /// Latent container (and optionally an F0 file) to WAV.
    Synthesize {
        latent: PathBuf,
        output: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// F0 control; defaults to the code's own F0 row.
        #[arg(long)]
        f0: Option<PathBuf>,
    },
    /// Analysis followed by synthesis.
    Copysyn {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Shift voiced F0 by a number of semitones through the latent row.
    PitchShift {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        semitones: f64,
    },
    /// MCD, F0 RMSE/MD and V/UV error over name-matched WAV pairs.
    Eval {
        ref_dir: PathBuf,
        hyp_dir: PathBuf,
        output: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Report frames where F0 voicing disagrees with aperiodicity or spectral periodicity.
    Diagnose(diagnose::DiagnoseArgs),
    /// F0 contours over a mel-spectrogram heatmap, as PNG.
    Plot(plot::PlotArgs),
    /// Write the synthetic vowel corpus (WAVs plus ground-truth F0).
    Corpus {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 120)]
        count: usize,
        #[arg(long, default_value_t = 5.0)]
        secs: f64,
        #[arg(long, default_value = "vowel")]
        prefix: String,
    },
}

/// A failure reported as `error: <kind>: <message>`.
#[derive(Debug)]
pub struct Failure {
    kind: &'static str,
    message: String,
}

impl Failure {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl From<deepa::Error> for Failure {
    fn from(e: deepa::Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::new("json", e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::new("io", format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))
}

/// Text contour with a sidecar, or a bare file read at `frame_period_ms`.
pub fn read_f0(path: &Path, frame_period_ms: f64) -> CliResult<F0Contour> {
    let sidecar = deepa::container::sidecar_path(path);
    Ok(if sidecar.exists() {
        F0Contour::load_text(path)?
    } else {
        deepa::f0::load_f0_external(path, frame_period_ms)?
    })
}

impl Cli {
    fn train_config(&self) -> CliResult<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.rng_seed = s;
        }
        if let Some(d) = &self.f0_dir {
            cfg.f0_dir = Some(d.clone());
        }
        Ok(cfg)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Features { in_dir, out_dir } => {
            let cfg = cli.train_config()?;
            let summary = extract_features(in_dir, out_dir, &cfg, cfg.f0_dir.as_deref(), cli.jobs)?;
            println!("wrote features for {} files, skipped {}", summary.written.len(), summary.skipped.len());
        }
        Command::Train {
            data_dir,
            out,
            steps,
            batch_size,
            checkpoint,
        } => {
            let mut cfg = cli.train_config()?;
            if let Some(d) = data_dir {
                cfg.data_dir = d.clone();
            }
            if let Some(o) = out {
                cfg.checkpoint_dir = o.clone();
            }
            if let Some(s) = steps {
                cfg.max_steps = *s;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = *b;
            }
            cfg.validate()?;
            let data = Dataset::from_dir(&cfg)?;
            let log_path = cfg.checkpoint_dir.join("train_log.jsonl");
            std::fs::create_dir_all(&cfg.checkpoint_dir)
                .map_err(|e| Failure::new("io", format!("{}: {e}", cfg.checkpoint_dir.display())))?;
            let (mut trainer, mut log) = match checkpoint {
                Some(p) => {
                    let ck = load_checkpoint(&resolve_checkpoint_path(p), Some(&cfg))?;
                    log::info!("resuming from step {}", ck.step);
                    let t = Trainer::resume(cfg.clone(), data, ck.model, ck.optimizer, ck.step)?;
                    (t, TrainingLog::append(&log_path)?)
                }
                None => (Trainer::new(cfg.clone(), data)?, TrainingLog::create(&log_path)?),
            };
            trainer.run(Some(&mut log), Some(&cfg.checkpoint_dir.join("latest")))?;
            println!("trained to step {}; checkpoint in {}", trainer.step, cfg.checkpoint_dir.join("latest").display());
        }
        Command::Analyze {
            input,
            output,
            checkpoint,
            f0_out,
        } => {
            let v = Vocoder::load(checkpoint)?;
            let a = v.analyze(&load_wav(input)?)?;
            save_latent(&a.z, &v.checkpoint_id, output)?;
            if let Some(p) = f0_out {
                a.f0.save_text(p)?;
            }
            println!("{} frames", a.z.num_frames());
        }
        Command::Synthesize {
            latent,
            output,
            checkpoint,
            f0,
        } => {
            let v = Vocoder::load(checkpoint)?;
            let (z, meta) = load_latent(latent)?;
            if meta.checkpoint_id != v.checkpoint_id {
                log::warn!("latent was made by checkpoint {}, synthesizing with {}", meta.checkpoint_id, v.checkpoint_id);
            }
            let f0 = match f0 {
                Some(p) => read_f0(p, z.frame_period_ms)?,
                None => v.latent_to_f0(&z)?,
            };
            save_wav(&v.synthesize(&z, &f0, cli.seed())?, output)?;
        }
        Command::Copysyn { input, output, checkpoint } => {
            let v = Vocoder::load(checkpoint)?;
            save_wav(&v.copy_synthesis(&load_wav(input)?, cli.seed())?, output)?;
        }
        Command::PitchShift {
            input,
            output,
            checkpoint,
            semitones,
        } => {
            let v = Vocoder::load(checkpoint)?;
            let shifted = v.pitch_shift(&load_wav(input)?, *semitones, cli.seed())?;
            save_wav(&shifted.audio, output)?;
        }
        Command::Eval { ref_dir, hyp_dir, output, csv } => {
            let cfg = match &cli.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Failure::new("io", format!("{}: {e}", p.display())))?;
                    serde_json::from_str::<EvalConfig>(&text)?
                }
                None => EvalConfig::default(),
            };
            let report = evaluate_corpus(ref_dir, hyp_dir, &cfg, cli.jobs)?;
            write_file(output, report.to_json()?)?;
            if let Some(p) = csv {
                write_file(p, report.to_csv())?;
            }
            println!(
                "evaluated {} pairs, {} failures, {} unpaired",
                report.utterances.len(),
                report.failures.len(),
                report.unpaired.len()
            );
        }
        Command::Diagnose(args) => diagnose::run(args)?,
        Command::Plot(args) => plot::run(args)?,
        Command::Corpus {
            out_dir,
            count,
            secs,
            prefix,
        } => {
            let cfg = CorpusConfig {
                num_utterances: *count,
                utterance_secs: *secs,
                seed: cli.seed(),
                prefix: prefix.clone(),
                ..CorpusConfig::default()
            };
            let written = write_corpus(out_dir, &cfg)?;
            println!("wrote {} utterances", written.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.kind, f.message.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
