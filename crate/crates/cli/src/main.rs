//! `selfadapt`: corpus synthesis, training, enhancement, evaluation and the
//! protocol comparison from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numerical failure (non-finite loss).

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selfadapt_core::data::{generate_corpus, Manifest, Split, MANIFEST_FILE};
use selfadapt_core::dsp::wav::{read_wav, write_wav, WavEncoding};
use selfadapt_core::model::Model;
use selfadapt_core::training::{
    evaluate, metrics_csv, run_verification_experiment, train, ExperimentConfig, TestSummary, UtteranceMetrics,
    VerificationRow, VerificationTable,
};
use selfadapt_core::Error;

#[derive(Parser)]
#[command(name = "selfadapt", version, about = "Self-adapting DNN speech enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON file with corpus, model, train, loss and stft sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted key into the config, e.g. `train.epochs=10`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (WAVs and manifest.jsonl).
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one protocol arm on a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Enhance WAV files with a trained model.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write per-frame speaker posteriors and attention maps.
        #[arg(long)]
        diagnostics: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score a model on one split of a corpus.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Train Close, Open and Open+SPK and write the comparison table.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
        /// Existing corpus; generated under OUT_DIR/corpus when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Print a summary of a checkpoint or a manifest.
    Inspect {
        #[arg(long, required_unless_present = "manifest")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (train, dev, test)")),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create_dir(dir: &Path) -> selfadapt_core::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> selfadapt_core::Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolves the configuration and echoes it to `out_dir/resolved_config.json`.
fn resolve(base: ExperimentConfig, common: &Common, out_dir: &Path, seed_corpus: bool) -> selfadapt_core::Result<ExperimentConfig> {
    let mut cfg = config::resolve(base, common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        if seed_corpus {
            cfg.corpus.seed = seed;
        } else {
            cfg.train.seed = seed;
        }
    }
    create_dir(out_dir)?;
    write(&out_dir.join("resolved_config.json"), &config::to_pretty_json(&cfg)?)?;
    Ok(cfg)
}

fn run(command: Command) -> selfadapt_core::Result<()> {
    match command {
        Command::SynthData { common, out_dir } => {
            let cfg = resolve(ExperimentConfig::default(), &common, &out_dir, true)?;
            let corpus = generate_corpus(&cfg.corpus, &out_dir)?;
            println!("wrote {} utterances to {}", corpus.pairs.len(), out_dir.join(MANIFEST_FILE).display());
        }
        Command::Train {
            common,
            manifest,
            out_dir,
        } => {
            let cfg = resolve(ExperimentConfig::default(), &common, &out_dir, false)?;
            let corpus = Manifest::read(&manifest)?.load()?;
            let outcome = train(&corpus, &cfg, Some(&out_dir))?;
            if let Some(t) = &outcome.report.test {
                println!(
                    "{}: test SI-SDR {:.2} dB (noisy {:.2} dB), best epoch {}",
                    outcome.report.protocol.label(),
                    t.si_sdr,
                    t.noisy_si_sdr,
                    outcome.report.best_epoch
                );
            }
        }
        Command::Enhance {
            checkpoint,
            out_dir,
            diagnostics,
            inputs,
        } => {
            let model = Model::load(&checkpoint)?;
            create_dir(&out_dir)?;
            for input in &inputs {
                let audio = read_wav(input)?;
                let out = model.enhance(&audio.samples)?;
                let stem = input
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "enhanced".into());
                let path = out_dir.join(format!("{stem}.wav"));
                write_wav(&path, &out.samples, audio.sample_rate, WavEncoding::Float32)?;
                if diagnostics {
                    out.write_diagnostics(&out_dir, &stem)?;
                }
                println!("{} -> {}", input.display(), path.display());
            }
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            out_dir,
            split,
        } => {
            let model = Model::load(&checkpoint)?;
            let corpus = Manifest::read(&manifest)?.load()?;
            let pairs: Vec<_> = corpus
                .pairs
                .iter()
                .zip(&corpus.manifest.entries)
                .filter(|(_, e)| e.split == split)
                .map(|(p, _)| p)
                .collect();
            if pairs.is_empty() {
                return Err(Error::Data(format!("split {split:?} of {} is empty", manifest.display())));
            }
            let loss = selfadapt_core::objectives::LossConfig::default();
            let rows = evaluate(&model, &pairs, &loss)?;
            create_dir(&out_dir)?;
            write(&out_dir.join("metrics.csv"), &with_mean_row(&rows))?;
            let noisy = selfadapt_core::training::evaluate_noisy(&pairs, &loss)?;
            let noisy_loss = noisy.iter().map(|r| r.loss.total).sum::<f64>() / noisy.len() as f64;
            let summary = TestSummary::from_metrics(&rows, noisy_loss);
            let table = VerificationTable {
                rows: vec![
                    VerificationRow {
                        method: "Noisy".into(),
                        si_sdr: summary.noisy_si_sdr,
                        loss: summary.noisy_loss,
                    },
                    VerificationRow {
                        method: "Model".into(),
                        si_sdr: summary.si_sdr,
                        loss: summary.loss,
                    },
                ],
            };
            write(&out_dir.join("summary.csv"), &table.to_csv())?;
            print!("{}", table.to_csv());
        }
        Command::Verify {
            common,
            out_dir,
            manifest,
        } => {
            let cfg = resolve(ExperimentConfig::verification(), &common, &out_dir, false)?;
            let corpus = match manifest {
                Some(path) => Manifest::read(&path)?.load()?,
                None => generate_corpus(&cfg.corpus, &out_dir.join("corpus"))?,
            };
            let (table, _) = run_verification_experiment(&corpus, &cfg, Some(&out_dir))?;
            print!("{}", table.to_csv());
        }
        Command::Inspect { checkpoint, manifest } => {
            if let Some(dir) = checkpoint {
                let model = Model::load(&dir)?;
                let json = serde_json::to_string_pretty(model.config()).map_err(|e| Error::json("model config", e))?;
                println!("{json}");
                println!("parameters: {} in {} tensors", model.params.numel(), model.params.len());
                for (_, name, t) in model.params.iter() {
                    println!("  {name} {:?}", t.shape());
                }
            }
            if let Some(path) = manifest {
                let m = Manifest::read(&path)?;
                println!("utterances: {}", m.entries.len());
                for spk in m.speakers() {
                    let count = |s: Split| m.entries.iter().filter(|e| e.speaker == spk && e.split == s).count();
                    println!(
                        "  speaker {spk}: train {} dev {} test {}",
                        count(Split::Train),
                        count(Split::Dev),
                        count(Split::Test)
                    );
                }
            }
        }
    }
    Ok(())
}

/// Per-utterance rows followed by a `mean` row.
fn with_mean_row(rows: &[UtteranceMetrics]) -> String {
    let mut out = metrics_csv(rows);
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&UtteranceMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    out.push_str(&format!(
        "mean,,{},{},{},{},{},{}\n",
        mean(&|r| r.noisy_si_sdr),
        mean(&|r| r.si_sdr),
        mean(&|r| r.sdr),
        mean(&|r| r.loss.total),
        mean(&|r| r.loss.sdr_speech),
        mean(&|r| r.loss.sdr_noise)
    ));
    out
}
