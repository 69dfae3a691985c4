//! The `efr` command line.
//!
//! Exit codes: 0 on success, 1 when an input fails validation (bad
//! arguments, malformed files, configuration or checkpoint errors), 2 when a
//! run fails. Flags given on the command line override the config file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::agreement::{krippendorff_alpha, AgreementLayer, AgreementReport};
use crate::corpus::{
    import_meld_csv, read_annotations, read_dialogues, read_instances, write_dialogues, write_instances,
};
use crate::error::{Error, Result};
use crate::eval::{ablation_report, directionality_report, gold_labels, weighted_prf, InstanceLabels, Scope};
use crate::instances::{build_instances, corpus_stats};
use crate::model::TgifConfig;
use crate::taxonomy::LabelSetup;
use crate::training::{load_checkpoint, save_checkpoint, train, write_log};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Parser)]
#[command(
    name = "efr",
    version,
    about = "Emotion flip reasoning: corpus tools, TGIF training and evaluation"
)]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Report format for commands that print reports.
    #[arg(long, global = true, value_enum, default_value = "table")]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a MELD-style CSV into dialogue JSON lines.
    ImportMeld {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split name stored on every dialogue.
        #[arg(long)]
        split: Option<String>,
    },
    /// Build one instance per emotion flip.
    BuildInstances {
        #[arg(long)]
        dialogues: PathBuf,
        /// Gold trigger/instigator annotations to attach.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flip matrix, label distributions and polarity totals.
    Stats {
        #[arg(long)]
        instances: PathBuf,
    },
    /// Pairwise Krippendorff's alpha between annotator files.
    Agreement {
        #[arg(long, num_args = 2..=3, required = true)]
        annotations: Vec<PathBuf>,
        #[arg(long)]
        layer: AgreementLayer,
        /// Instances whose utterance counts define the units.
        #[arg(long)]
        instances: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// JSON config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        setup: Option<LabelSetup>,
        /// Per-epoch JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Weighted precision, recall and F1 of a checkpoint on a test file.
    Eval {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "all")]
        scope: Scope,
        /// Also report the negative/positive flip-direction buckets.
        #[arg(long)]
        directionality: bool,
        /// Fail unless the checkpoint predicts this label setup.
        #[arg(long)]
        setup: Option<LabelSetup>,
    },
    /// Write per-utterance predictions as JSON lines.
    Predict {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Module ablation: four encoder combinations under three label setups.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Reports go to `out`, diagnostics to `err`.
pub fn run_with<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let target: &mut dyn std::io::Write = if code == 0 { out } else { err };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn emit(out: &mut dyn std::io::Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| {
            if text.ends_with('\n') {
                Ok(())
            } else {
                out.write_all(b"\n")
            }
        })
        .map_err(|e| Error::io("<stdout>", e))
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn load_config(path: Option<&Path>) -> Result<TgifConfig> {
    match path {
        Some(p) => TgifConfig::read(p),
        None => Ok(TgifConfig::default()),
    }
}

fn agreement_table(report: &AgreementReport) -> String {
    let mut s = format!("{:<20} {:<20} {:>7} {:>8}\n", "first", "second", "units", "alpha");
    for p in &report.pairs {
        s.push_str(&format!(
            "{:<20} {:<20} {:>7} {:>8.4}\n",
            p.first, p.second, p.units, p.alpha
        ));
    }
    s.push_str(&format!("mean alpha {:.4}\n", report.mean));
    s
}

fn execute(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Invalid("--jobs must be at least 1".into()));
        }
        // Fails only when a pool already exists (e.g. repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let format = cli.format;
    match cli.command {
        Command::ImportMeld { csv, out: path, split } => {
            let dialogues = import_meld_csv(&csv, split.as_deref())?;
            write_dialogues(&dialogues, &path)?;
            emit(
                out,
                &format!("wrote {} dialogues to {}", dialogues.len(), path.display()),
            )
        }
        Command::BuildInstances {
            dialogues,
            gold,
            out: path,
        } => {
            let dialogues = read_dialogues(&dialogues)?;
            let gold = gold.map(read_annotations).transpose()?;
            let instances = build_instances(&dialogues, gold.as_ref())?;
            write_instances(&instances, &path)?;
            emit(
                out,
                &format!("wrote {} instances to {}", instances.len(), path.display()),
            )
        }
        Command::Stats { instances } => {
            let report = corpus_stats(&read_instances(&instances)?);
            emit(
                out,
                &match format {
                    Format::Json => report.to_json(),
                    Format::Table => report.to_table(),
                },
            )
        }
        Command::Agreement {
            annotations,
            layer,
            instances,
        } => {
            let files = annotations.iter().map(read_annotations).collect::<Result<Vec<_>>>()?;
            let lengths: Option<BTreeMap<String, usize>> = instances
                .map(|p| read_instances(&p))
                .transpose()?
                .map(|insts| insts.into_iter().map(|i| (i.instance_id.clone(), i.len())).collect());
            let report = krippendorff_alpha(&files, layer, lengths.as_ref())?;
            emit(
                out,
                &match format {
                    Format::Json => json(&report),
                    Format::Table => agreement_table(&report),
                },
            )
        }
        Command::Train {
            train: train_path,
            dev,
            config,
            seed,
            out: path,
            epochs,
            learning_rate,
            batch_size,
            setup,
            log,
        } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                config.epochs = e;
            }
            if let Some(lr) = learning_rate {
                config.learning_rate = lr;
            }
            if let Some(b) = batch_size {
                config.batch_size = b;
            }
            if let Some(s) = setup {
                config.label_setup = s;
            }
            config.validate()?;
            let train_set = read_instances(&train_path)?;
            let dev_set = read_instances(&dev)?;
            let outcome = train(&train_set, &dev_set, &config, seed)?;
            save_checkpoint(&outcome.model, &path)?;
            if let Some(log_path) = log {
                write_log(&outcome.log, log_path)?;
            }
            let last = outcome.log.last();
            emit(
                out,
                &format!(
                    "trained {} epochs; kept epoch {}; final train loss {}; wrote {}",
                    outcome.log.len(),
                    outcome.best_epoch.map_or("-".to_string(), |e| e.to_string()),
                    last.map_or("-".to_string(), |l| format!("{:.6}", l.train_loss)),
                    path.display()
                ),
            )
        }
        Command::Eval {
            test,
            ckpt,
            scope,
            directionality,
            setup,
        } => {
            let model = load_checkpoint(&ckpt)?;
            if let Some(expected) = setup {
                if model.space.setup() != expected {
                    return Err(Error::Config(format!(
                        "label-space mismatch: checkpoint predicts {}, evaluation expects {}",
                        model.space.setup().as_str(),
                        expected.as_str()
                    )));
                }
            }
            let instances = read_instances(&test)?;
            let gold = gold_labels(&instances, &model.space);
            let pred: Vec<InstanceLabels> = model
                .predict_all(&instances)?
                .iter()
                .map(InstanceLabels::predicted)
                .collect();
            let metrics = weighted_prf(&gold, &pred, &model.space, scope)?;
            let direction = directionality
                .then(|| directionality_report(&gold, &pred, &instances, &model.space, scope))
                .transpose()?;
            let text = match format {
                Format::Json => match &direction {
                    Some(d) => json(&serde_json::json!({ "metrics": metrics, "directionality": d })),
                    None => metrics.to_json(),
                },
                Format::Table => {
                    let mut t = metrics.to_table();
                    if let Some(d) = &direction {
                        t.push('\n');
                        t.push_str(&d.to_table());
                    }
                    t
                }
            };
            emit(out, &text)
        }
        Command::Predict {
            instances,
            ckpt,
            out: path,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let instances = read_instances(&instances)?;
            let predictions = model.predict_all(&instances)?;
            let mut text = String::new();
            for p in &predictions {
                text.push_str(&p.to_json_line(&model.space));
                text.push('\n');
            }
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            emit(
                out,
                &format!("wrote {} predictions to {}", predictions.len(), path.display()),
            )
        }
        Command::Ablate {
            train: train_path,
            dev,
            config,
            seed,
            epochs,
        } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                config.epochs = e;
            }
            config.validate()?;
            let report = ablation_report(&read_instances(&train_path)?, &read_instances(&dev)?, &config, seed)?;
            emit(
                out,
                &match format {
                    Format::Json => report.to_json(),
                    Format::Table => report.to_table(),
                },
            )
        }
    }
}

/// Entry point used by the `efr` binary.
pub fn main_exit_code() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
