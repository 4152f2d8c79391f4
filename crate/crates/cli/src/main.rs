use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use maskvar_cli::ablation::{parse_toggles, run_ablation};
use maskvar_cli::config::load_config;
use maskvar_cli::error::CliError;
use maskvar_cli::pipeline::{
    evaluate_files, run_evaluate, run_finetune, run_inject, run_pretrain, run_score,
};
use maskvar_cli::report::run_report;
use maskvar_cli::synth::run_synth;

/// Zero-shot time-series anomaly detection: synthesize corpora, inject
/// anomalies, train masked-reconstruction models, score, and evaluate.
#[derive(Parser)]
#[command(name = "maskvar", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,

    /// Override one config key, e.g. --set train.epochs=5. Repeatable;
    /// values parse as JSON, falling back to plain strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<maskvar_cli::RunConfig, CliError> {
        load_config(&self.config, &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with one family held out for testing.
    Synth(ConfigArgs),
    /// Inject labeled anomalies into the test-role series.
    Inject(ConfigArgs),
    /// Train a model from scratch on the manifest's normal data.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from this run's pretrain checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Continue training an existing checkpoint.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to start from; defaults to this run's pretrain output.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the test-role series and calibrate a decision threshold.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to score with; defaults to this run's finetune output,
        /// then its pretrain output.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate decisions against labels, per test series.
    Evaluate {
        /// Run configuration (JSON). Not needed with --scores/--labels.
        #[arg(long, required_unless_present = "scores")]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Score table (t,score,decision CSV) for direct evaluation.
        #[arg(long, requires = "labels", requires = "out")]
        scores: Option<PathBuf>,
        /// Labeled series (CSV with a label column) for direct evaluation.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Where to write the report JSON in direct evaluation.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a run: metrics table and score-over-time plots.
    Report(ConfigArgs),
    /// Compare the full model against single-mechanism ablations.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated mechanisms to ablate: adabn, adversarial,
        /// dual_decoders. Defaults to all three.
        #[arg(long)]
        toggles: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => {
            let manifest = run_synth(&args.load()?)?;
            println!("wrote corpus manifest {}", manifest.display());
        }
        Command::Inject(args) => {
            let manifest = run_inject(&args.load()?)?;
            println!("wrote injected manifest {}", manifest.display());
        }
        Command::Pretrain { cfg, resume } => {
            let ckpt = run_pretrain(&cfg.load()?, resume)?;
            println!("wrote checkpoint {}", ckpt.display());
        }
        Command::Finetune { cfg, checkpoint } => {
            let ckpt = run_finetune(&cfg.load()?, checkpoint.as_deref())?;
            println!("wrote checkpoint {}", ckpt.display());
        }
        Command::Score { cfg, checkpoint } => {
            let outputs = run_score(&cfg.load()?, checkpoint.as_deref())?;
            for path in outputs {
                println!("wrote scores {}", path.display());
            }
        }
        Command::Evaluate {
            config,
            set,
            scores,
            labels,
            out,
        } => match (scores, labels, out) {
            (Some(scores), Some(labels), Some(out)) => {
                let report = evaluate_files(&scores, &labels, &out)?;
                println!(
                    "wrote report {} (affiliation_f1 {:.4}, auc_roc {:.4})",
                    out.display(),
                    report.affiliation_f1,
                    report.auc_roc
                );
            }
            (None, None, None) => {
                let config = config.ok_or_else(|| {
                    CliError::Config("evaluate needs --config or --scores/--labels/--out".into())
                })?;
                let cfg = load_config(&config, &set)?;
                for (series, report) in run_evaluate(&cfg)? {
                    println!(
                        "{series}: affiliation_f1 {:.4}, auc_roc {:.4}",
                        report.affiliation_f1, report.auc_roc
                    );
                }
            }
            _ => {
                return Err(CliError::Config(
                    "direct evaluation needs --scores, --labels, and --out together".into(),
                ))
            }
        },
        Command::Report(args) => {
            let summary = run_report(&args.load()?)?;
            println!("wrote summary {}", summary.display());
        }
        Command::Ablation { cfg, toggles } => {
            let toggles = parse_toggles(toggles.as_deref())?;
            let summary = run_ablation(&cfg.load()?, &toggles)?;
            println!("wrote ablation summary {}", summary.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code())
        }
    }
}
