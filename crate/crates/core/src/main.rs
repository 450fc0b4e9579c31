use clap::{Parser, Subcommand, ValueEnum};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use semood::cli::{self, SplitFilter, TrainConfig, DEFAULT_TARGET_TPR};
use semood::data::{self, Split, SyntheticSpec};
use semood::metrics::DEFAULT_BINS;
use semood::scoring::{read_score_csv, write_score_csv, Scorer};
use semood::{Model, Result};

#[derive(Parser)]
#[command(name = "semood", version, about = "Semantic energy OOD detection")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset CSV.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a dataset CSV and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Epoch log destination (JSON lines); stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a dataset CSV or a logit CSV with a trained checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        scorer: Option<String>,
        /// Dataset rows to score (ignored for logit CSVs).
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Choose a detector threshold from the in-distribution rows of a score CSV.
    Threshold {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TARGET_TPR)]
        target_tpr: f64,
    },
    /// Compute FPR95 / AUROC / AUPR / overlap for a score CSV.
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Histogram CSV; defaults to `<out>.hist.csv` when --out is given.
        #[arg(long)]
        hist: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value_t = DEFAULT_TARGET_TPR)]
        target_tpr: f64,
    },
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json_line<T: serde::Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut w = output(path)?;
    writeln!(w, "{}", serde_json::to_string(value)?)?;
    w.flush()?;
    Ok(())
}

fn run(args: Args) -> Result<()> {
    match args.command {
        Command::GenData { config, seed, out } => {
            let mut spec = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => SyntheticSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let ds = data::generate(&spec)?;
            let mut w = output(out.as_deref())?;
            data::write_dataset_csv(&mut w, &ds)?;
            w.flush()?;
        }
        Command::Train { config, input, out, seed, log } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::from_json_file(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.network.seed = s;
            }
            let ds = data::read_dataset_csv(File::open(input)?)?;
            let mut log_w = output(log.as_deref())?;
            let (model, warnings) = cli::cmd_train(&cfg, &ds, &mut log_w)?;
            log_w.flush()?;
            for w in warnings {
                eprintln!("{}", serde_json::json!({ "warning": w }));
            }
            let mut w = BufWriter::new(File::create(out)?);
            model.save(&mut w)?;
            w.flush()?;
        }
        Command::Score { checkpoint, input, out, scorer, split } => {
            let model = Model::load_path(&checkpoint)?;
            let scorer: Option<Scorer> = scorer.map(|s| s.parse()).transpose()?;
            let text = std::fs::read_to_string(&input)?;
            let rows = if text.starts_with("id,dist,label,") {
                let (logits, _) = data::read_logit_csv(text.as_bytes())?;
                cli::cmd_score_logits(&model, &logits, scorer)?
            } else {
                let ds = data::read_dataset_csv(text.as_bytes())?;
                let filter = match split {
                    SplitArg::Train => SplitFilter::Only(Split::Train),
                    SplitArg::Test => SplitFilter::Only(Split::Test),
                    SplitArg::All => SplitFilter::All,
                };
                cli::cmd_score(&model, &ds, scorer, filter)?
            };
            let mut w = output(out.as_deref())?;
            write_score_csv(&mut w, &rows)?;
            w.flush()?;
        }
        Command::Threshold { input, out, target_tpr } => {
            let rows = read_score_csv(File::open(input)?)?;
            let report = cli::cmd_threshold(&rows, target_tpr)?;
            write_json_line(out.as_deref(), &report)?;
        }
        Command::Eval { input, out, hist, bins, target_tpr } => {
            let rows = read_score_csv(File::open(input)?)?;
            let (report, histogram) = cli::cmd_eval(&rows, target_tpr, bins)?;
            write_json_line(out.as_deref(), &report)?;
            let hist_path = hist.or_else(|| {
                out.as_ref().map(|p| {
                    let mut s = p.clone().into_os_string();
                    s.push(".hist.csv");
                    PathBuf::from(s)
                })
            });
            if let Some(p) = hist_path {
                let mut w = BufWriter::new(File::create(p)?);
                cli::write_histogram_csv(&mut w, &histogram)?;
                w.flush()?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", cli::error_json(&e));
            ExitCode::FAILURE
        }
    }
}

