//! `ftat` command line: train a source model, synthesize shifted streams,
//! adapt over a stream, run the baselines, and summarize metric logs.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use ftat_core::config::{Config, Method};
use ftat_core::data::{self, synth, table, SynthSpec, TableSchema};
use ftat_core::error::Error;
use ftat_core::{report, run_stream, train_source, Checkpoint};

/// Environment variable holding the log filter, e.g. `FTAT_LOG=debug`.
pub const LOG_ENV: &str = "FTAT_LOG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ftat",
    version,
    about = "Fully test-time adaptation for tabular classification streams",
    after_help = "Metrics: F1 is the positive-class (class 1) F1 for two classes and macro F1 otherwise. \
                  Balanced accuracy averages recall over the classes present in each batch.\n\
                  Logging: set FTAT_LOG (error, warn, info, debug, trace)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the source classifier and write a checkpoint.
    Train {
        /// Labeled training CSV.
        data: PathBuf,
        /// Schema file (TOML).
        schema: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic shifted stream with ground truth.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory: train.csv, schema.toml, batch_*.csv, truth.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt over a stream with the configured method (default: full method).
    Adapt(AdaptArgs),
    /// Run a comparison baseline over a stream.
    Baseline {
        kind: BaselineKind,
        #[command(flatten)]
        args: AdaptArgs,
    },
    /// Summarize a metric log.
    Eval {
        log: PathBuf,
        /// Print per-metric mean and standard deviation as CSV.
        #[arg(long)]
        summary: bool,
        /// Write the summary CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-batch plot data as CSV.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct AdaptArgs {
    checkpoint: PathBuf,
    /// Directory of batch_*.csv files, or one CSV cut into batches.
    stream: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metric log to write (one JSON record per line).
    #[arg(long)]
    log: PathBuf,
    /// Ground-truth sidecar; defaults to truth.jsonl next to the batches.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaselineKind {
    /// Frozen source model.
    None,
    /// Entropy minimization with a single learner.
    Entropy,
}

fn load_config(path: Option<&Path>) -> Result<Config, Error> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io {
            path: path.to_owned(),
            source: e,
        })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_owned(),
        source: e,
    }
}

fn train(data: &Path, schema: &Path, config: Option<&Path>, out: &Path) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let schema = TableSchema::load(schema)?;
    let dataset = data::load_csv(data, &schema)?;
    let ckpt = train_source(&dataset, &schema, &cfg.backbone, &cfg.train)?;
    ckpt.save(out)?;
    println!("wrote checkpoint {} ({} rows, P0 {:?})", out.display(), dataset.len(), ckpt.p0.as_slice());
    Ok(())
}

fn synth_cmd(spec: &Path, out: &Path) -> Result<(), Error> {
    let spec = SynthSpec::load(spec)?;
    let shift = spec.shift_spec()?;
    let schema = spec.schema()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let (x, y) = synth::generate_source_table(&shift, &spec.source_prior()?, spec.classes, spec.features, spec.train_size)?;
    table::write_numeric_csv(
        out.join("train.csv"),
        &schema.expanded_columns(),
        &x,
        Some((&schema.label, &schema.classes, &y)),
    )?;
    schema.save(out.join("schema.toml"))?;
    let stream = synth::generate_synthetic_stream(&shift, spec.classes, spec.features)?;
    data::write_stream_dir(out, &schema, &stream)?;
    println!("wrote {} batches of {} rows to {}", stream.len(), shift.batch_size, out.display());
    Ok(())
}

fn adapt(args: &AdaptArgs, method: Option<Method>) -> Result<(), Error> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(m) = method {
        cfg.engine.method = m;
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let engine_cfg = cfg.engine_config(ckpt.num_classes())?;
    let batches = data::read_stream(&args.stream, &ckpt.schema, cfg.engine.batch_size)?;
    let truth = match &args.truth {
        Some(p) => Some(read_truth_file(p)?),
        None if args.stream.is_dir() => data::read_truth(&args.stream)?,
        None => None,
    };
    info!("{} over {} batches", engine_cfg.method, batches.len());
    let results = run_stream(&ckpt, &batches, &engine_cfg)?;
    let records = report::records(&results, truth.as_deref(), &ckpt.p0)?;
    report::save_log(&args.log, &records)?;
    println!("{}: wrote {} records to {}", engine_cfg.method, records.len(), args.log.display());
    Ok(())
}

fn read_truth_file(path: &Path) -> Result<Vec<ftat_core::GroundTruth>, Error> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_owned(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn eval(log: &Path, summary: bool, out: Option<&Path>, plot: Option<&Path>) -> Result<(), Error> {
    let records = report::load_log(log)?;
    if summary || out.is_some() {
        let rows = report::summarize(&records);
        match out {
            Some(p) => report::write_summary_csv(create(p)?, &rows).map_err(io_err(p))?,
            None => {
                let stdout = std::io::stdout();
                report::write_summary_csv(stdout.lock(), &rows).map_err(io_err(Path::new("<stdout>")))?
            }
        }
    }
    if let Some(p) = plot {
        report::write_plot_csv(create(p)?, &records).map_err(io_err(p))?;
    }
    if !summary && out.is_none() && plot.is_none() {
        println!("{} records", records.len());
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { data, schema, config, out } => train(&data, &schema, config.as_deref(), &out),
        Command::Synth { spec, out } => synth_cmd(&spec, &out),
        Command::Adapt(args) => adapt(&args, None),
        Command::Baseline { kind, args } => {
            let m = match kind {
                BaselineKind::None => Method::NoAdapt,
                BaselineKind::Entropy => Method::EntropyMin,
            };
            adapt(&args, Some(m))
        }
        Command::Eval { log, summary, out, plot } => eval(&log, summary, out.as_deref(), plot.as_deref()),
    }
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on a usage error, 2 when loading or processing data fails.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}
