//! `dgm` subcommands. [`run`] returns the process exit code: 0 on success,
//! 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand};

use crate::checkpoint::{ModelCheckpoint, ModelKind};
use crate::config::RunConfig;
use crate::contour::{self, GridSpec, SmoothingParams};
use crate::error::{Error, Result};
use crate::eval;
use crate::kv;
use crate::models::{sample_checkpoint, substream};
use crate::tabular::{DiscreteTable, HtsGroundTruth, TabularSchema};

#[derive(Debug, Parser)]
#[command(name = "dgm", version, about = "Generative models for categorical tables and speed contours")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoint.txt, loss_trace.csv and config.txt.
    Train {
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw rows from a checkpoint into a CSV.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a synthetic table against a real one.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterize, gap-fill and smooth trajectory speeds.
    Smooth {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic travel-survey table and its schema.
    Fixture {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            model,
            data,
            schema,
            config,
            seed,
            out,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(model, p)?,
                None => RunConfig::new(model),
            };
            cfg.data = Some(data.clone());
            cfg.schema = Some(schema.clone());
            cfg.out = Some(out.clone());
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let schema = TabularSchema::load(&schema)?;
            let table = DiscreteTable::load_csv(&data, &schema)?;
            let (ckpt, trace) = cfg.train_on(&table)?;
            create_dir(&out)?;
            write(&out.join("config.txt"), &cfg.resolved_text())?;
            ckpt.save(&out.join("checkpoint.txt"))?;
            trace.save_csv(&out.join("loss_trace.csv"))
        }
        Command::Sample {
            checkpoint,
            n,
            seed,
            out,
        } => {
            let ckpt = ModelCheckpoint::load(&checkpoint)?;
            sample_checkpoint(&ckpt, n, seed)?.save_csv(&out)
        }
        Command::Evaluate {
            real,
            synth,
            schema,
            out,
        } => {
            let schema = TabularSchema::load(&schema)?;
            let real = DiscreteTable::load_csv(&real, &schema)?;
            let synth = DiscreteTable::load_csv(&synth, &schema)?;
            eval::evaluate(&real, &synth)?.save(&out)
        }
        Command::Smooth {
            trajectories,
            grid,
            params,
            out,
        } => {
            let grid = GridSpec::load(&grid)?;
            let params = match &params {
                Some(p) => SmoothingParams::from_kv(&kv::read_kv(p)?)?,
                None => SmoothingParams::default(),
            };
            let records = contour::load_trajectories(&trajectories)?;
            let (raw, stats) = contour::rasterize(&records, grid, params.aggregation)?;
            let filled = contour::fill_gaps(&raw)?;
            let smoothed = contour::adaptive_smooth(&filled, &params)?;
            create_dir(&out)?;
            raw.save_csv(&out.join("raw.csv"))?;
            filled.save_csv(&out.join("filled.csv"))?;
            smoothed.field.save_csv(&out.join("smoothed.csv"))?;
            write(
                &out.join("report.txt"),
                &contour::smoothing_report(&params, &grid, &raw, &stats),
            )
        }
        Command::Fixture { n, seed, out } => {
            let truth = HtsGroundTruth::new(seed);
            create_dir(&out)?;
            truth.schema().save(&out.join("schema.txt"))?;
            let table = truth.sample(n, &mut substream(seed, 0x5EED));
            table.save_csv(&out.join("data.csv"))
        }
    }
}
