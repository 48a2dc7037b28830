//! `refer` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data;
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::metrics::{self, NrgColumnBounds, NrgRow, NrgScores};
use crate::models::ModelParams;
use crate::training::{self, Axis};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "refer", version, about = "Joint classifier and rationale extractor training")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set weights.alpha_p=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Concurrent training runs for `sweep`.
    #[arg(long, default_value_t = 1, global = true)]
    pub jobs: usize,
    /// Run seed; wins over the config file and `--set seed=...`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/dev splits as JSONL.
    Synth,
    /// Train and write the best checkpoint, run log and dev report.
    Train,
    /// Evaluate a checkpoint and write its metric report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL dataset; defaults to the configured dev split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Raw-metric CSV of reference systems; together with this model they
        /// set the NRG column ranges. Task values must be on the report's 0-1 scale.
        #[arg(long)]
        nrg_table: Option<PathBuf>,
    },
    /// Train along one sweep axis and write a CSV table.
    Sweep {
        #[arg(long, value_parser = ["weight-grid", "annotation-fraction", "topk-transfer"])]
        axis: String,
    },
    /// Finite-difference check of every op and of the full training loss.
    Gradcheck {
        /// Random seeds per op kind.
        #[arg(long, default_value_t = 100)]
        seeds: usize,
    },
    /// NRG columns for a raw-metric CSV (system,comp,suff,tf1,auprc,task).
    Nrg { table: PathBuf },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.exit_code() {
                0 => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn config(g: &GlobalArgs) -> Outcome<RunConfig> {
    let mut cfg = RunConfig::resolve(g.config.as_deref(), &g.overrides).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(g: &GlobalArgs) -> Outcome<&Path> {
    let dir = g
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage("this command needs --out <DIR>".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut text = text.to_string();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)
}

fn dispatch(cli: &Cli) -> Outcome<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth => {
            let cfg = config(g)?;
            let dir = out_dir(g)?;
            let (train, dev) = data::synthetic_splits(&cfg.synthetic, cfg.seed)?;
            data::save_jsonl(&train, dir.join("train.jsonl"))?;
            data::save_jsonl(&dev, dir.join("dev.jsonl"))?;
            snapshot(dir, &cfg)?;
            println!("wrote {} train and {} dev examples to {}", train.len(), dev.len(), dir.display());
        }
        Command::Train => {
            let cfg = config(g)?;
            let dir = out_dir(g)?;
            let (train, dev) = cfg.training_data()?;
            snapshot(dir, &cfg)?;
            let out = training::run_training(&cfg.train_config(), &train, &dev, Some(dir))?;
            for e in &out.log.epochs {
                eprintln!(
                    "epoch {} train {:.4} dev {:.4} acc {} tf1 {} lambda {:.3e}",
                    e.epoch,
                    e.train.total,
                    e.dev_loss.total,
                    fmt_opt(e.dev.accuracy),
                    fmt_opt(e.dev.tf1),
                    e.lambda
                );
            }
            write_json(&dir.join("run_log.json"), &out.log)?;
            write_json(&dir.join("report.json"), &out.log.best().dev)?;
            println!("best epoch {} of {}", out.log.best_epoch, out.log.epochs.len());
        }
        Command::Eval {
            checkpoint,
            data: path,
            nrg_table,
        } => {
            let cfg = config(g)?;
            let params = ModelParams::load(checkpoint)?;
            let dataset = match path {
                Some(p) => data::load_jsonl(p, Some(params.config.num_classes))?.dataset,
                None => cfg.datasets()?.1,
            };
            let mut report = training::evaluate_model(&params, &dataset, &cfg.eval, None)?;
            if let Some(p) = nrg_table {
                // The evaluated model joins the comparison set.
                let mut rows = read_nrg_table(p)?;
                let own = training::nrg_row_of(&report, "model", cfg.eval.task_metric)?;
                rows.push(own.clone());
                let bounds = NrgColumnBounds::from_rows(&rows);
                bounds.validate()?;
                report.nrg = Some(metrics::nrg_row(&own, &bounds));
            }
            match &g.out {
                Some(_) => {
                    let dir = out_dir(g)?;
                    write_json(&dir.join("report.json"), &report)?;
                    snapshot(dir, &cfg)?;
                }
                None => println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?),
            }
        }
        Command::Sweep { axis } => {
            let cfg = config(g)?;
            let dir = out_dir(g)?;
            let axis = Axis::by_name(axis).expect("restricted by clap");
            let (train, dev) = cfg.training_data()?;
            snapshot(dir, &cfg)?;
            let rows = training::run_sweep(&cfg.train_config(), &axis, &train, &dev, g.jobs)?;
            let path = dir.join("sweep.csv");
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            training::write_csv(&rows, file)?;
            write_json(&dir.join("sweep.json"), &rows)?;
            println!("{} rows written to {}", rows.len(), path.display());
        }
        Command::Gradcheck { seeds } => {
            let cfg = config(g)?;
            let summary = diagnostics::gradcheck_all(cfg.seed, *seeds)?;
            for c in &summary.ops {
                println!("op {:<28} {} max rel err {:.2e}", c.case, status(c.passed()), c.max_rel_error);
            }
            for c in &summary.full_loss {
                println!(
                    "loss {:<28} {} max rel err {:.2e}",
                    format!("{} {}", c.model, c.tensor),
                    status(c.passed),
                    c.max_rel_error
                );
            }
            println!("overall {} max rel err {:.2e}", status(summary.passed), summary.max_rel_error);
            if g.out.is_some() {
                write_json(&out_dir(g)?.join("gradcheck.json"), &summary)?;
            }
            if !summary.passed {
                return Err(Failure::Runtime(Error::NonFinite("gradient check failed".into())));
            }
        }
        Command::Nrg { table } => {
            let rows = read_nrg_table(table)?;
            let scores = metrics::nrg_compose(&rows, None)?;
            let mut buf = Vec::new();
            write_nrg_table(&rows, &scores, &mut buf)?;
            match &g.out {
                Some(_) => {
                    let path = out_dir(g)?.join("nrg.csv");
                    fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
                }
                None => std::io::stdout()
                    .write_all(&buf)
                    .map_err(|e| Error::io("<stdout>", e))?,
            }
        }
    }
    Ok(())
}

fn status(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

#[derive(Deserialize)]
struct RawRow {
    system: String,
    comp: f64,
    suff: f64,
    tf1: Option<f64>,
    auprc: Option<f64>,
    task: f64,
}

/// Reads a raw-metric table by header name; other columns are ignored and
/// empty `tf1`/`auprc` cells mean not available.
pub fn read_nrg_table(path: &Path) -> Result<Vec<NrgRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    })?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<RawRow>().enumerate() {
        let r = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(i + 2, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        rows.push(NrgRow {
            system: r.system,
            comp: r.comp,
            suff: r.suff,
            tf1: r.tf1,
            auprc: r.auprc,
            task: r.task,
        });
    }
    Ok(rows)
}

pub fn write_nrg_table(rows: &[NrgRow], scores: &[NrgScores], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["system", "fnrg", "pnrg", "tnrg", "cnrg"])?;
    for (r, s) in rows.iter().zip(scores) {
        out.write_record([
            r.system.clone(),
            s.fnrg.to_string(),
            s.pnrg.map_or_else(String::new, |p| p.to_string()),
            s.tnrg.to_string(),
            s.cnrg.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
