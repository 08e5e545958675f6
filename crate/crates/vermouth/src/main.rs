//! Command-line front end.
//!
//! Every subcommand starts from a task preset, layers an optional flat
//! JSON config file on top, then applies repeatable `--set key=value`
//! overrides, so flags always win over the file. Exit codes: 0 success,
//! 1 usage error (bad flags, unknown keys, missing config file),
//! 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use vermouth::error::Error;
use vermouth::harness::{
    apply_flat_key, cmd_extract, cmd_gen_data, cmd_pretrain, load_config_file, run_ablation,
    run_sweep, run_task, RunConfig, SWEEP_FACTORS,
};
use vermouth::params::ParamStore;
use vermouth::report::{
    format_value, plot_curves, read_json_report, write_report, ReportFormat, ReportRow,
    SweepReport,
};
use vermouth::tasks::TaskKind;
use vermouth::tensor::Scalar;

#[derive(Parser)]
#[command(
    name = "vermouth",
    version,
    about = "Diffusion-feature perception toolkit: extraction, fusion heads, task training, and sensitivity sweeps"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Task preset supplying the defaults.
    #[arg(long, default_value = "classify", value_parser = ["classify", "retrieve", "segment"])]
    task: String,
    /// Flat JSON config file with dotted keys, applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single-key override, repeatable: --set opts.t=100
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for single runs.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seed list for sweeps and ablations.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the task's synthetic dataset and save it under a stem.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output stem; retrieval writes {stem}-train/-gallery/-queries.
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoising pretraining over the run's corpus; writes a checkpoint.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 8)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured head and write {out}.vmf1 plus a report.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Initial checkpoint instead of fresh seeded parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "json", value_parser = ["csv", "json"])]
        format: String,
    },
    /// Evaluate a checkpoint on the configured task without training.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        params: PathBuf,
        /// Optional report stem; without it the metric only prints.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "json", value_parser = ["csv", "json"])]
        format: String,
    },
    /// Save one sample's feature taps (and attention maps) as tensors.
    Extract {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sensitivity sweep; repeat --factor/--values for a product grid.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "factor", required = true)]
        factors: Vec<String>,
        /// Comma-separated settings, one list per --factor.
        #[arg(long = "values", required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
        format: String,
    },
    /// Ablation rows: baseline, +fuse, +expert across the seed list.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
        format: String,
    },
    /// Render a JSON report as an SVG curve plot over a numeric factor.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long = "x-factor")]
        x_factor: String,
        #[arg(long)]
        out: PathBuf,
    },
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

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig, Failure> {
        let kind = match self.task.as_str() {
            "classify" => TaskKind::Classify,
            "retrieve" => TaskKind::Retrieve,
            "segment" => TaskKind::Segment,
            other => return Err(usage(format!("unknown task {other:?}"))),
        };
        let mut cfg = RunConfig::preset(kind);
        if let Some(path) = &self.config {
            if !path.is_file() {
                return Err(usage(format!("config file {} not found", path.display())));
            }
            load_config_file(&mut cfg, path).map_err(|e| usage(e.to_string()))?;
        }
        for kv in &self.set {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            apply_flat_key(&mut cfg, key.trim(), value.trim())
                .map_err(|e| usage(e.to_string()))?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(seeds) = &self.seeds {
            apply_flat_key(&mut cfg, "seeds", seeds).map_err(|e| usage(e.to_string()))?;
        }
        Ok(cfg)
    }
}

fn parse_format(name: &str) -> (ReportFormat, &'static str) {
    match name {
        "json" => (ReportFormat::Json, "json"),
        _ => (ReportFormat::Csv, "csv"),
    }
}

/// One-row report for a single train or eval run.
fn single_run_report(
    cfg: &RunConfig,
    setting: &str,
    metric: &str,
    value: f64,
    walltime_s: f64,
) -> Result<SweepReport, Error> {
    let row = ReportRow {
        factor: "run".to_string(),
        setting: setting.to_string(),
        task: cfg.task.name().to_string(),
        metric: metric.to_string(),
        value,
        seed: cfg.seed,
        walltime_s,
    };
    Ok(SweepReport::new(vec![row], cfg.config_hash()?))
}

fn run<T: Scalar>(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenData { cfg, out } => {
            let cfg = cfg.build()?;
            let stems = cmd_gen_data::<T>(&cfg, &out)?;
            for stem in stems {
                println!("wrote {}", stem.display());
            }
        }
        Cmd::Pretrain { cfg, epochs, out } => {
            let cfg = cfg.build()?;
            let curve = cmd_pretrain::<T>(&cfg, epochs, &out)?;
            let last = curve.last().copied().unwrap_or(f64::NAN);
            println!("pretrained {epochs} epochs, final loss {}", format_value(last));
            println!("wrote {}", out.display());
        }
        Cmd::Train {
            cfg,
            params,
            out,
            format,
        } => {
            let cfg = cfg.build()?;
            let init = match params {
                Some(path) => Some(ParamStore::<T>::load(&path)?),
                None => None,
            };
            let started = Instant::now();
            let outcome = run_task::<T>(&cfg, cfg.seed, init, true)?;
            let wall = if cfg.record_walltime {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            };
            let ckpt = out.with_extension("vmf1");
            outcome.store.save(&ckpt)?;
            let (fmt, ext) = parse_format(&format);
            let report_path = out.with_extension(ext);
            let report = single_run_report(&cfg, "train", &outcome.metric, outcome.value, wall)?;
            write_report(&report, &report_path, fmt)?;
            println!(
                "{} {} {} (seed {})",
                cfg.task.name(),
                outcome.metric,
                format_value(outcome.value),
                cfg.seed
            );
            println!("wrote {}", ckpt.display());
            println!("wrote {}", report_path.display());
        }
        Cmd::Eval {
            cfg,
            params,
            out,
            format,
        } => {
            let cfg = cfg.build()?;
            let store = ParamStore::<T>::load(&params)?;
            let started = Instant::now();
            let outcome = run_task::<T>(&cfg, cfg.seed, Some(store), false)?;
            let wall = if cfg.record_walltime {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            };
            println!(
                "{} {} {} (seed {})",
                cfg.task.name(),
                outcome.metric,
                format_value(outcome.value),
                cfg.seed
            );
            if let Some(out) = out {
                let (fmt, ext) = parse_format(&format);
                let report_path = out.with_extension(ext);
                let report = single_run_report(&cfg, "eval", &outcome.metric, outcome.value, wall)?;
                write_report(&report, &report_path, fmt)?;
                println!("wrote {}", report_path.display());
            }
        }
        Cmd::Extract { cfg, index, out } => {
            let cfg = cfg.build()?;
            let names = cmd_extract::<T>(&cfg, index, &out)?;
            println!("wrote {} ({} tensors)", out.display(), names.len());
            for name in names {
                println!("  {name}");
            }
        }
        Cmd::Sweep {
            cfg,
            factors,
            values,
            out,
            format,
        } => {
            let cfg = cfg.build()?;
            if factors.len() != values.len() {
                return Err(usage(format!(
                    "{} --factor flags but {} --values lists",
                    factors.len(),
                    values.len()
                )));
            }
            for factor in &factors {
                if !SWEEP_FACTORS.contains(&factor.as_str()) {
                    return Err(usage(format!(
                        "unknown factor {factor:?}; expected one of {SWEEP_FACTORS:?}"
                    )));
                }
            }
            let grid: Vec<(String, Vec<String>)> = factors
                .into_iter()
                .zip(values)
                .map(|(f, v)| (f, v.split(',').map(|p| p.trim().to_string()).collect()))
                .collect();
            let report = run_sweep::<T>(&grid, &cfg)?;
            let (fmt, _) = parse_format(&format);
            write_report(&report, &out, fmt)?;
            println!("wrote {} ({} rows)", out.display(), report.rows.len());
        }
        Cmd::Ablate { cfg, out, format } => {
            let cfg = cfg.build()?;
            let report = run_ablation::<T>(&cfg)?;
            let (fmt, _) = parse_format(&format);
            write_report(&report, &out, fmt)?;
            println!("wrote {} ({} rows)", out.display(), report.rows.len());
        }
        Cmd::Plot {
            report,
            x_factor,
            out,
        } => {
            let report = read_json_report(&report)?;
            plot_curves(&report, &x_factor, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match std::env::var("VERMOUTH_PRECISION").ok().as_deref() {
        None | Some("f64") => run::<f64>(cmd),
        Some("f32") => run::<f32>(cmd),
        Some(other) => Err(usage(format!(
            "VERMOUTH_PRECISION must be f32 or f64, got {other:?}"
        ))),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(err)) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
