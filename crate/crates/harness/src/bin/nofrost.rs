//! Command-line front end. Exit codes: 0 success, 1 configuration error,
//! 2 runtime failure, 3 reproduction criteria failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nofrost::objectives::MethodKind;
use nofrost_harness::commands;
use nofrost_harness::config::ExperimentConfig;
use nofrost_harness::plot::{plot_files, PlotKind};
use nofrost_harness::repro::Recipe;
use nofrost_harness::sweep::{MatrixEntry, EPS_GRID};
use nofrost_harness::{run, HarnessError, Result, RunOptions};

#[derive(Parser)]
#[command(name = "nofrost", version, about = "Normalizer-free adversarial training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment TOML; without it a small synthetic experiment is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.lr0=0.05` (repeatable).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut sets = self.overrides.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if let Some(d) = &self.output_dir {
            sets.push(format!("output_dir={}", toml_string(&d.to_string_lossy())));
        }
        match &self.config {
            Some(p) => ExperimentConfig::load(p, &sets),
            None => ExperimentConfig::synthetic("synthetic", MethodKind::Sat).with_overrides(&sets),
        }
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.into()).to_string()
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// last, best_clean or best_robust.
    #[arg(long, default_value = "best_robust")]
    checkpoint: String,
    /// Output directory (default: inside the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue a partial run from its last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Validate and write a manifest without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Re-evaluate a checkpoint, optionally with `--set eval.*` changes.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
    },
    /// Radius, interpolation or method sweeps.
    #[command(subcommand)]
    Sweep(SweepCmd),
    /// Compare BN running statistics of two runs or of the two branches of a
    /// mixture-BN run.
    ProbeStats {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        other: Option<PathBuf>,
        /// Norm site index (default: the middle site).
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Decision margin, boundary thickness and model smoothness.
    Metrics {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 200)]
        limit: usize,
    },
    /// PNG sheet of augmentations and corruptions.
    AugmentPreview {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        severity: u8,
        #[arg(long, default_value_t = 6)]
        scale: u32,
        #[arg(long, default_value = "preview")]
        out: PathBuf,
    },
    /// Render an SVG from result CSVs.
    Plot {
        /// scatter, tradeoff, histogram, eps_sweep or interpolation.
        #[arg(long)]
        kind: PlotKind,
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// Keep only rows where COLUMN equals VALUE.
        #[arg(long, value_name = "COLUMN=VALUE")]
        filter: Option<String>,
        #[arg(long)]
        title: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the twelve reproduction criteria.
    Repro {
        /// Tiny sizes for a smoke run; verdicts are meaningless.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value = "runs/repro")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SweepCmd {
    /// Robust accuracy over PGD radii.
    Eps {
        #[command(flatten)]
        run: RunArgs,
        /// Radii on the 0-255 scale.
        #[arg(long, value_delimiter = ',', default_values_t = EPS_GRID.to_vec())]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Clean/robust trade-off of a mixture-BN model over gamma.
    Gamma {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 11)]
        points: usize,
        /// logits, all or random:<fraction>[:<seed>] (repeatable).
        #[arg(long = "strategy", default_values_t = ["all".to_string()])]
        strategies: Vec<String>,
        #[arg(long, default_value_t = 8.0)]
        eps: f64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Train SAT-BN, SAT-IN, MBNAT and NoFrost on one config and tabulate.
    Matrix {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        resume: bool,
    },
}

fn execute(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train { cfg, resume, dry_run } => {
            let c = cfg.load()?;
            let m = run(&c, RunOptions { dry_run, resume })?;
            println!("{} {:?}: {}", m.config_hash, m.status, c.run_dir().display());
            if let Ok(r) = nofrost_harness::run::load_report(&c.run_dir()) {
                let (h, row) = r.csv_record();
                println!("{}\n{}", h.join(","), row.join(","));
            }
        }
        Command::Evaluate { run, overrides } => {
            let (r, out) = commands::evaluate(&run.run, &run.checkpoint, &overrides, run.out.as_deref())?;
            let (h, row) = r.csv_record();
            println!("{}\n{}\nwritten to {}", h.join(","), row.join(","), out.display());
        }
        Command::Sweep(SweepCmd::Eps { run, eps, steps }) => {
            let out = commands::sweep_eps(&run.run, &run.checkpoint, &eps, steps, run.out.as_deref())?;
            println!("{}", out.join("eps_sweep.csv").display());
        }
        Command::Sweep(SweepCmd::Gamma {
            run,
            points,
            strategies,
            eps,
            steps,
        }) => {
            let s = strategies.iter().map(|s| commands::parse_strategy(s)).collect::<Result<Vec<_>>>()?;
            let out = commands::sweep_gamma(&run.run, &run.checkpoint, points, &s, (eps, steps), run.out.as_deref())?;
            println!("{}", out.join("tradeoff.csv").display());
        }
        Command::Sweep(SweepCmd::Matrix { cfg, resume }) => {
            let c = cfg.load()?;
            let out = commands::sweep_matrix(&c, &MatrixEntry::standard(), RunOptions { dry_run: false, resume })?;
            print!("{}", std::fs::read_to_string(out.join("matrix.csv"))?);
        }
        Command::ProbeStats { run, other, layer } => {
            let p = commands::probe_stats(&run.run, other.as_deref(), &run.checkpoint, layer, run.out.as_deref())?;
            println!(
                "layer {}: {} vs {}: KS(means) D={:.4} p={:.4}; KS(vars) D={:.4} p={:.4}",
                p.layer, p.labels[0], p.labels[1], p.ks_means.statistic, p.ks_means.p_value, p.ks_vars.statistic, p.ks_vars.p_value
            );
        }
        Command::Metrics { run, limit } => {
            let (m, out) = commands::metrics(&run.run, &run.checkpoint, limit, run.out.as_deref())?;
            println!(
                "n={} margin={:.4} thickness={:.4} smoothness={:.4} ({})",
                m.n_samples,
                m.margin_mean,
                m.thickness_mean,
                m.smoothness_mean,
                out.display()
            );
        }
        Command::AugmentPreview {
            cfg,
            n,
            severity,
            scale,
            out,
        } => {
            let png = commands::augment_preview(&cfg.load()?, n, severity, scale, &out)?;
            println!("{}", png.display());
        }
        Command::Plot {
            kind,
            inputs,
            filter,
            title,
            out,
        } => {
            let filter = filter
                .as_deref()
                .map(|f| f.split_once('=').ok_or_else(|| HarnessError::Config(format!("filter `{f}` is not COLUMN=VALUE"))))
                .transpose()?;
            let paths: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            plot_files(kind, &paths, filter, title.as_deref(), &out)?;
            println!("{}", out.display());
        }
        Command::Repro { quick, out } => {
            let recipe = if quick { Recipe::quick() } else { Recipe::desk() };
            let all = commands::repro(
                recipe,
                &out,
                &mut |c| println!("{}", c.line()),
                Some(Box::new(|label: &str| eprintln!("training {label}"))),
            )?;
            let failed = all.iter().filter(|c| !c.pass).count();
            println!("{} of {} criteria passed; results in {}", all.len() - failed, all.len(), out.display());
            if failed > 0 {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
