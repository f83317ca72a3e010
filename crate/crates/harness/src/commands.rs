//! The work behind each CLI subcommand, writing into manifest-tracked
//! output directories.

use std::path::{Path, PathBuf};

use nofrost::analysis::{
    bn_stats_scatter, compute_metrics, gamma_grid, ks_two_sample, AttackSpec, EvalReport, InterpolationStrategy,
    KsResult, MetricConfig, MetricSummary,
};
use nofrost::attacks::{eps_from_255, AttackConfig, EvalView};
use nofrost::augment::Augmenter;
use nofrost::nfcore::{Branch, Checkpoint, Network, NormStrategy};
use nofrost::objectives::MethodKind;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::datasets::load_dataset;
use crate::error::{config_err, Result};
use crate::plot::{render, PlotKind, Table};
use crate::repro::{run_suite, Criterion, Recipe, Zoo};
use crate::run::{
    checkpoint_method, evaluate_model, write_csv, write_report, DirLock, RunManifest, RunStatus,
};
use crate::sweep::{eps_rows, eps_sweep, gamma_rows, gamma_sweep, method_matrix, MatrixEntry};
use crate::RunOptions;

/// A trained model read back from a run directory.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub network: Network,
    pub method: MethodKind,
    /// `last`, `best_clean` or `best_robust`.
    pub checkpoint: String,
}

/// Opens `dir` (validating its manifest) and loads `checkpoints/<which>.ckpt`.
pub fn open_run(dir: &Path, which: &str) -> Result<LoadedRun> {
    let m = RunManifest::load(dir)?;
    let kind = format!("checkpoint_{which}");
    let a = m.artifact(&kind).ok_or_else(|| {
        config_err(format!(
            "{} has no `{which}` checkpoint (status {:?}); choose one of last, best_clean, best_robust",
            dir.display(),
            m.status
        ))
    })?;
    let config = ExperimentConfig::from_toml_str(&std::fs::read_to_string(dir.join("config.toml"))?)?;
    let ck = Checkpoint::load(dir.join(&a.path))?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        method: checkpoint_method(&ck)?,
        network: ck.to_network()?,
        config,
        checkpoint: which.into(),
    })
}

/// An output directory of a non-training command: locked while open, with
/// a manifest listing every file written through it.
pub struct Output {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    _lock: DirLock,
}

impl Output {
    pub fn begin(command: &str, dir: &Path, inputs: serde_json::Value, seed: u64) -> Result<Self> {
        let lock = DirLock::acquire(dir)?;
        let manifest = RunManifest::new(command, inputs, seed);
        manifest.save(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            _lock: lock,
        })
    }

    pub fn text(&mut self, kind: &str, rel: &str, text: &str) -> Result<()> {
        std::fs::write(self.dir.join(rel), text)?;
        self.manifest.record(&self.dir, kind, rel)
    }

    pub fn csv(&mut self, kind: &str, rel: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        write_csv(&self.dir.join(rel), header, rows)?;
        self.manifest.record(&self.dir, kind, rel)
    }

    /// Records a file the caller already wrote.
    pub fn record(&mut self, kind: &str, rel: &str) -> Result<()> {
        self.manifest.record(&self.dir, kind, rel)
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.status = RunStatus::Complete;
        self.manifest.finished_at = Some(
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        );
        self.manifest.save(&self.dir)?;
        Ok(self.manifest)
    }
}

fn default_out(run: &LoadedRun, cmd: &str, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| run.dir.join(format!("{cmd}-{}", run.checkpoint)))
}

fn inputs(run: &LoadedRun, extra: serde_json::Value) -> serde_json::Value {
    json!({
        "run_config_hash": run.config.config_hash(),
        "checkpoint": run.checkpoint,
        "config": run.config.identity(),
        "args": extra,
    })
}

/// Re-evaluates a checkpoint with the run's `[eval]` section (after
/// `overrides`); writes `eval.csv` and `eval.json`.
pub fn evaluate(run_dir: &Path, which: &str, overrides: &[String], out: Option<&Path>) -> Result<(EvalReport, PathBuf)> {
    let mut run = open_run(run_dir, which)?;
    run.config = run.config.with_overrides(overrides)?;
    let out = default_out(&run, "evaluate", out);
    let mut o = Output::begin("evaluate", &out, inputs(&run, json!({})), run.config.seed)?;
    let test = load_dataset(&run.config)?.test;
    let test = match run.config.eval.limit {
        Some(n) if n < test.len() => test.slice(0, n),
        _ => test,
    };
    let report = evaluate_model(&run.network, run.method, &test, &run.config.eval_config()?)?;
    write_report(&out, "eval", &report)?;
    o.record("eval_csv", "eval.csv")?;
    o.record("eval_json", "eval.json")?;
    o.finish()?;
    Ok((report, out))
}

/// Robust accuracy over PGD radii (0-255 scale); writes `eps_sweep.csv` and `.svg`.
pub fn sweep_eps(run_dir: &Path, which: &str, eps: &[f64], steps: usize, out: Option<&Path>) -> Result<PathBuf> {
    if eps.is_empty() {
        return Err(config_err("eps sweep needs at least one radius"));
    }
    let run = open_run(run_dir, which)?;
    let out = default_out(&run, "sweep-eps", out);
    let mut o = Output::begin("sweep-eps", &out, inputs(&run, json!({"eps": eps, "steps": steps})), run.config.seed)?;
    let test = load_dataset(&run.config)?.test;
    let pts = eps_sweep(&run.network, run.method, &test, eps, steps, run.config.eval.batch_size, run.config.seed)?;
    let (h, rows) = eps_rows(&run.config.name, &pts);
    o.csv("eps_sweep_csv", "eps_sweep.csv", &h, &rows)?;
    let svg = render(PlotKind::EpsSweep, &[Table { headers: h, rows }], None)?;
    o.text("eps_sweep_svg", "eps_sweep.svg", &svg)?;
    o.finish()?;
    Ok(out)
}

/// Parses `logits`, `all` or `random:<fraction>[:<seed>]`.
pub fn parse_strategy(s: &str) -> Result<InterpolationStrategy> {
    match s {
        "logits" => Ok(InterpolationStrategy::Logits),
        "all" => Ok(InterpolationStrategy::All),
        _ => {
            let mut parts = s.split(':');
            let bad = || config_err(format!("unknown interpolation strategy `{s}` (logits, all, random:<fraction>[:<seed>])"));
            if parts.next() != Some("random") {
                return Err(bad());
            }
            let fraction: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let seed: u64 = parts.next().map(str::parse).transpose().map_err(|_| bad())?.unwrap_or(0);
            Ok(InterpolationStrategy::RandomFraction { fraction, seed })
        }
    }
}

/// Mixture-BN interpolation sweep over `points` gammas in `[0, 1]`; writes
/// `tradeoff.csv` and `.svg`.
pub fn sweep_gamma(
    run_dir: &Path,
    which: &str,
    points: usize,
    strategies: &[InterpolationStrategy],
    attack: (f64, usize),
    out: Option<&Path>,
) -> Result<PathBuf> {
    let run = open_run(run_dir, which)?;
    if run.network.config().norm != NormStrategy::Mbn {
        return Err(config_err(format!("{} is not a mixture-BN model", run_dir.display())));
    }
    let out = default_out(&run, "sweep-gamma", out);
    let names: Vec<String> = strategies.iter().map(InterpolationStrategy::name).collect();
    let args = json!({"points": points, "strategies": names, "eps": attack.0, "steps": attack.1});
    let mut o = Output::begin("sweep-gamma", &out, inputs(&run, args), run.config.seed)?;
    let test = load_dataset(&run.config)?.test;
    let spec = AttackSpec::new("pgd", AttackConfig::pgd(eps_from_255(attack.0), attack.1));
    let mut rows = Vec::new();
    let mut head = Vec::new();
    for s in strategies {
        let pts = gamma_sweep(&run.network, &test, &gamma_grid(points), &spec, s, run.config.eval.batch_size, run.config.seed)?;
        let (h, r) = gamma_rows(&s.name(), "pgd", &pts);
        head = h;
        rows.extend(r);
    }
    o.csv("tradeoff_csv", "tradeoff.csv", &head, &rows)?;
    let svg = render(PlotKind::Interpolation, &[Table { headers: head, rows }], None)?;
    o.text("tradeoff_svg", "tradeoff.svg", &svg)?;
    o.finish()?;
    Ok(out)
}

/// Trains every matrix entry and writes `matrix.csv` into
/// `<output_dir>/<name>-matrix`.
pub fn sweep_matrix(base: &ExperimentConfig, entries: &[MatrixEntry], opts: RunOptions) -> Result<PathBuf> {
    let (h, rows) = method_matrix(base, entries, opts)?;
    let out = base.output_dir.join(format!("{}-matrix", base.name));
    let mut o = Output::begin("sweep-matrix", &out, json!({"base": base.identity(), "entries": entries}), base.seed)?;
    o.csv("matrix_csv", "matrix.csv", &h, &rows)?;
    o.finish()?;
    Ok(out)
}

/// KS comparison of BN running means at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub layer: usize,
    pub labels: [String; 2],
    pub ks_means: KsResult,
    pub ks_vars: KsResult,
    pub out: PathBuf,
}

/// Compares the running statistics of `run_dir` against `other`, or the two
/// branches of a mixture-BN model when `other` is `None`. Writes
/// `probe.csv`, `probe.json` and `probe.svg`.
pub fn probe_stats(
    run_dir: &Path,
    other: Option<&Path>,
    which: &str,
    layer: Option<usize>,
    out: Option<&Path>,
) -> Result<ProbeResult> {
    let a = open_run(run_dir, which)?;
    let b = other.map(|d| open_run(d, which)).transpose()?;
    let layer = layer.unwrap_or_else(|| a.network.config().probe_layer());
    let (sa, sb) = match &b {
        Some(b) => (
            bn_stats_scatter(&a.network, layer, &a.config.name, None)?,
            bn_stats_scatter(&b.network, layer, &b.config.name, None)?,
        ),
        None if a.network.config().norm == NormStrategy::Mbn => (
            bn_stats_scatter(&a.network, layer, "bn_clean", Some(Branch::Clean))?,
            bn_stats_scatter(&a.network, layer, "bn_adv", Some(Branch::Adv))?,
        ),
        None => return Err(config_err("probe-stats needs --other unless the run is a mixture-BN model")),
    };
    let out = default_out(&a, "probe", out);
    let args = json!({"layer": layer, "other": b.as_ref().map(|b| b.config.config_hash())});
    let mut o = Output::begin("probe-stats", &out, inputs(&a, args), a.config.seed)?;
    let head = ["source", "mean", "var"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = [&sa, &sb]
        .iter()
        .flat_map(|s| s.points.iter().map(|(m, v)| vec![s.source_label.clone(), m.to_string(), v.to_string()]))
        .collect();
    let ks_means = ks_two_sample(&sa.means(), &sb.means())?;
    let ks_vars = ks_two_sample(&sa.variances(), &sb.variances())?;
    o.csv("probe_csv", "probe.csv", &head, &rows)?;
    let summary = json!({
        "layer": layer,
        "sources": [sa.source_label, sb.source_label],
        "channels": sa.points.len(),
        "ks_means": {"statistic": ks_means.statistic, "p_value": ks_means.p_value, "exact": ks_means.exact},
        "ks_vars": {"statistic": ks_vars.statistic, "p_value": ks_vars.p_value, "exact": ks_vars.exact},
    });
    o.text("probe_json", "probe.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    let svg = render(PlotKind::Scatter, &[Table { headers: head, rows }], Some(&format!("BN statistics, layer {layer}")))?;
    o.text("probe_svg", "probe.svg", &svg)?;
    o.finish()?;
    Ok(ProbeResult {
        layer,
        labels: [sa.source_label, sb.source_label],
        ks_means,
        ks_vars,
        out,
    })
}

/// Margin, thickness and smoothness on the first `limit` usable test
/// samples; writes per-sample `metrics.csv`, `metrics.json` and a margin
/// histogram.
pub fn metrics(run_dir: &Path, which: &str, limit: usize, out: Option<&Path>) -> Result<(MetricSummary, PathBuf)> {
    let run = open_run(run_dir, which)?;
    let out = default_out(&run, "metrics", out);
    let cfg = match &run.config.eval_config()?.metrics {
        Some(m) => MetricConfig { limit, ..m.clone() },
        None => MetricConfig {
            limit,
            ..MetricConfig::default()
        },
    };
    let mut o = Output::begin("metrics", &out, inputs(&run, json!({"limit": limit})), run.config.seed)?;
    let test = load_dataset(&run.config)?.test;
    let view = EvalView::new(&run.network, run.method.eval_routings().0);
    let m = compute_metrics(&view, &test, &cfg, run.config.eval.batch_size, run.config.seed)?;
    let head = ["series", "metric", "value"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for (name, vals) in [("margin", &m.margins), ("thickness", &m.thickness), ("smoothness", &m.smoothness)] {
        rows.extend(vals.iter().map(|v| vec![run.config.name.clone(), name.to_string(), v.to_string()]));
    }
    o.csv("metrics_csv", "metrics.csv", &head, &rows)?;
    o.text("metrics_json", "metrics.json", &(serde_json::to_string_pretty(&m)? + "\n"))?;
    let t = Table { headers: head, rows }.filter("metric", "margin")?;
    o.text("margins_svg", "margins.svg", &render(PlotKind::Histogram, &[t], Some("Decision margin"))?)?;
    o.finish()?;
    Ok((m, out))
}

/// PNG sheet of the first `n` training images under each augmentation and
/// corruption, plus the row labels.
pub fn augment_preview(cfg: &ExperimentConfig, n: usize, severity: u8, scale: u32, out: &Path) -> Result<PathBuf> {
    let args = json!({"config": cfg.identity(), "n": n, "severity": severity, "scale": scale});
    let mut o = Output::begin("augment-preview", out, args, cfg.seed)?;
    let train = load_dataset(cfg)?.train;
    let t = &cfg.train;
    let aug = Augmenter::new(cfg.data_shape().0[0], t.deepaugment.clone(), t.tda.clone(), cfg.seed)?;
    let rows = crate::preview::preview_rows(&train, n, &aug, severity, cfg.seed)?;
    crate::preview::write_preview(&out.join("preview.png"), &rows, scale)?;
    o.record("preview_png", "preview.png")?;
    o.text("preview_rows", "rows.txt", &(crate::preview::preview_labels(severity).join("\n") + "\n"))?;
    o.finish()?;
    Ok(out.join("preview.png"))
}

/// Runs the reproduction suite, writing `criteria.csv`, `criteria.txt` and
/// the supporting tables and plots into `out`.
pub fn repro(recipe: Recipe, out: &Path, report: &mut dyn FnMut(&Criterion), on_train: Option<Box<dyn Fn(&str) + Sync>>) -> Result<Vec<Criterion>> {
    let args = json!({"base": recipe.base.identity(), "seeds": recipe.seeds, "eval_eps": recipe.eval_eps});
    let mut o = Output::begin("repro", out, args, recipe.base.seed)?;
    let mut zoo = Zoo::new(recipe)?;
    zoo.on_train = on_train;
    let all = run_suite(&zoo, Some(out), report)?;
    for (kind, rel) in [
        ("probe_csv", "probe.csv"),
        ("probe_svg", "probe.svg"),
        ("tradeoff_csv", "tradeoff.csv"),
        ("tradeoff_svg", "tradeoff.svg"),
        ("eps_sweep_csv", "eps_sweep.csv"),
        ("eps_sweep_svg", "eps_sweep.svg"),
        ("metrics_csv", "metrics.csv"),
        ("margins_svg", "margins.svg"),
    ] {
        o.record(kind, rel)?;
    }
    let head = ["id", "name", "pass", "detail"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = all
        .iter()
        .map(|c| vec![c.id.to_string(), c.name.to_string(), c.pass.to_string(), c.detail.clone()])
        .collect();
    o.csv("criteria_csv", "criteria.csv", &head, &rows)?;
    let text: String = all.iter().map(|c| c.line() + "\n").collect();
    o.text("criteria_txt", "criteria.txt", &text)?;
    o.finish()?;
    Ok(all)
}
