//! Experiment orchestration for `idw-core`: data generation, training,
//! IDW runs, evaluation, sweeps and CSV reports.
//!
//! Every command writes into its own timestamped run directory under the
//! output root (`$IDW_OUTPUT_ROOT`, default `runs`).

pub mod spec;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use idw_core::dataset::ingest;
use idw_core::eval::{evaluate, MetricsReport};
use idw_core::experiment::{run_methods, Method, MethodRun, Prepared};
use idw_core::synthetic::{generate_dataset, SynthConfig};
use idw_core::towers::{all_item_representations, write_item_csv, TowerParams};
use log::{error, info};

pub use spec::{load_spec, Axis, DataSource, ExperimentSpec, Preset, SweepSpec};

pub const OUTPUT_ROOT_VAR: &str = "IDW_OUTPUT_ROOT";

/// Why a command failed, and the matching process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation or configuration (exit 1).
    Usage(String),
    /// A run failed (exit 2).
    Runtime(anyhow::Error),
    /// Some sweep runs failed; the rest completed (exit 3).
    Partial { failed: usize, total: usize },
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Partial { .. } => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Runtime(e) => write!(f, "{e:#}"),
            Failure::Partial { failed, total } => {
                write!(f, "{failed} of {total} sweep runs failed")
            }
        }
    }
}

impl From<idw_core::Error> for Failure {
    fn from(e: idw_core::Error) -> Self {
        match e {
            idw_core::Error::InvalidConfig(m) => Failure::Usage(m),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `<root>/<command>-<YYYYmmdd-HHMMSS>`, adding a counter suffix if
/// that directory already exists.
pub fn create_run_dir(root: &Path, command: &str) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{command}-{stamp}");
    let mut dir = root.join(&base);
    let mut n = 1;
    loop {
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                n += 1;
                dir = root.join(format!("{base}-{n}"));
            }
            Err(e) => return Err(e),
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Generates a synthetic dataset into `dir`.
pub fn generate(config: &SynthConfig, dir: &Path) -> Result<(), Failure> {
    config
        .validate()
        .map_err(|e| Failure::usage(format!("synthetic config: {e}")))?;
    let data = generate_dataset(config)?;
    data.write_to_dir(dir)?;
    info!(
        "generated {} users, {} interactions into {}",
        data.log.num_users(),
        data.log.num_interactions(),
        dir.display()
    );
    Ok(())
}

/// Loads the data of one run seed. Synthetic data is generated with
/// `rng_seed + seed`.
pub fn prepare(data: &DataSource, seed: u64) -> Result<Prepared, Failure> {
    match data {
        DataSource::Synthetic {
            config,
            head_clusters,
        } => {
            let config = SynthConfig {
                rng_seed: config.rng_seed.wrapping_add(seed),
                ..config.clone()
            };
            Ok(Prepared::from_synthetic(
                &generate_dataset(&config)?,
                head_clusters,
            )?)
        }
        DataSource::Log { path, format } => {
            let log = ingest(path, *format)?.log;
            Ok(Prepared::from_log(&log, idw_core::dataset::MAX_LEN)?)
        }
    }
}

/// Writes the artifacts of one trained method into `dir`.
pub fn write_method_run(dir: &Path, run: &MethodRun, dump_embeddings: bool) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)?;
    run.params.save_json(&dir.join("params.json"))?;
    run.report.write_json(&dir.join("metrics.json"))?;
    if let Some(t) = &run.trained {
        t.write_history_csv(&dir.join("history.csv"))?;
    }
    if let Some(idw) = &run.idw {
        idw.write_log_csv(&dir.join("idw_log.csv"))?;
        idw.final_weights().write_csv(&dir.join("weights.csv"))?;
        idw.calibration
            .write_history_csv(&dir.join("calibration_history.csv"))?;
    }
    if dump_embeddings {
        let normalize = run.method.strategy().normalizes_at_eval();
        write_item_csv(
            &dir.join("items.csv"),
            &all_item_representations(&run.params, normalize),
        )?;
    }
    Ok(())
}

fn seed_dir(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}"))
}

/// Runs `methods` for one seed; MUR and MUR-IDW share the unweighted run.
fn run_seed(
    spec: &ExperimentSpec,
    methods: &[Method],
    seed: u64,
    dir: &Path,
) -> Result<(), Failure> {
    let data = prepare(&spec.data, seed)?;
    let config = spec.experiment.with_seed(seed);
    let runs = run_methods(methods, &data, &config)?;
    for run in &runs {
        write_method_run(&dir.join(run.method.name()), run, spec.dump_embeddings)?;
    }
    Ok(())
}

/// `train` / `idw`: runs the spec's method for every seed, then writes
/// `summary.csv` from the per-run metrics.
pub fn run(spec: &ExperimentSpec, dir: &Path) -> Result<(), Failure> {
    spec.validate()?;
    write_json(&dir.join("config.json"), spec)?;
    for &seed in &spec.seeds {
        info!("{} seed {seed}", spec.method.name());
        run_seed(spec, &[spec.method], seed, &seed_dir(dir, seed))?;
    }
    write_summary(dir)
}

/// `evaluate`: scores a checkpoint on the test split of the spec's data
/// (first seed) and writes `metrics.json`.
pub fn evaluate_checkpoint(
    spec: &ExperimentSpec,
    checkpoint: &Path,
    dir: &Path,
) -> Result<MetricsReport, Failure> {
    spec.validate()?;
    if !checkpoint.exists() {
        return Err(Failure::usage(format!(
            "checkpoint: {} does not exist",
            checkpoint.display()
        )));
    }
    let params = TowerParams::load_json(checkpoint)?;
    let data = prepare(&spec.data, spec.seeds[0])?;
    if params.config.num_items != data.splits.num_items {
        return Err(Failure::usage(format!(
            "checkpoint has {} items but the data has {}",
            params.config.num_items, data.splits.num_items
        )));
    }
    let mut protocol = spec.experiment.eval.clone();
    protocol.normalize_items = spec.method.strategy().normalizes_at_eval();
    let mut report = evaluate(
        &params,
        &data.splits,
        &data.splits.test,
        &data.partition,
        &protocol,
    )?;
    if let Some(c) = &data.clusters {
        report.ms_score = Some(idw_core::eval::mean_silhouette(
            &all_item_representations(&params, false),
            c,
        )?);
    }
    write_json(&dir.join("config.json"), spec)?;
    std::fs::write(
        dir.join("checkpoint.txt"),
        format!("{}\n", checkpoint.display()),
    )?;
    report.write_json(&dir.join("metrics.json"))?;
    Ok(report)
}

/// `(split, metric, value)` rows of a report; MS is reported on split `all`.
pub fn metric_rows(report: &MetricsReport) -> Vec<(String, String, f64)> {
    let mut rows = Vec::new();
    for m in &report.metrics {
        rows.push((m.split.name().to_string(), format!("hr@{}", m.k), m.hr));
        rows.push((m.split.name().to_string(), format!("ndcg@{}", m.k), m.ndcg));
    }
    if let Some(ms) = report.ms_score {
        rows.push(("all".to_string(), "ms".to_string(), ms));
    }
    rows
}

/// Every `metrics.json` below `dir`, paired with its parent directory
/// relative to `dir`, in sorted order.
pub fn collect_metrics(dir: &Path) -> Result<Vec<(PathBuf, MetricsReport)>, Failure> {
    fn walk(
        root: &Path,
        dir: &Path,
        out: &mut Vec<(PathBuf, MetricsReport)>,
    ) -> Result<(), Failure> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if e.file_name() == "metrics.json" {
                let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                let rel = dir.strip_prefix(root).unwrap_or(dir).to_path_buf();
                out.push((rel, report));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

fn write_rows(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<(), Failure> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{}", r.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// `summary.csv` (`method,seed,split,metric,value`) of a run directory laid
/// out as `seed-<s>/<method>/metrics.json`.
pub fn write_summary(dir: &Path) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for (rel, report) in collect_metrics(dir)? {
        let parts: Vec<String> = rel
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect();
        let [seed, method] = parts.as_slice() else {
            continue;
        };
        let Some(seed) = seed.strip_prefix("seed-") else {
            continue;
        };
        for (split, metric, value) in metric_rows(&report) {
            rows.push(vec![
                method.clone(),
                seed.to_string(),
                split,
                metric,
                value.to_string(),
            ]);
        }
    }
    write_rows(
        &dir.join("summary.csv"),
        "method,seed,split,metric,value",
        &rows,
    )
}

/// Consolidates a sweep directory laid out as
/// `<axis>=<value>/seed-<s>/<method>/metrics.json` into `sweep.csv` with
/// columns `method,axis_value,seed,split,metric,value`. Reads only the
/// per-run JSON files. Returns the number of rows.
pub fn consolidate_sweep(dir: &Path) -> Result<usize, Failure> {
    let mut rows = Vec::new();
    for (rel, report) in collect_metrics(dir)? {
        let parts: Vec<String> = rel
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect();
        let [point, seed, method] = parts.as_slice() else {
            continue;
        };
        let (Some((_, value)), Some(seed)) = (point.split_once('='), seed.strip_prefix("seed-"))
        else {
            continue;
        };
        for (split, metric, v) in metric_rows(&report) {
            rows.push(vec![
                method.clone(),
                value.to_string(),
                seed.to_string(),
                split,
                metric,
                v.to_string(),
            ]);
        }
    }
    write_rows(
        &dir.join("sweep.csv"),
        "method,axis_value,seed,split,metric,value",
        &rows,
    )?;
    Ok(rows.len())
}

/// Runs every (value, seed) of a sweep. A failed run is logged and
/// skipped; the result is [`Failure::Partial`] if any run failed.
pub fn sweep(spec: &SweepSpec, dir: &Path) -> Result<usize, Failure> {
    let points = spec.points()?;
    write_json(&dir.join("config.json"), spec)?;
    let mut failed = 0;
    let mut total = 0;
    for point in &points {
        let point_dir = dir.join(format!("{}={}", spec.axis.name(), point.label));
        for &seed in &point.spec.seeds {
            total += 1;
            info!("sweep {}={} seed {seed}", spec.axis.name(), point.label);
            if let Err(e) = run_seed(
                &point.spec,
                &point.methods,
                seed,
                &seed_dir(&point_dir, seed),
            ) {
                error!(
                    "{}={} seed {seed} failed: {e}",
                    spec.axis.name(),
                    point.label
                );
                failed += 1;
            }
        }
    }
    let rows = consolidate_sweep(dir)?;
    if failed > 0 {
        return Err(Failure::Partial { failed, total });
    }
    Ok(rows)
}

/// `report`: consolidates every `metrics.json` below `dir` into
/// `report.csv` (`run,split,metric,value`) and returns the rows.
pub fn report(dir: &Path) -> Result<Vec<Vec<String>>, Failure> {
    if !dir.is_dir() {
        return Err(Failure::usage(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut rows = Vec::new();
    for (rel, report) in collect_metrics(dir)? {
        let run = rel.to_string_lossy().replace('\\', "/");
        let run = if run.is_empty() { ".".to_string() } else { run };
        for (split, metric, value) in metric_rows(&report) {
            rows.push(vec![run.clone(), split, metric, value.to_string()]);
        }
    }
    if rows.is_empty() {
        return Err(Failure::usage(format!(
            "no metrics.json below {}",
            dir.display()
        )));
    }
    write_rows(&dir.join("report.csv"), "run,split,metric,value", &rows)?;
    Ok(rows)
}
