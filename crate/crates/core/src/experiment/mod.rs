//! Experiment specs, sweep expansion, run orchestration and result manifests.

mod grid;
mod report;
mod table4;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::acquisition::AcquisitionStrategy;
use crate::error::{Error, Result};
use crate::policy::{SyntheticTask, TaskConfig};
use crate::ratio::DiscrepancyBound;
use crate::sim::{run_simulation, RunSummary, SimConfig, StepMetrics};

pub use grid::{grid_rows, render_grid, run_name, GridRow, ThresholdGrid, EARLY_WINDOW};
pub use report::{emit_report, read_metrics, ReportOutput, RunMetrics};
pub use table4::{render_table4, table4, Table4Row, ThresholdBlock, DEFAULT_BLOCKS};

pub const MANIFEST_FORMAT: &str = "asyncmis-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One swept parameter: a dotted path into `{task, sim}` and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub path: String,
    pub values: Vec<Value>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweeps: Vec<Sweep>,
    #[serde(default = "one")]
    pub repeats: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<ThresholdGrid>,
}

impl ExperimentSpec {
    pub fn new(name: impl Into<String>, task: TaskConfig, sim: SimConfig) -> Self {
        Self {
            name: name.into(),
            task,
            sim,
            sweeps: Vec::new(),
            repeats: 1,
            outputs: None,
            grid: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Checks the base config, the task, every sweep path and every grid point.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("experiment name must not be empty"));
        }
        if self.repeats < 1 {
            return Err(Error::config("repeats must be at least 1"));
        }
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        self.plan(None).map(|_| ())
    }

    /// Expands sweeps, grid cells and repeats into concrete runs.
    pub fn plan(&self, seed: Option<u64>) -> Result<Vec<RunPlan>> {
        let mut base = serde_json::to_value(ResolvedConfig {
            task: self.task.clone(),
            sim: self.sim.clone(),
        })?;
        if let Some(seed) = seed {
            base["sim"]["seed"] = Value::from(seed);
        }
        let mut points: Vec<Vec<Assignment>> = vec![Vec::new()];
        for sweep in &self.sweeps {
            if sweep.values.is_empty() {
                return Err(Error::config(format!("sweep `{}` has no values", sweep.path)));
            }
            points = points
                .into_iter()
                .flat_map(|p| {
                    sweep.values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(Assignment {
                            path: sweep.path.clone(),
                            value: v.clone(),
                        });
                        q
                    })
                })
                .collect();
        }
        let cells: Vec<Option<(f64, f64)>> = match &self.grid {
            Some(g) => g.cells().into_iter().map(Some).collect(),
            None => vec![None],
        };
        let mut plans = Vec::new();
        for cell in &cells {
            for point in &points {
                let mut value = base.clone();
                for a in point {
                    set_path(&mut value, &a.path, a.value.clone())?;
                }
                let mut resolved: ResolvedConfig = serde_json::from_value(value)
                    .map_err(|e| Error::config(format!("sweep produced an invalid config: {e}")))?;
                if let Some((mask, stale)) = *cell {
                    resolved.sim.mis.disc_mask = DiscrepancyBound::Multiplicative { c: mask };
                    resolved.sim.mis.clip_low = stale - 1.0;
                    resolved.sim.mis.clip_high = stale - 1.0;
                }
                resolved.sim.validate()?;
                SyntheticTask::new(resolved.task.clone())?;
                let label = match cell {
                    Some((m, s)) => {
                        let mut l = run_name(resolved.sim.strategy, *m, *s);
                        if !point.is_empty() {
                            l = format!("{l}_{}", point_label(point));
                        }
                        l
                    }
                    None if point.is_empty() => sanitize(&self.name),
                    None => point_label(point),
                };
                for repeat in 0..self.repeats {
                    let mut config = resolved.clone();
                    config.sim.seed = resolved.sim.seed.wrapping_add(u64::from(repeat));
                    let name = if self.repeats > 1 {
                        format!("{label}_r{repeat}")
                    } else {
                        label.clone()
                    };
                    plans.push(RunPlan {
                        name,
                        label: label.clone(),
                        repeat,
                        point: point.clone(),
                        cell: *cell,
                        config,
                    });
                }
            }
        }
        let mut names: Vec<&str> = plans.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config(format!("duplicate run name `{}`", w[0])));
        }
        Ok(plans)
    }
}

/// A task plus simulator configuration, exactly as executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub task: TaskConfig,
    pub sim: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub path: String,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub name: String,
    pub label: String,
    pub repeat: u32,
    pub point: Vec<Assignment>,
    /// `(mask threshold, stale threshold)` for grid runs.
    pub cell: Option<(f64, f64)>,
    pub config: ResolvedConfig,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let pointer = format!("/{}", path.replace('.', "/"));
    match root.pointer_mut(&pointer) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(Error::config(format!("sweep path `{path}` does not resolve"))),
    }
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn point_label(point: &[Assignment]) -> String {
    let parts: Vec<String> = point
        .iter()
        .map(|a| format!("{}={}", a.path, value_label(&a.value)))
        .collect();
    sanitize(&parts.join("_"))
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._=-".contains(c) { c } else { '-' })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub name: String,
    pub label: String,
    pub repeat: u32,
    pub seed: u64,
    pub point: Vec<Assignment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cell: Option<(f64, f64)>,
    pub strategy: AcquisitionStrategy,
    pub config: ResolvedConfig,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the result directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub name: String,
    pub repeats: u32,
    pub runs: Vec<RunEntry>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Corrupt {
            path: path.clone(),
            reason: format!("cannot read manifest: {e}"),
        })?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Corrupt {
                path,
                reason: format!("unsupported manifest format `{}`", m.format),
            });
        }
        Ok(m)
    }

    pub fn file(&self, path: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` under `dir` and returns its manifest entry.
pub(crate) fn write_tracked(dir: &Path, rel: &str, bytes: &[u8]) -> Result<FileEntry> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, bytes)?;
    Ok(FileEntry {
        path: rel.to_string(),
        sha256: sha256_hex(bytes),
        bytes: bytes.len() as u64,
    })
}

/// A line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step(StepMetrics),
    Summary(RunSummary),
}

pub fn metrics_jsonl(metrics: &[StepMetrics], summary: &RunSummary) -> Result<String> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(&MetricsRecord::Step(m.clone()))?);
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&MetricsRecord::Summary(summary.clone()))?);
    out.push('\n');
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub failures: usize,
    pub grid: Option<Vec<GridRow>>,
}

struct RunResult {
    entry: RunEntry,
    files: Vec<FileEntry>,
    metrics: Option<Vec<StepMetrics>>,
}

fn execute(plan: &RunPlan, dir: &Path) -> Result<RunResult> {
    let task = SyntheticTask::new(plan.config.task.clone())?;
    let rel_dir = format!("runs/{}", plan.name);
    let mut files = vec![write_tracked(
        dir,
        &format!("{rel_dir}/config.toml"),
        toml::to_string(&plan.config)?.as_bytes(),
    )?];
    let mut entry = RunEntry {
        name: plan.name.clone(),
        label: plan.label.clone(),
        repeat: plan.repeat,
        seed: plan.config.sim.seed,
        point: plan.point.clone(),
        cell: plan.cell,
        strategy: plan.config.sim.strategy,
        config: plan.config.clone(),
        status: RunStatus::Ok,
        error: None,
        metrics: None,
        summary: None,
    };
    match run_simulation(&plan.config.sim, &task) {
        Ok(out) => {
            let rel = format!("{rel_dir}/metrics.jsonl");
            files.push(write_tracked(dir, &rel, metrics_jsonl(&out.metrics, &out.summary)?.as_bytes())?);
            entry.metrics = Some(rel);
            entry.summary = Some(out.summary);
            Ok(RunResult {
                entry,
                files,
                metrics: Some(out.metrics),
            })
        }
        Err(e) => {
            entry.status = RunStatus::Failed;
            entry.error = Some(e.to_string());
            Ok(RunResult {
                entry,
                files,
                metrics: None,
            })
        }
    }
}

/// Runs every planned run of `spec` into `out`, `jobs` at a time.
///
/// Each run is serial and seeded, so the outputs do not depend on `jobs`.
/// Failed runs are recorded in the manifest and counted in the result.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path, jobs: usize, seed: Option<u64>) -> Result<ExperimentResult> {
    spec.validate()?;
    let plans = spec.plan(seed)?;
    fs::create_dir_all(out)?;
    let probe = out.join(".write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Protocol(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<RunResult>> = pool.install(|| plans.par_iter().map(|p| execute(p, out)).collect());
    let mut runs = Vec::with_capacity(results.len());
    let mut files = vec![write_tracked(out, "spec.toml", spec.to_toml_string()?.as_bytes())?];
    let mut series = Vec::new();
    for r in results {
        let r = r?;
        files.extend(r.files);
        series.push((r.entry.clone(), r.metrics));
        runs.push(r.entry);
    }
    let failures = runs.iter().filter(|r| r.status == RunStatus::Failed).count();
    let grid = match &spec.grid {
        Some(_) => {
            let rows = grid_rows(&series);
            files.push(write_tracked(out, "grid.tsv", render_grid(&rows).as_bytes())?);
            Some(rows)
        }
        None => None,
    };
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        name: spec.name.clone(),
        repeats: spec.repeats,
        runs,
        files,
    };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(ExperimentResult {
        dir: out.to_path_buf(),
        manifest,
        failures,
        grid,
    })
}
