//! Plot-ready series files and summary tables from a result directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{RunSummary, StepMetrics, FINAL_WINDOW};

use super::{sha256_hex, write_tracked, FileEntry, Manifest, MetricsRecord, RunStatus, MANIFEST_FORMAT};

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub steps: Vec<StepMetrics>,
    pub summary: Option<RunSummary>,
}

/// Parses a metrics file written by a run.
pub fn read_metrics(path: &Path) -> Result<RunMetrics> {
    let text = fs::read_to_string(path).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: format!("cannot read metrics: {e}"),
    })?;
    let mut steps = Vec::new();
    let mut summary = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(line).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        match rec {
            MetricsRecord::Step(s) => steps.push(s),
            MetricsRecord::Summary(s) => summary = Some(s),
        }
    }
    if steps.is_empty() {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: "no step records".into(),
        });
    }
    Ok(RunMetrics { steps, summary })
}

/// Per-run statistics recomputed from the step series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub run: String,
    pub updates: usize,
    pub final_success: f64,
    pub peak_success: f64,
    pub min_rho: f64,
    pub mean_rho: f64,
    pub final_rho: f64,
    pub mean_clip: f64,
    pub resets: u64,
    pub max_gap: u64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn summarize(run: &str, steps: &[StepMetrics]) -> SeriesSummary {
    let tail = &steps[steps.len().saturating_sub(FINAL_WINDOW)..];
    let rho: Vec<f64> = steps.iter().map(|s| s.mask_fraction).collect();
    SeriesSummary {
        run: run.to_string(),
        updates: steps.len(),
        final_success: mean(&tail.iter().map(|s| s.task_success).collect::<Vec<_>>()),
        peak_success: steps.iter().map(|s| s.task_success).fold(f64::NEG_INFINITY, f64::max),
        min_rho: rho.iter().copied().fold(f64::INFINITY, f64::min),
        mean_rho: mean(&rho),
        final_rho: mean(&tail.iter().map(|s| s.mask_fraction).collect::<Vec<_>>()),
        mean_clip: mean(&steps.iter().map(|s| s.ppo_clip_fraction).collect::<Vec<_>>()),
        resets: steps.iter().map(|s| s.reset_events).sum(),
        max_gap: steps.iter().map(|s| s.max_version_gap).max().unwrap_or(0),
    }
}

fn series(steps: &[StepMetrics], f: impl Fn(&StepMetrics) -> f64) -> String {
    let mut out = String::from("step\tvalue\n");
    for s in steps {
        let _ = writeln!(out, "{}\t{}", s.step, f(s));
    }
    out
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub dir: PathBuf,
    pub summaries: Vec<SeriesSummary>,
    pub files: Vec<FileEntry>,
}

/// Writes `report/` under a result directory.
///
/// For every successful run: `<run>.success.tsv`, `<run>.rho.tsv`,
/// `<run>.clip.tsv`, and `<run>.resets.tsv` when the run reset its reference.
/// Also `summary.tsv`, `summary.txt`, and `report/manifest.json` with checksums.
pub fn emit_report(dir: &Path) -> Result<ReportOutput> {
    let manifest = Manifest::load(dir)?;
    let out_dir = dir.join("report");
    let mut files = Vec::new();
    let mut summaries = Vec::new();
    for run in &manifest.runs {
        if run.status != RunStatus::Ok {
            continue;
        }
        let rel = run.metrics.as_ref().ok_or_else(|| Error::Corrupt {
            path: dir.join(super::MANIFEST_FILE),
            reason: format!("run `{}` lists no metrics file", run.name),
        })?;
        let path = dir.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::Corrupt {
            path: path.clone(),
            reason: format!("missing metrics: {e}"),
        })?;
        if let Some(entry) = manifest.file(rel) {
            let actual = sha256_hex(&bytes);
            if actual != entry.sha256 {
                return Err(Error::Corrupt {
                    path,
                    reason: format!("sha256 {actual} does not match manifest {}", entry.sha256),
                });
            }
        }
        let metrics = read_metrics(&path)?;
        let steps = &metrics.steps;
        let name = &run.name;
        files.push(write_tracked(&out_dir, &format!("{name}.success.tsv"), series(steps, |s| s.task_success).as_bytes())?);
        files.push(write_tracked(&out_dir, &format!("{name}.rho.tsv"), series(steps, |s| s.mask_fraction).as_bytes())?);
        files.push(write_tracked(&out_dir, &format!("{name}.clip.tsv"), series(steps, |s| s.ppo_clip_fraction).as_bytes())?);
        let resets: Vec<&StepMetrics> = steps.iter().filter(|s| s.reset_events > 0).collect();
        if !resets.is_empty() {
            let mut text = String::from("step\treset_count\n");
            for s in resets {
                let _ = writeln!(text, "{}\t{}", s.step, s.reset_count);
            }
            files.push(write_tracked(&out_dir, &format!("{name}.resets.tsv"), text.as_bytes())?);
        }
        summaries.push(summarize(name, steps));
    }

    let mut tsv = String::from("run\tupdates\tfinal_success\tpeak_success\tmin_rho\tmean_rho\tfinal_rho\tmean_clip\tresets\tmax_gap\n");
    let width = summaries.iter().map(|s| s.run.len()).max().unwrap_or(3).max(3);
    let mut txt = format!(
        "{:<width$}  {:>7}  {:>8}  {:>8}  {:>7}  {:>8}  {:>9}  {:>9}  {:>6}  {:>7}\n",
        "run", "updates", "final_sr", "peak_sr", "min_rho", "mean_rho", "final_rho", "mean_clip", "resets", "max_gap"
    );
    for s in &summaries {
        let _ = writeln!(
            tsv,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.run, s.updates, s.final_success, s.peak_success, s.min_rho, s.mean_rho, s.final_rho, s.mean_clip, s.resets, s.max_gap
        );
        let _ = writeln!(
            txt,
            "{:<width$}  {:>7}  {:>8.4}  {:>8.4}  {:>7.4}  {:>8.4}  {:>9.4}  {:>9.4}  {:>6}  {:>7}",
            s.run, s.updates, s.final_success, s.peak_success, s.min_rho, s.mean_rho, s.final_rho, s.mean_clip, s.resets, s.max_gap
        );
    }
    files.push(write_tracked(&out_dir, "summary.tsv", tsv.as_bytes())?);
    files.push(write_tracked(&out_dir, "summary.txt", txt.as_bytes())?);
    let report_manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        name: format!("{} report", manifest.name),
        repeats: manifest.repeats,
        runs: Vec::new(),
        files: files.clone(),
    };
    fs::write(out_dir.join(super::MANIFEST_FILE), serde_json::to_string_pretty(&report_manifest)?)?;
    Ok(ReportOutput {
        dir: out_dir,
        summaries,
        files,
    })
}
