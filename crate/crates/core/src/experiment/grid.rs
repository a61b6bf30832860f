//! Discrepancy-threshold by stale-threshold comparison grids.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionStrategy;
use crate::error::{Error, Result};
use crate::sim::StepMetrics;

use super::{RunEntry, RunStatus};

/// Mask thresholds `c` (multiplicative band `[1/c, c]`) crossed with stale
/// thresholds `s` (PPO band `[2 - s, s]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdGrid {
    pub mask: Vec<f64>,
    pub stale: Vec<f64>,
}

impl ThresholdGrid {
    pub fn validate(&self) -> Result<()> {
        if self.mask.is_empty() || self.stale.is_empty() {
            return Err(Error::config("threshold grid must have at least one mask and one stale value"));
        }
        for &v in self.mask.iter().chain(&self.stale) {
            if !(v > 1.0 && v < 2.0) {
                return Err(Error::config(format!("grid thresholds must lie in (1, 2), got {v}")));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.mask
            .iter()
            .flat_map(|&m| self.stale.iter().map(move |&s| (m, s)))
            .collect()
    }
}

fn thousandths(x: f64) -> String {
    format!("{:.0}", x * 1000.0)
}

/// `<strategy prefix><mask x 1000>_<stale x 1000>`, e.g. `snap1003_1006`.
pub fn run_name(strategy: AcquisitionStrategy, mask: f64, stale: f64) -> String {
    format!("{}{}_{}", strategy.run_prefix(), thousandths(mask), thousandths(stale))
}

/// Steps averaged for the early-window mask fraction.
pub const EARLY_WINDOW: usize = 10;

/// One grid cell aggregated over its repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub name: String,
    pub mask: f64,
    pub stale: f64,
    pub runs: usize,
    pub final_success: f64,
    pub peak_success: f64,
    /// Best final success over repeats.
    pub best_final_success: f64,
    pub mean_rho: f64,
    pub early_rho: f64,
    pub mean_clip: f64,
}

fn avg(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn grid_rows(series: &[(RunEntry, Option<Vec<StepMetrics>>)]) -> Vec<GridRow> {
    let mut rows: Vec<GridRow> = Vec::new();
    let mut acc: Vec<Vec<(f64, f64, f64, f64, f64)>> = Vec::new();
    for (entry, metrics) in series {
        let Some((mask, stale)) = entry.cell else { continue };
        let pos = match rows.iter().position(|r| r.name == entry.label) {
            Some(p) => p,
            None => {
                rows.push(GridRow {
                    name: entry.label.clone(),
                    mask,
                    stale,
                    runs: 0,
                    final_success: 0.0,
                    peak_success: 0.0,
                    best_final_success: 0.0,
                    mean_rho: 0.0,
                    early_rho: 0.0,
                    mean_clip: 0.0,
                });
                acc.push(Vec::new());
                rows.len() - 1
            }
        };
        if entry.status != RunStatus::Ok {
            continue;
        }
        let (Some(s), Some(m)) = (&entry.summary, metrics) else { continue };
        let early: Vec<f64> = m.iter().take(EARLY_WINDOW).map(|x| x.mask_fraction).collect();
        acc[pos].push((
            s.final_success,
            s.peak_success,
            s.mean_mask_fraction,
            avg(&early),
            s.mean_clip_fraction,
        ));
    }
    for (row, a) in rows.iter_mut().zip(acc) {
        let col = |f: fn(&(f64, f64, f64, f64, f64)) -> f64| a.iter().map(f).collect::<Vec<_>>();
        row.runs = a.len();
        row.final_success = avg(&col(|t| t.0));
        row.peak_success = avg(&col(|t| t.1));
        row.best_final_success = col(|t| t.0).into_iter().fold(0.0, f64::max);
        row.mean_rho = avg(&col(|t| t.2));
        row.early_rho = avg(&col(|t| t.3));
        row.mean_clip = avg(&col(|t| t.4));
    }
    rows
}

pub fn render_grid(rows: &[GridRow]) -> String {
    let mut out = String::from(
        "name\tmask\tstale\truns\tfinal_success\tpeak_success\tbest_final_success\tmean_rho\tearly_rho\tmean_clip\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.name,
            r.mask,
            r.stale,
            r.runs,
            r.final_success,
            r.peak_success,
            r.best_final_success,
            r.mean_rho,
            r.early_rho,
            r.mean_clip
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naming_convention() {
        assert_eq!(run_name(AcquisitionStrategy::Snapshot, 1.003, 1.006), "snap1003_1006");
        let g = ThresholdGrid {
            mask: vec![1.003, 1.005],
            stale: vec![1.004, 1.006],
        };
        let names: Vec<String> = g
            .cells()
            .into_iter()
            .map(|(m, s)| run_name(AcquisitionStrategy::Snapshot, m, s))
            .collect();
        assert_eq!(names, ["snap1003_1004", "snap1003_1006", "snap1005_1004", "snap1005_1006"]);
        assert!(ThresholdGrid { mask: vec![], stale: vec![1.1] }.validate().is_err());
    }
}
