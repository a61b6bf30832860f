//! Effective thresholds on the total ratio for interpolation proxies.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::proxy::{alpha_from_gap, effective_bounds};
use crate::ratio::ProxyForm;

/// One setting of original mask and clip intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBlock {
    pub mask: (f64, f64),
    pub clip: (f64, f64),
}

/// The settings used in the reference experiments and nearby ones.
pub const DEFAULT_BLOCKS: [ThresholdBlock; 4] = [
    ThresholdBlock {
        mask: (0.990, 1.010),
        clip: (0.997, 1.004),
    },
    ThresholdBlock {
        mask: (0.995, 1.005),
        clip: (0.997, 1.004),
    },
    ThresholdBlock {
        mask: (0.990, 1.010),
        clip: (0.996, 1.006),
    },
    ThresholdBlock {
        mask: (0.980, 1.020),
        clip: (0.997, 1.004),
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table4Row {
    pub block: ThresholdBlock,
    pub gap: u64,
    pub form: ProxyForm,
    /// Effective mask interval on `r_total`.
    pub mask: (f64, f64),
    /// `(lower bound for A < 0, upper bound for A >= 0)` on `r_total`.
    pub clip: (f64, f64),
}

/// Rows for every block, gap and interpolation form, in that nesting order.
pub fn table4(blocks: &[ThresholdBlock], gaps: &[u64]) -> Result<Vec<Table4Row>> {
    let mut rows = Vec::with_capacity(blocks.len() * gaps.len() * 2);
    for &block in blocks {
        for &gap in gaps {
            let alpha = alpha_from_gap(gap)?;
            for form in [ProxyForm::Arithmetic, ProxyForm::LogLinear] {
                let b = effective_bounds(form, block.mask, block.clip.0, block.clip.1, alpha)?;
                rows.push(Table4Row {
                    block,
                    gap,
                    form,
                    mask: b.mask_interval,
                    clip: (b.clip_lower_neg, b.clip_upper_pos),
                });
            }
        }
    }
    Ok(rows)
}

fn form_label(form: ProxyForm) -> &'static str {
    match form {
        ProxyForm::Arithmetic => "Linear",
        ProxyForm::LogLinear => "Log-linear",
    }
}

/// Fixed-width text rendering with 4-decimal effective bounds.
pub fn render_table4(rows: &[Table4Row]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<16} {:>2}  {:<10}  {:<18} {}",
        "mask", "clip", "n", "interp", "mask on r_total", "clip on r_total"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "[{:.3},{:.3}]    [{:.3},{:.3}]    {:>2}  {:<10}  [{:.4},{:.4}]    [{:.4},{:.4}]",
            r.block.mask.0,
            r.block.mask.1,
            r.block.clip.0,
            r.block.clip.1,
            r.gap,
            form_label(r.form),
            r.mask.0,
            r.mask.1,
            r.clip.0,
            r.clip.1
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_shape() {
        let rows = table4(&DEFAULT_BLOCKS, &[1, 2, 3]).unwrap();
        assert_eq!(rows.len(), 24);
        let text = render_table4(&rows);
        assert_eq!(text.lines().count(), 25);
        assert!(text.contains("[0.9801,1.0201]"));
    }
}
