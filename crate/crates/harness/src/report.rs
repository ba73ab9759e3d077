//! Aggregates experiment summaries into a per-method table.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::experiment::SummaryCell;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub k: usize,
    pub training_seeds: usize,
    pub sliced_wasserstein: f64,
    pub mode_agreement: f64,
    pub condition_accuracy: f64,
    pub params: f64,
    pub flops: f64,
    /// Training seeds where this split is at least as close to the data as
    /// the small model alone.
    pub no_worse_than_small: usize,
}

/// One row per k, averaged over training seeds, in sweep order.
pub fn summarize(cells: &[SummaryCell]) -> Vec<ReportRow> {
    let mut ks: Vec<usize> = Vec::new();
    for c in cells {
        if !ks.contains(&c.k) {
            ks.push(c.k);
        }
    }
    ks.iter()
        .map(|&k| {
            let these: Vec<&SummaryCell> = cells.iter().filter(|c| c.k == k).collect();
            let n = these.len() as f64;
            let mean = |f: &dyn Fn(&SummaryCell) -> f64| these.iter().map(|c| f(c)).sum::<f64>() / n;
            let no_worse = these
                .iter()
                .filter(|c| {
                    cells
                        .iter()
                        .find(|s| s.k == 0 && s.training_seed == c.training_seed)
                        .is_some_and(|s| c.sliced_wasserstein <= s.sliced_wasserstein)
                })
                .count();
            ReportRow {
                method: these[0].method.clone(),
                k,
                training_seeds: these.len(),
                sliced_wasserstein: mean(&|c| c.sliced_wasserstein),
                mode_agreement: mean(&|c| c.mode_agreement),
                condition_accuracy: mean(&|c| c.condition_accuracy),
                params: mean(&|c| c.params as f64),
                flops: mean(&|c| c.flops),
                no_worse_than_small: no_worse,
            }
        })
        .collect()
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>4} {:>10} {:>10} {:>10} {:>10} {:>14} {:>10}",
        "method", "k", "SW", "agreement", "accuracy", "params", "FLOPs/sample", "<= small"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>4} {:>10.4} {:>10.4} {:>10.4} {:>10.0} {:>14.0} {:>7}/{}",
            r.method,
            r.k,
            r.sliced_wasserstein,
            r.mode_agreement,
            r.condition_accuracy,
            r.params,
            r.flops,
            r.no_worse_than_small,
            r.training_seeds
        );
    }
    s
}
