//! Per-iteration training metrics and their CSV serialization.
//!
//! One row per iteration, fixed column order, floats rendered as `{:.8e}`
//! and absent values spelled `nan`, so identical runs produce byte-identical
//! files. The `acc` column carries the full-dataset evaluation on the last
//! row of each epoch in offline runs; in streaming runs it carries every
//! chunk's first-sight accuracy (predictions taken before the update).

use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "iter,tau_c,tau_u,sel_frac,pl_acc,l_ce,l_prop,l_con,l_ent,l_total,mu_r,mu_c,acc";

/// Fixed-width scientific rendering; `nan` for unavailable values.
pub fn format_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.8e}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iter: u64,
    pub tau_c: f64,
    pub tau_u: f64,
    pub sel_frac: f64,
    pub pl_acc: f64,
    pub l_ce: f64,
    pub l_prop: f64,
    pub l_con: f64,
    pub l_ent: f64,
    pub l_total: f64,
    pub mu_r: f64,
    pub mu_c: f64,
    pub acc: f64,
    /// Pseudo-label precision within the reliable set. Diagnostic only,
    /// not serialized.
    pub dr_pl_acc: f64,
}

impl MetricsRecord {
    pub fn blank(iter: u64) -> MetricsRecord {
        MetricsRecord {
            iter,
            tau_c: f64::NAN,
            tau_u: f64::NAN,
            sel_frac: f64::NAN,
            pl_acc: f64::NAN,
            l_ce: f64::NAN,
            l_prop: f64::NAN,
            l_con: f64::NAN,
            l_ent: f64::NAN,
            l_total: f64::NAN,
            mu_r: f64::NAN,
            mu_c: f64::NAN,
            acc: f64::NAN,
            dr_pl_acc: f64::NAN,
        }
    }

    pub fn csv_line(&self) -> String {
        let cols = [
            self.tau_c,
            self.tau_u,
            self.sel_frac,
            self.pl_acc,
            self.l_ce,
            self.l_prop,
            self.l_con,
            self.l_ent,
            self.l_total,
            self.mu_r,
            self.mu_c,
            self.acc,
        ];
        let mut line = self.iter.to_string();
        for c in cols {
            line.push(',');
            line.push_str(&format_metric(c));
        }
        line
    }
}

/// Writes header plus one line per record.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut text = String::with_capacity(64 * (records.len() + 1));
    text.push_str(CSV_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}
