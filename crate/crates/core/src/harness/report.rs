//! CSV emitters for per-epoch metrics and per-scheme results. Schemas
//! are frozen; the version rides in a leading comment line.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::mueval::SumRateReport;
use crate::training::MetricsRecord;

pub const METRICS_SCHEMA: &str = "# schema: csilab.metrics.v1";
pub const METRICS_HEADER: &str = "epoch,stage,loss_mse,loss_nar,val_sum_rate,seconds";
pub const RESULTS_SCHEMA: &str = "# schema: csilab.results.v1";
pub const RESULTS_HEADER: &str = "scheme,B_bits,N_p,N_R,sorting,mean_rate,stderr,scenes";

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::new();
    out.push_str(METRICS_SCHEMA);
    out.push('\n');
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            r.epoch, r.stage, r.loss_mse, r.loss_nar, r.val_sum_rate, r.seconds
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One results row; sweep context (the axis point) travels in the
/// N_p/N_R/sorting columns.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub scheme: String,
    pub b_bits: usize,
    pub n_p: usize,
    pub n_r: usize,
    pub sorting: String,
    pub mean_rate: f64,
    pub stderr: f64,
    pub scenes: usize,
}

impl ResultRow {
    pub fn from_report(
        report: &SumRateReport,
        n_p: usize,
        n_r: usize,
        sorting: &str,
    ) -> ResultRow {
        ResultRow {
            scheme: report.scheme.clone(),
            b_bits: report.feedback_bits,
            n_p,
            n_r,
            sorting: sorting.to_string(),
            mean_rate: report.mean,
            stderr: report.stderr,
            scenes: report.per_scene.len(),
        }
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}\n",
            self.scheme,
            self.b_bits,
            self.n_p,
            self.n_r,
            self.sorting,
            self.mean_rate,
            self.stderr,
            self.scenes
        )
    }
}

/// Appends rows, creating the file with its schema header on first use.
pub fn append_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(file, "{RESULTS_SCHEMA}")?;
        writeln!(file, "{RESULTS_HEADER}")?;
    }
    for row in rows {
        file.write_all(row.csv_line().as_bytes())?;
    }
    Ok(())
}

/// Plain-text table of rows ordered by mean rate, best first.
pub fn summary_table(rows: &[ResultRow]) -> String {
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        b.mean_rate
            .partial_cmp(&a.mean_rate)
            .expect("finite rates")
            .then(a.scheme.cmp(&b.scheme))
    });
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>7} {:>5} {:>4} {:<13} {:>12} {:>10} {:>7}\n",
        "scheme", "B_bits", "N_p", "N_R", "sorting", "mean_rate", "stderr", "scenes"
    ));
    for r in sorted {
        out.push_str(&format!(
            "{:<16} {:>7} {:>5} {:>4} {:<13} {:>12.4} {:>10.4} {:>7}\n",
            r.scheme, r.b_bits, r.n_p, r.n_r, r.sorting, r.mean_rate, r.stderr, r.scenes
        ));
    }
    out
}
