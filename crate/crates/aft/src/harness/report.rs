//! CSV reporting for benchmark runs: one row per (mode, workload) pair.

use std::io::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::harness::oplog::count_anomalies;
use crate::harness::workload::{Mode, RunOutput, WorkloadSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub mode: Mode,
    pub clients: usize,
    pub hops: usize,
    pub zipf: f64,
    pub throughput_tps: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub ryw_anomalies: usize,
    pub fractured_reads: usize,
    pub retries: usize,
}

impl ReportRow {
    pub fn from_run(spec: &WorkloadSpec, out: &RunOutput) -> Result<ReportRow> {
        let (ryw, fr) = count_anomalies(&out.log)?;
        Ok(ReportRow {
            mode: spec.mode,
            clients: spec.clients,
            hops: spec.hops,
            zipf: spec.zipf,
            throughput_tps: out.metrics.throughput_tps(),
            p50_ms: out.metrics.p50_ms(),
            p99_ms: out.metrics.p99_ms(),
            ryw_anomalies: ryw,
            fractured_reads: fr,
            retries: out.metrics.retries,
        })
    }

    fn mode_label(&self) -> &'static str {
        match self.mode {
            Mode::Shim => "shim",
            Mode::Bypass => "bypass",
        }
    }
}

pub const CSV_HEADER: &str = "mode,clients,hops,zipf,throughput_tps,p50_ms,p99_ms,ryw,fr,retries";

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.2},{:.3},{:.3},{},{},{}\n",
            r.mode_label(),
            r.clients,
            r.hops,
            r.zipf,
            r.throughput_tps,
            r.p50_ms,
            r.p99_ms,
            r.ryw_anomalies,
            r.fractured_reads,
            r.retries,
        ));
    }
    out
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(render_csv(rows).as_bytes())?;
    f.flush()
}

/// One line per row for terminal output.
pub fn human_summary(rows: &[ReportRow]) -> String {
    rows.iter()
        .map(|r| {
            format!(
                "{:>6}: {:>8.1} txn/s  p50 {:>7.2}ms  p99 {:>7.2}ms  ryw {}  fractured {}  retries {}",
                r.mode_label(),
                r.throughput_tps,
                r.p50_ms,
                r.p99_ms,
                r.ryw_anomalies,
                r.fractured_reads,
                r.retries,
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mode: Mode) -> ReportRow {
        ReportRow {
            mode,
            clients: 10,
            hops: 2,
            zipf: 1.0,
            throughput_tps: 1234.5678,
            p50_ms: 1.25,
            p99_ms: 9.875,
            ryw_anomalies: 0,
            fractured_reads: 3,
            retries: 7,
        }
    }

    #[test]
    fn empty_report_is_just_the_header() {
        assert_eq!(render_csv(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn rows_render_in_order_with_fixed_precision() {
        let csv = render_csv(&[row(Mode::Shim), row(Mode::Bypass)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "shim,10,2,1,1234.57,1.250,9.875,0,3,7");
        assert!(lines[2].starts_with("bypass,"));
    }
}
