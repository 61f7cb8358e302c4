//! Report emission: JSON (full precision), CSV, and a text table whose
//! accuracy/fluctuation cells use the `"82.15 / 4.98"` percentage style.
//!
//! All renderers are deterministic functions of the report value — no
//! timestamps, hostnames, or map iteration order leaks — so identical runs
//! emit identical bytes.

use std::fs;
use std::io;
use std::path::Path;

use crate::metrics::EvaluationReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Table,
}

impl ReportFormat {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "json" => Some(ReportFormat::Json),
            "csv" => Some(ReportFormat::Csv),
            "table" => Some(ReportFormat::Table),
            _ => None,
        }
    }
}

/// `"82.15 / 4.98"`: mean accuracy and fluctuation rate as percentages
/// with two decimals.
pub fn acc_fluct_cell(acc: f64, fluctuation: f64) -> String {
    format!("{:.2} / {:.2}", acc * 100.0, fluctuation * 100.0)
}

/// `"(+2.27)"` / `"(-0.50)"`: a signed percentage-point delta.
pub fn delta_cell(delta: f64) -> String {
    format!("({:+.2})", delta * 100.0)
}

pub fn render_json(report: &EvaluationReport) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}

pub fn render_csv(report: &EvaluationReport) -> String {
    let mut out = String::from(
        "setting,n,acc_forward,acc_backward,acc_mean,fluctuation_rate,invalid_count,method,method_accuracy,delta\n",
    );
    let (method, method_accuracy, delta) = match &report.method {
        Some(m) => (m.name.as_str(), m.accuracy.to_string(), m.delta.to_string()),
        None => ("", String::new(), String::new()),
    };
    out.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{}\n",
        report.setting,
        report.n,
        report.acc_forward,
        report.acc_backward,
        report.acc_mean,
        report.fluctuation_rate,
        report.invalid_count,
        method,
        method_accuracy,
        delta,
    ));
    out
}

pub fn render_table(report: &EvaluationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "setting: {}    n: {}{}\n",
        report.setting,
        report.n,
        if report.incomplete == Some(true) {
            "    [incomplete]"
        } else {
            ""
        }
    ));
    out.push_str(&format!(
        "Acc / Fluct: {}\n",
        acc_fluct_cell(report.acc_mean, report.fluctuation_rate)
    ));
    out.push_str(&format!(
        "acc_forward: {:.2}    acc_backward: {:.2}    invalid: {}\n",
        report.acc_forward * 100.0,
        report.acc_backward * 100.0,
        report.invalid_count
    ));
    if !report.proportions_forward.is_empty() {
        let cells: Vec<String> = report
            .proportions_forward
            .iter()
            .map(|(symbol, share)| format!("{symbol} {:.2}", share * 100.0))
            .collect();
        out.push_str(&format!("proportions(forward): {}\n", cells.join("  ")));
    }
    if let Some(method) = &report.method {
        out.push_str(&format!(
            "method {}: {:.2} {}\n",
            method.name,
            method.accuracy * 100.0,
            delta_cell(method.delta)
        ));
        if let Some(backward) = method.accuracy_backward_calibrated {
            out.push_str(&format!("method {} (backward): {:.2}\n", method.name, backward * 100.0));
        }
    }
    out
}

pub fn render(report: &EvaluationReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => render_json(report),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Table => render_table(report),
    }
}

/// Renders and writes the report file.
pub fn emit_report(
    report: &EvaluationReport,
    format: ReportFormat,
    path: &Path,
) -> io::Result<()> {
    fs::write(path, render(report, format))
}
