//! Plain-text result tables.

use std::fmt::Write as _;

use mtgan::EvalReport;

/// One row of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub condition: String,
    pub eer: f64,
    pub accuracy: f64,
    pub epochs: usize,
}

impl ReportRow {
    pub fn new(condition: impl Into<String>, report: &EvalReport, epochs: usize) -> Self {
        Self {
            condition: condition.into(),
            eer: report.eer,
            accuracy: report.accuracy,
            epochs,
        }
    }
}

/// Fixed-width table with `Conditions | EER | ACC | Epochs` columns.
pub fn print_report(rows: &[ReportRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.condition.chars().count())
        .chain(std::iter::once("Conditions".len()))
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>6}", "Conditions", "EER", "ACC", "Epochs");
    let _ = writeln!(out, "{}", "-".repeat(width + 30));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.2}%  {:>7.2}%  {:>6}",
            r.condition,
            100.0 * r.eer,
            100.0 * r.accuracy,
            r.epochs
        );
    }
    out
}

/// Row label for a dropped module.
pub fn condition_label(module: &str) -> String {
    match module {
        "gan" => "w/o GAN".into(),
        "softmax" => "w/o softmax loss".into(),
        "triplet" => "w/o triplet loss".into(),
        other => format!("w/o {other}"),
    }
}
