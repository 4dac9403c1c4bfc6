//! Markdown summary of result files: one row per method, one column per task.

use std::fs;
use std::path::Path;

use crate::commands::{read_results_csv, ResultRow};
use crate::CliError;

pub const REPORT_FILE: &str = "report.md";

/// Sample mean and, with two or more values, sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, Some((ss / (n - 1.0)).sqrt()))
}

pub fn format_cell(values: &[f64]) -> String {
    match mean_std(values) {
        (m, Some(s)) => format!("{m:.2} ±{s:.2}"),
        (m, None) => format!("{m:.2}"),
    }
}

fn push_unique(list: &mut Vec<String>, item: &str) {
    if !list.iter().any(|x| x == item) {
        list.push(item.to_string());
    }
}

/// Render rows as a markdown table. Methods and tasks keep first-seen order.
pub fn render(rows: &[ResultRow]) -> String {
    let mut methods = Vec::new();
    let mut tasks = Vec::new();
    for r in rows {
        push_unique(&mut methods, &r.method);
        push_unique(&mut tasks, &r.task);
    }
    let mut out = String::from("| Method |");
    for t in &tasks {
        out.push_str(&format!(" {t} |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(tasks.len()));
    out.push('\n');
    for m in &methods {
        out.push_str(&format!("| {m} |"));
        for t in &tasks {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| &r.method == m && &r.task == t)
                .filter_map(ResultRow::headline)
                .collect();
            let cell = if values.is_empty() { "-".to_string() } else { format_cell(&values) };
            out.push_str(&format!(" {cell} |"));
        }
        out.push('\n');
    }
    out.push_str("\nAccuracy in %, detection tasks as AUPR x 100; mean ±std over seeds.\n");
    out
}

/// Collect every `results*.csv` in `dir` (sorted by name), render, and write `report.md`.
pub fn cmd_report(dir: &Path) -> Result<String, CliError> {
    let mut files: Vec<_> = match fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                name.starts_with("results") && name.ends_with(".csv")
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_results_csv(f)?);
    }
    if rows.is_empty() {
        return Err(CliError::EmptyReport(dir.to_path_buf()));
    }
    let text = render(&rows);
    fs::write(dir.join(REPORT_FILE), &text)?;
    Ok(text)
}
