use std::path::{Path, PathBuf};

use log::warn;

use super::run::SummaryReport;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub source: PathBuf,
    pub summary: SummaryReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub warnings: Vec<String>,
}

fn nan_or(v: Option<f64>, prec: usize) -> String {
    match v {
        Some(x) => format!("{x:.prec$}"),
        None => "NaN".to_string(),
    }
}

impl Comparison {
    const COLUMNS: [&'static str; 8] = [
        "run",
        "mode",
        "seed",
        "final_accuracy",
        "rounds_to_target",
        "seconds_to_target",
        "mflops_initial",
        "mflops_final",
    ];

    fn cells(row: &ComparisonRow) -> [String; 8] {
        let s = &row.summary;
        [
            row.source.display().to_string(),
            s.mode.name().to_string(),
            s.seed.to_string(),
            format!("{:.4}", s.final_test_accuracy),
            nan_or(s.rounds_to_target, 0),
            nan_or(s.seconds_to_target, 4),
            format!("{:.6}", s.initial_mflops),
            format!("{:.6}", s.final_mflops),
        ]
    }

    /// Space-aligned table.
    pub fn to_text(&self) -> String {
        let rows: Vec<[String; 8]> = self.rows.iter().map(Self::cells).collect();
        let mut widths = Self::COLUMNS.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let header: Vec<String> = Self::COLUMNS.iter().map(|s| s.to_string()).collect();
        let mut out = line(&header);
        out.push('\n');
        for r in &rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&Self::cells(r).join(","));
            out.push('\n');
        }
        out
    }
}

fn summary_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("summary.json")
    } else {
        p.to_path_buf()
    }
}

/// Aligns the summaries of several runs (files or run directories).
pub fn compare_report(paths: &[PathBuf]) -> Result<Comparison> {
    if paths.len() < 2 {
        return Err(Error::InvalidArgument(
            "compare needs at least two summaries".into(),
        ));
    }
    let mut rows = Vec::with_capacity(paths.len());
    for p in paths {
        let file = summary_path(p);
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let summary: SummaryReport = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", file.display())))?;
        rows.push(ComparisonRow {
            source: p.clone(),
            summary,
        });
    }
    let mut warnings = Vec::new();
    let first = &rows[0].summary.dataset_digest;
    for r in &rows[1..] {
        if &r.summary.dataset_digest != first {
            let msg = format!(
                "{} was trained on a different dataset than {}",
                r.source.display(),
                rows[0].source.display()
            );
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(Comparison { rows, warnings })
}
