//! Tables and plots derived purely from stored results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::results::{read_training_losses, Index, RunSummary, TRAINING_FILE};
use crate::svg::{bar_chart, line_chart, BarGroup, Series};

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }

    fn cell(&self, digits: usize) -> String {
        if self.n > 1 {
            format!("{:.digits$} ± {:.digits$}", self.mean, self.std)
        } else {
            format!("{:.digits$}", self.mean)
        }
    }
}

/// Columns of the summary table: name, decimals, extractor.
type Column = (&'static str, usize, fn(&RunSummary) -> Option<f64>);

const COLUMNS: &[Column] = &[
    ("Avg Acc", 2, |r| Some(r.report.avg_acc)),
    ("F", 2, |r| Some(r.report.forgetting)),
    ("F_r", 2, |r| r.report.feature_retention),
    ("SS-NLL", 3, |r| r.report.ss_nll),
    ("SS-Acc", 2, |r| r.report.ss_acc),
    ("ECE", 3, |r| Some(r.report.ece)),
    ("Norm gap", 3, |r| r.report.weight_norm_gap),
];

/// Runs sharing a variant (and snapshot epoch), in first-seen order.
#[derive(Debug, Clone)]
pub struct Group<'a> {
    pub name: String,
    pub runs: Vec<&'a RunSummary>,
}

pub fn group_runs(index: &Index) -> Vec<Group<'_>> {
    let mut groups: Vec<(String, Option<usize>, Group)> = Vec::new();
    for r in &index.runs {
        match groups.iter_mut().find(|(v, e, _)| *v == r.variant && *e == r.snapshot_epoch) {
            Some((_, _, g)) => g.runs.push(r),
            None => {
                let name = match r.snapshot_epoch {
                    Some(e) => format!("{} @ epoch {e}", r.label),
                    None => r.label.clone(),
                };
                groups.push((r.variant.clone(), r.snapshot_epoch, Group { name, runs: vec![r] }));
            }
        }
    }
    groups.into_iter().map(|(_, _, g)| g).collect()
}

/// Per-group statistics of every column.
pub fn column_stats(group: &Group) -> Vec<Option<Stat>> {
    COLUMNS
        .iter()
        .map(|(_, _, get)| {
            let values: Vec<f64> = group.runs.iter().filter_map(|r| get(r)).collect();
            Stat::of(&values)
        })
        .collect()
}

pub fn markdown_table(index: &Index) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "## {}\n", index.recipe);
    let _ = write!(out, "| Method | Seeds |");
    for (name, _, _) in COLUMNS {
        let _ = write!(out, " {name} |");
    }
    let _ = write!(out, "\n|---|---|");
    for _ in COLUMNS {
        out.push_str("---|");
    }
    out.push('\n');
    for g in group_runs(index) {
        let _ = write!(out, "| {} | {} |", g.name, g.runs.len());
        for ((_, digits, _), stat) in COLUMNS.iter().zip(column_stats(&g)) {
            let _ = write!(out, " {} |", stat.map(|s| s.cell(*digits)).unwrap_or_else(|| "n/a".into()));
        }
        out.push('\n');
    }
    out
}

pub fn csv_table(index: &Index) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string(), "seeds".to_string()];
    for (name, _, _) in COLUMNS {
        header.push(format!("{name} mean"));
        header.push(format!("{name} std"));
    }
    w.write_record(&header).map_err(|e| HarnessError::format("<csv>", e))?;
    for g in group_runs(index) {
        let mut row = vec![g.name.clone(), g.runs.len().to_string()];
        for stat in column_stats(&g) {
            match stat {
                Some(s) => {
                    row.push(s.mean.to_string());
                    row.push(s.std.to_string());
                }
                None => row.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&row).map_err(|e| HarnessError::format("<csv>", e))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::format("<csv>", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Mean overall accuracy per step of each group.
pub fn accuracy_series(index: &Index) -> Vec<Series> {
    group_runs(index)
        .into_iter()
        .map(|g| {
            let steps = g.runs.iter().map(|r| r.overall_accuracy.len()).min().unwrap_or(0);
            let points = (0..steps)
                .map(|s| {
                    let v: Vec<f64> = g.runs.iter().map(|r| r.overall_accuracy[s]).collect();
                    (s as f64, Stat::of(&v).map_or(f64::NAN, |st| st.mean))
                })
                .collect();
            Series { name: g.name, points }
        })
        .collect()
}

/// Mean old- and new-class weight norms at the final step of each group.
pub fn weight_norm_groups(index: &Index) -> Vec<BarGroup> {
    group_runs(index)
        .into_iter()
        .map(|g| {
            let mean = |f: fn(&RunSummary) -> Option<f64>| {
                let v: Vec<f64> = g.runs.iter().filter_map(|r| f(r)).collect();
                Stat::of(&v).map(|s| s.mean)
            };
            BarGroup {
                name: g.name.clone(),
                values: vec![mean(|r| r.weight_norm_old), mean(|r| r.weight_norm_new)],
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct Rendered {
    pub files: Vec<PathBuf>,
    /// Problems that did not stop the render, such as missing run files.
    pub warnings: Vec<String>,
}

/// Renders `summary.md`, `summary.csv` and the SVG plots of one recipe
/// directory into `out` (default: the recipe directory itself).
pub fn render(results_dir: &Path, out: Option<&Path>) -> Result<Rendered> {
    let index = Index::load(results_dir)?;
    if index.runs.is_empty() {
        return Err(HarnessError::format(results_dir, "index lists no runs"));
    }
    let out = out.unwrap_or(results_dir);
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let mut rendered = Rendered::default();
    let mut emit = |name: &str, text: String| -> Result<()> {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
        rendered.files.push(path);
        Ok(())
    };
    emit("summary.md", markdown_table(&index))?;
    emit("summary.csv", csv_table(&index)?)?;
    emit(
        "accuracy.svg",
        line_chart(
            &format!("{}: accuracy on seen classes", index.recipe),
            "incremental step",
            "accuracy (%)",
            &accuracy_series(&index),
        ),
    )?;
    let norms = weight_norm_groups(&index);
    if norms.iter().any(|g| g.values.iter().any(Option::is_some)) {
        emit(
            "weight_norms.svg",
            bar_chart(
                &format!("{}: classifier weight norms", index.recipe),
                "mean L2 norm",
                &["old classes", "new classes"],
                &norms,
            ),
        )?;
    }
    let mut losses = Vec::new();
    for g in group_runs(&index) {
        let run = g.runs[0];
        let path = results_dir.join(&run.dir).join(TRAINING_FILE);
        match read_training_losses(&path) {
            Ok(rows) => losses.push(Series {
                name: g.name.clone(),
                points: rows.iter().enumerate().map(|(i, (_, _, l))| (i as f64, *l)).collect(),
            }),
            Err(e) => rendered.warnings.push(format!("skipping loss curve of {}: {e}", g.name)),
        }
    }
    if !losses.is_empty() {
        emit(
            "loss.svg",
            line_chart(
                &format!("{}: training loss (first seed)", index.recipe),
                "epoch (all stages)",
                "loss",
                &losses,
            ),
        )?;
    }
    Ok(rendered)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stat::of(&[7.0]).unwrap().cell(1), "7.0");
        assert_eq!(s.cell(1), "2.5 ± 1.3");
        assert!(Stat::of(&[]).is_none());
    }
}
