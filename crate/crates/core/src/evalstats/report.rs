//! Results table: one row per model, three column groups (dark humor,
//! target, intensity). Intensity carries a fourth Pearson column.
//!
//! ```text
//! TCRNet | 75.00 73.55 74.13 | 40.10 38.22 39.00 | 55.00 50.12 53.40 41.20
//! ```
//!
//! A missing group renders as `-`.

use serde::{Deserialize, Serialize};

use super::{MetricsReport, StatsError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub pearson: Option<f64>,
}

impl From<&MetricsReport> for TaskScores {
    fn from(m: &MetricsReport) -> Self {
        TaskScores {
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            weighted_f1: m.weighted_f1,
            pearson: m.pearson,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub model: String,
    pub dark_humor: Option<TaskScores>,
    pub target: Option<TaskScores>,
    pub intensity: Option<TaskScores>,
}

impl ResultsRow {
    pub fn new(model: impl Into<String>) -> Self {
        ResultsRow {
            model: model.into(),
            dark_humor: None,
            target: None,
            intensity: None,
        }
    }
}

fn group(scores: Option<&TaskScores>) -> String {
    match scores {
        None => "-".to_string(),
        Some(s) => {
            let mut out = format!("{:.2} {:.2} {:.2}", s.accuracy, s.macro_f1, s.weighted_f1);
            if let Some(p) = s.pearson {
                out.push_str(&format!(" {p:.2}"));
            }
            out
        }
    }
}

pub fn render_results_row(row: &ResultsRow) -> String {
    let mut parts = vec![row.model.clone()];
    parts.push(group(row.dark_humor.as_ref()));
    parts.push(group(row.target.as_ref()));
    parts.push(group(row.intensity.as_ref()));
    // drop trailing empty groups so a DH-only row reads "TCRNet | 75.00 73.55 74.13"
    while parts.len() > 2 && parts.last().is_some_and(|p| p == "-") {
        parts.pop();
    }
    parts.join(" | ")
}

pub fn render_results_table(rows: &[ResultsRow]) -> String {
    let mut out = String::from(
        "Model | DH Acc Macro-F1 Wt-F1 | Target Acc Macro-F1 Wt-F1 | Intensity Acc Macro-F1 Wt-F1 P-Corr\n",
    );
    for row in rows {
        out.push_str(&render_results_row(row));
        out.push('\n');
    }
    out
}

fn parse_group(text: &str) -> Result<Option<TaskScores>, StatsError> {
    let text = text.trim();
    if text == "-" {
        return Ok(None);
    }
    let values = text
        .split('/')
        .flat_map(str::split_whitespace)
        .map(|t| t.parse::<f64>().map_err(|e| StatsError::Parse(format!("`{t}`: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    match values.as_slice() {
        [a, m, w] => Ok(Some(TaskScores { accuracy: *a, macro_f1: *m, weighted_f1: *w, pearson: None })),
        [a, m, w, p] => Ok(Some(TaskScores { accuracy: *a, macro_f1: *m, weighted_f1: *w, pearson: Some(*p) })),
        _ => Err(StatsError::Parse(format!("expected 3 or 4 numbers, got `{text}`"))),
    }
}

/// Parses a rendered row. Groups may be separated by `|` and values within
/// a group by spaces or ` / `.
pub fn parse_results_row(line: &str) -> Result<ResultsRow, StatsError> {
    let mut parts = line.split('|');
    let model = parts.next().unwrap_or_default().trim();
    let groups: Vec<&str> = parts.collect();
    let (model, groups) = if groups.is_empty() {
        // "TCRNet 75.00 / 73.55 / 74.13": name is everything before the first number
        let idx = line
            .split_whitespace()
            .position(|t| t.parse::<f64>().is_ok())
            .ok_or_else(|| StatsError::Parse("no scores in row".into()))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        (tokens[..idx].join(" "), vec![tokens[idx..].join(" ")])
    } else {
        (model.to_string(), groups.into_iter().map(String::from).collect())
    };
    if model.is_empty() {
        return Err(StatsError::Parse("missing model name".into()));
    }
    if groups.len() > 3 {
        return Err(StatsError::Parse(format!("{} score groups", groups.len())));
    }
    let mut row = ResultsRow::new(model);
    let slots = [&mut row.dark_humor, &mut row.target, &mut row.intensity];
    for (slot, g) in slots.into_iter().zip(&groups) {
        *slot = parse_group(g)?;
    }
    Ok(row)
}
