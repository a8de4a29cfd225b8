//! Comparison tables across fusion methods: one row per method, one column
//! per evaluation set, plus Avg OOD and its signed delta against a baseline
//! row.

use serde::{Deserialize, Serialize};

use crate::bench::EvalResult;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ReportError {
    #[error("report needs at least one row")]
    Empty,
    #[error("row {label:?} has shift suite {got:?}, expected {expected:?}")]
    ShiftMismatch {
        label: String,
        expected: Vec<String>,
        got: Vec<String>,
    },
    #[error("duplicate row label {0:?}")]
    DuplicateLabel(String),
    #[error("baseline row {0:?} not found")]
    UnknownBaseline(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    /// Accuracies in column order (clean first, then each shift).
    pub values: Vec<f64>,
    pub avg_ood: Option<f64>,
    /// `avg_ood - baseline.avg_ood`.
    pub delta_avg_ood: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub baseline: String,
    pub rows: Vec<TableRow>,
}

impl ReportTable {
    /// Builds the table. The baseline defaults to the first row.
    pub fn new(rows: Vec<(String, EvalResult)>, baseline: Option<&str>) -> Result<Self, ReportError> {
        let (_, first) = rows.first().ok_or(ReportError::Empty)?;
        let shift_ids: Vec<String> = first.shifts.iter().map(|s| s.id.clone()).collect();
        let mut columns = vec!["clean".to_string()];
        columns.extend(shift_ids.iter().cloned());

        let mut out: Vec<TableRow> = Vec::new();
        for (label, r) in &rows {
            let got: Vec<String> = r.shifts.iter().map(|s| s.id.clone()).collect();
            if got != shift_ids {
                return Err(ReportError::ShiftMismatch {
                    label: label.clone(),
                    expected: shift_ids,
                    got,
                });
            }
            if out.iter().any(|o| &o.label == label) {
                return Err(ReportError::DuplicateLabel(label.clone()));
            }
            let mut values = vec![r.clean];
            values.extend(r.shifts.iter().map(|s| s.accuracy));
            // recomputed rather than trusted from the input file
            let avg_ood = EvalResult::new(None, r.clean, r.shifts.clone()).avg_ood;
            out.push(TableRow {
                label: label.clone(),
                values,
                avg_ood,
                delta_avg_ood: None,
            });
        }
        let baseline = baseline.unwrap_or(&out[0].label).to_string();
        let base = out
            .iter()
            .find(|r| r.label == baseline)
            .ok_or_else(|| ReportError::UnknownBaseline(baseline.clone()))?
            .avg_ood;
        for row in &mut out {
            row.delta_avg_ood = match (row.avg_ood, base) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
        }
        Ok(Self {
            columns,
            baseline,
            rows: out,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Markdown table in percent with two decimals. Per column the best
    /// value is bold (`**`) and the second-best italic (`*`); ties share a
    /// mark.
    pub fn to_markdown(&self) -> String {
        let ncols = self.columns.len() + 1;
        let column = |j: usize| -> Vec<Option<f64>> {
            self.rows
                .iter()
                .map(|r| if j < self.columns.len() { Some(r.values[j]) } else { r.avg_ood })
                .collect()
        };
        let mut cells: Vec<Vec<String>> = vec![Vec::new(); self.rows.len()];
        for j in 0..ncols {
            let col = column(j);
            let (best, second) = top_two(&col);
            for (i, v) in col.iter().enumerate() {
                cells[i].push(match v {
                    None => "n/a".to_string(),
                    Some(v) => {
                        let s = pct(*v);
                        if Some(*v) == best {
                            format!("**{s}**")
                        } else if Some(*v) == second {
                            format!("*{s}*")
                        } else {
                            s
                        }
                    }
                });
            }
        }

        let mut header = vec!["Method".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("Avg OOD".into());
        header.push(format!("Δ Avg OOD vs {}", self.baseline));
        let mut out = String::new();
        out.push_str(&format!("| {} |\n", header.join(" | ")));
        out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
        for (row, c) in self.rows.iter().zip(cells) {
            let delta = match row.delta_avg_ood {
                Some(d) => format!("{:+.2}", d * 100.0),
                None => "n/a".into(),
            };
            out.push_str(&format!("| {} | {} | {} |\n", row.label, c.join(" | "), delta));
        }
        out
    }
}

pub fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn top_two(col: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let mut vals: Vec<f64> = col.iter().flatten().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals.dedup();
    (vals.first().copied(), vals.get(1).copied())
}
