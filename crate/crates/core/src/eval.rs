//! Joint goal accuracy, its task average, the forgetting index and key
//! selection accuracy, plus the report files built from them.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DialogState, ParseFailure};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{predicted} predictions for {gold} gold states")]
    LengthMismatch { predicted: usize, gold: usize },
    #[error("cell a[{row}][{col}] is undefined")]
    MissingCell { row: usize, col: usize },
    #[error("cell a[{row}][{col}] lies above the diagonal")]
    AboveDiagonal { row: usize, col: usize },
    #[error("accuracy {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("matrix has no rows")]
    Empty,
    #[error("selection log entry {entry}: {detail}")]
    MalformedLog { entry: usize, detail: String },
}

/// `a[j][i]`: JGA on task `i` after training through task `j`, for `i ≤ j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            rows: (0..tasks).map(|j| vec![None; j + 1]).collect(),
        }
    }

    /// Builds a matrix from complete lower-triangular rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EvalError> {
        let mut m = Self::new(rows.len());
        for (j, row) in rows.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                m.set(j, i, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) -> Result<(), EvalError> {
        if col > row || row >= self.rows.len() {
            return Err(EvalError::AboveDiagonal { row, col });
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(EvalError::OutOfRange(value));
        }
        self.rows[row][col] = Some(value);
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.rows.get(row)?.get(col).copied().flatten()
    }

    fn cell(&self, row: usize, col: usize) -> Result<f64, EvalError> {
        self.get(row, col).ok_or(EvalError::MissingCell { row, col })
    }

    pub fn final_row(&self) -> Result<Vec<f64>, EvalError> {
        let last = self.rows.len().checked_sub(1).ok_or(EvalError::Empty)?;
        (0..=last).map(|i| self.cell(last, i)).collect()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }
}

/// A decoded state or the reason decoding could not be parsed.
pub type Prediction = Result<DialogState, ParseFailure>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JgaReport {
    pub turns: usize,
    /// Full-state match including the task identity.
    pub jga: f64,
    /// Slot values only, ignoring the task identity field.
    pub values_only: f64,
    pub parse_failures: usize,
}

pub fn jga(predicted: &[Prediction], gold: &[DialogState]) -> Result<JgaReport, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            gold: gold.len(),
        });
    }
    let mut full = 0usize;
    let mut values = 0usize;
    let mut failures = 0usize;
    for (p, g) in predicted.iter().zip(gold) {
        match p {
            Ok(state) => {
                full += state.matches(g) as usize;
                values += state.same_values(g) as usize;
            }
            Err(_) => failures += 1,
        }
    }
    let n = gold.len().max(1) as f64;
    Ok(JgaReport {
        turns: gold.len(),
        jga: full as f64 / n,
        values_only: values as f64 / n,
        parse_failures: failures,
    })
}

/// Mean of the final row.
pub fn jga_avg(matrix: &AccuracyMatrix) -> Result<f64, EvalError> {
    let row = matrix.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// `max_{j ∈ [i, t]} a[j][i] − a[t][i]`.
pub fn forgetting(matrix: &AccuracyMatrix, t: usize, i: usize) -> Result<f64, EvalError> {
    if i > t {
        return Err(EvalError::AboveDiagonal { row: t, col: i });
    }
    let current = matrix.cell(t, i)?;
    let mut peak = current;
    for j in i..=t {
        peak = peak.max(matrix.cell(j, i)?);
    }
    Ok(peak - current)
}

/// Pool indices chosen for one test turn, with the turn's true task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionLogEntry {
    pub task: usize,
    pub dialog: usize,
    pub turn: usize,
    pub selected: Vec<usize>,
}

/// Fraction of turns whose selected set is exactly the true task's block.
pub fn acc_key(logs: &[SelectionLogEntry], per_task: usize) -> Result<f64, EvalError> {
    if logs.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (e, entry) in logs.iter().enumerate() {
        let set: HashSet<usize> = entry.selected.iter().copied().collect();
        if entry.selected.len() != per_task || set.len() != per_task {
            return Err(EvalError::MalformedLog {
                entry: e,
                detail: format!("expected {per_task} distinct indices, got {:?}", entry.selected),
            });
        }
        let block: HashSet<usize> = (per_task * entry.task..per_task * (entry.task + 1)).collect();
        correct += (set == block) as usize;
    }
    Ok(correct as f64 / logs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: String,
    pub final_jga: f64,
    pub final_values_only_jga: f64,
    pub parse_failures: usize,
    pub test_turns: usize,
    /// `f_{t,i}` for `t = i..T-1`.
    pub forgetting: Vec<f64>,
    pub acc_key: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub jga_avg: f64,
    pub acc_key: Option<f64>,
    pub tasks: Vec<TaskMetrics>,
    pub accuracy: AccuracyMatrix,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl MetricsReport {
    /// Assembles the report from the accuracy matrix, the final evaluation's
    /// per-task JGA reports and (for pool methods) its selection log.
    pub fn build(
        method: &str,
        seed: u64,
        task_ids: &[String],
        accuracy: &AccuracyMatrix,
        final_reports: &[JgaReport],
        final_log: Option<(&[SelectionLogEntry], usize)>,
        metadata: serde_json::Value,
    ) -> Result<Self, EvalError> {
        let t = accuracy.tasks();
        let final_row = accuracy.final_row()?;
        let mut tasks = Vec::with_capacity(t);
        for (i, id) in task_ids.iter().enumerate().take(t) {
            let forgetting = (i..t)
                .map(|j| forgetting(accuracy, j, i))
                .collect::<Result<Vec<_>, _>>()
                .unwrap_or_default();
            let report = final_reports.get(i).copied().unwrap_or_default();
            let acc = match final_log {
                Some((log, n)) => {
                    let mine: Vec<SelectionLogEntry> = log.iter().filter(|e| e.task == i).cloned().collect();
                    Some(acc_key(&mine, n)?)
                }
                None => None,
            };
            tasks.push(TaskMetrics {
                task_id: id.clone(),
                final_jga: final_row[i],
                final_values_only_jga: report.values_only,
                parse_failures: report.parse_failures,
                test_turns: report.turns,
                forgetting,
                acc_key: acc,
            });
        }
        let acc_key = match final_log {
            Some((log, n)) => Some(acc_key(log, n)?),
            None => None,
        };
        Ok(Self {
            method: method.to_string(),
            seed,
            jga_avg: jga_avg(accuracy)?,
            acc_key,
            tasks,
            accuracy: accuracy.clone(),
            metadata,
        })
    }

    /// One row per task: `task_index,task_id,final_jga,values_only_jga,parse_failures,test_turns,final_forgetting,acc_key`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_index,task_id,final_jga,values_only_jga,parse_failures,test_turns,final_forgetting,acc_key\n");
        for (i, t) in self.tasks.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{:?},{:?},{},{},{:?},{}",
                t.task_id,
                t.final_jga,
                t.final_values_only_jga,
                t.parse_failures,
                t.test_turns,
                t.forgetting.last().copied().unwrap_or(0.0),
                t.acc_key.map(|a| format!("{a:?}")).unwrap_or_default()
            );
        }
        out
    }
}
