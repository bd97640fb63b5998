//! Dialogs, schemas, tokenization, the state serialization format and the
//! corpora used for pretraining and continual learning.

pub mod corpus;
pub mod lexicon;
mod serialize;
pub mod synthetic;
mod tokenizer;


use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{load_sgd_format, write_sgd_format};
pub use serialize::{parse_state, serialize_input, serialize_input_text, serialize_state, ParseFailure};
pub use synthetic::{generate_synthetic_tasks, pretraining_corpus, Catalog, PretrainCorpusConfig, SyntheticSpec};
pub use tokenizer::{
    is_separator, separator, separator_index, Tokenizer, BOS, BOS_ID, EOS, EOS_ID, NONE, PAD, PAD_ID, UNK, UNK_ID,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("turn {k} out of range for a dialog with {turns} turns")]
    TurnOutOfRange { k: usize, turns: usize },
    #[error("value {value:?} for slot {slot:?} contains a separator token")]
    SeparatorInValue { slot: String, value: String },
    #[error("value for slot {slot:?} is empty")]
    EmptyValue { slot: String },
    #[error("state does not match schema {task}: {detail}")]
    SchemaMismatch { task: String, detail: String },
    #[error("duplicate slot {slot:?} in schema {task}")]
    DuplicateSlot { task: String, slot: String },
    #[error("unknown slot {slot:?} in a state of task {task}")]
    UnknownSlot { task: String, slot: String },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("template {0:?} also appears in the pretraining corpus")]
    TemplateOverlap(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("{path}:{line}: {detail}")]
    Malformed { path: String, line: usize, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchema {
    pub task_id: String,
    slots: Vec<String>,
}

impl TaskSchema {
    pub fn new(task_id: impl Into<String>, slots: Vec<String>) -> Result<Self, DataError> {
        let task_id = task_id.into();
        let mut seen = HashSet::new();
        for s in &slots {
            if !seen.insert(s.as_str()) {
                return Err(DataError::DuplicateSlot {
                    task: task_id,
                    slot: s.clone(),
                });
            }
        }
        Ok(Self { task_id, slots })
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    pub fn empty_state(&self) -> DialogState {
        DialogState {
            task_id: self.task_id.clone(),
            values: self.slots.iter().map(|s| (s.clone(), NONE.to_string())).collect(),
        }
    }
}

/// Slot values in schema order; unfilled slots hold `"none"`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogState {
    pub task_id: String,
    pub values: Vec<(String, String)>,
}

impl DialogState {
    pub fn get(&self, slot: &str) -> Option<&str> {
        self.values.iter().find(|(s, _)| s == slot).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, slot: &str, value: &str) -> bool {
        match self.values.iter_mut().find(|(s, _)| s == slot) {
            Some(entry) => {
                entry.1 = value.to_string();
                true
            }
            None => false,
        }
    }

    /// Slot/value equality ignoring slot order, with whitespace-normalized values.
    pub fn same_values(&self, other: &DialogState) -> bool {
        let norm = |s: &DialogState| -> HashSet<(String, String)> {
            s.values
                .iter()
                .map(|(k, v)| (k.clone(), v.split_whitespace().collect::<Vec<_>>().join(" ")))
                .collect()
        };
        self.values.len() == other.values.len() && norm(self) == norm(other)
    }

    /// Full match: task identity and every slot value.
    pub fn matches(&self, other: &DialogState) -> bool {
        self.task_id == other.task_id && self.same_values(other)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    pub system: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub task_id: String,
    pub turns: Vec<Turn>,
    pub states: Vec<DialogState>,
}

/// One task with its train/validation/test dialogs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub schema: TaskSchema,
    pub train: Vec<Dialog>,
    pub val: Vec<Dialog>,
    pub test: Vec<Dialog>,
}

impl Task {
    pub fn dialog_count(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Splits `n` dialogs 7:1:2, rounding train and validation to nearest.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.7).round() as usize;
    let val = ((n as f64 * 0.1).round() as usize).min(n - train);
    (train, val, n - train - val)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaRegistry {
    schemas: Vec<TaskSchema>,
}

impl SchemaRegistry {
    pub fn new(schemas: Vec<TaskSchema>) -> Self {
        Self { schemas }
    }

    pub fn from_tasks(tasks: &[Task]) -> Self {
        Self::new(tasks.iter().map(|t| t.schema.clone()).collect())
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskSchema> {
        self.schemas.iter().find(|s| s.task_id == task_id)
    }

    pub fn schemas(&self) -> &[TaskSchema] {
        &self.schemas
    }
}

/// A single turn ready for the model: history tokens, target state tokens
/// and the gold state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnSample {
    pub task: usize,
    pub dialog: usize,
    pub turn: usize,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub state: DialogState,
}

/// Expands dialogs into per-turn samples, in dialog then turn order.
pub fn turn_samples(
    dialogs: &[Dialog],
    schema: &TaskSchema,
    task: usize,
    tokenizer: &Tokenizer,
) -> Result<Vec<TurnSample>, DataError> {
    let mut out = Vec::new();
    for (d, dialog) in dialogs.iter().enumerate() {
        for k in 1..=dialog.turns.len() {
            let state = dialog.states[k - 1].clone();
            out.push(TurnSample {
                task,
                dialog: d,
                turn: k,
                input: serialize_input(dialog, k, tokenizer)?,
                target: serialize_state(&state, schema, tokenizer)?,
                state,
            });
        }
    }
    Ok(out)
}
