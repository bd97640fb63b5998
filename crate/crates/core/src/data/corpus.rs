//! Line-delimited JSON dialog corpus.
//!
//! A corpus directory holds two files:
//!
//! `schema.jsonl`, one task per line, slots in output order:
//!
//! ```text
//! {"task_id":"trains_1","slots":["city","date"]}
//! ```
//!
//! `dialogs.jsonl`, one single-service dialog per line:
//!
//! ```text
//! {"task_id":"trains_1","split":"train","turns":[{"user":"...","system":"...","state":{"city":"paris"}}]}
//! ```
//!
//! Each turn's `state` lists slot values known after that turn; slots absent
//! from it keep their earlier value (or `none`). `split` is optional; when no
//! dialog of a task carries one, the task's dialogs are split 7:1:2 in file
//! order. Task order follows `schema.jsonl`; tasks without dialogs are dropped.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{split_counts, DataError, Dialog, DialogState, Split, Task, TaskSchema, Turn, NONE};

pub const SCHEMA_FILE: &str = "schema.jsonl";
pub const DIALOGS_FILE: &str = "dialogs.jsonl";

#[derive(Serialize, Deserialize)]
struct SchemaRecord {
    task_id: String,
    slots: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    user: String,
    system: String,
    #[serde(default)]
    state: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct DialogRecord {
    task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    turns: Vec<TurnRecord>,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn parse_line<T: for<'de> Deserialize<'de>>(path: &Path, line: usize, text: &str) -> Result<T, DataError> {
    serde_json::from_str(text).map_err(|e| DataError::Malformed {
        path: path.display().to_string(),
        line,
        detail: e.to_string(),
    })
}

pub fn load_sgd_format(dir: &Path) -> Result<Vec<Task>, DataError> {
    let schema_path = dir.join(SCHEMA_FILE);
    let dialog_path = dir.join(DIALOGS_FILE);
    let mut schemas = Vec::new();
    for (line, text) in read_lines(&schema_path)? {
        let rec: SchemaRecord = parse_line(&schema_path, line, &text)?;
        if schemas.iter().any(|s: &TaskSchema| s.task_id == rec.task_id) {
            return Err(DataError::Malformed {
                path: schema_path.display().to_string(),
                line,
                detail: format!("duplicate task {}", rec.task_id),
            });
        }
        schemas.push(TaskSchema::new(rec.task_id, rec.slots)?);
    }

    let mut grouped: Vec<Vec<(Option<Split>, Dialog)>> = vec![Vec::new(); schemas.len()];
    for (line, text) in read_lines(&dialog_path)? {
        let rec: DialogRecord = parse_line(&dialog_path, line, &text)?;
        let t = schemas
            .iter()
            .position(|s| s.task_id == rec.task_id)
            .ok_or_else(|| DataError::UnknownTask(rec.task_id.clone()))?;
        if rec.turns.is_empty() {
            return Err(DataError::Malformed {
                path: dialog_path.display().to_string(),
                line,
                detail: "dialog has no turns".into(),
            });
        }
        let schema = &schemas[t];
        let mut state = schema.empty_state();
        let mut turns = Vec::with_capacity(rec.turns.len());
        let mut states = Vec::with_capacity(rec.turns.len());
        for turn in rec.turns {
            for (slot, value) in &turn.state {
                if !state.set(slot, value) {
                    return Err(DataError::UnknownSlot {
                        task: schema.task_id.clone(),
                        slot: slot.clone(),
                    });
                }
            }
            turns.push(Turn {
                user: turn.user,
                system: turn.system,
            });
            states.push(state.clone());
        }
        grouped[t].push((
            rec.split,
            Dialog {
                task_id: rec.task_id,
                turns,
                states,
            },
        ));
    }

    let mut tasks = Vec::new();
    for (schema, dialogs) in schemas.into_iter().zip(grouped) {
        if dialogs.is_empty() {
            continue;
        }
        let labelled = dialogs.iter().filter(|(s, _)| s.is_some()).count();
        let mut task = Task {
            schema,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        if labelled == 0 {
            let (train, val, _) = split_counts(dialogs.len());
            for (i, (_, d)) in dialogs.into_iter().enumerate() {
                if i < train {
                    task.train.push(d);
                } else if i < train + val {
                    task.val.push(d);
                } else {
                    task.test.push(d);
                }
            }
        } else if labelled == dialogs.len() {
            for (split, d) in dialogs {
                match split.expect("labelled") {
                    Split::Train => task.train.push(d),
                    Split::Val => task.val.push(d),
                    Split::Test => task.test.push(d),
                }
            }
        } else {
            return Err(DataError::Malformed {
                path: dialog_path.display().to_string(),
                line: 0,
                detail: format!("task {} mixes dialogs with and without a split", task.schema.task_id),
            });
        }
        tasks.push(task);
    }
    Ok(tasks)
}

/// Writes `tasks` in the format read by [`load_sgd_format`], with explicit splits.
pub fn write_sgd_format(dir: &Path, tasks: &[Task]) -> Result<(), DataError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let schema_path = dir.join(SCHEMA_FILE);
    let mut out = String::new();
    for t in tasks {
        let rec = SchemaRecord {
            task_id: t.schema.task_id.clone(),
            slots: t.schema.slots().to_vec(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable"));
        out.push('\n');
    }
    fs::write(&schema_path, out).map_err(io(&schema_path))?;

    let dialog_path = dir.join(DIALOGS_FILE);
    let mut file = fs::File::create(&dialog_path).map_err(io(&dialog_path))?;
    for t in tasks {
        for (split, dialogs) in [(Split::Train, &t.train), (Split::Val, &t.val), (Split::Test, &t.test)] {
            for d in dialogs {
                let rec = DialogRecord {
                    task_id: d.task_id.clone(),
                    split: Some(split),
                    turns: d.turns.iter().zip(&d.states).map(|(turn, s)| turn_record(turn, s)).collect(),
                };
                writeln!(file, "{}", serde_json::to_string(&rec).expect("serializable")).map_err(io(&dialog_path))?;
            }
        }
    }
    Ok(())
}

fn turn_record(turn: &Turn, state: &DialogState) -> TurnRecord {
    TurnRecord {
        user: turn.user.clone(),
        system: turn.system.clone(),
        state: state
            .values
            .iter()
            .filter(|(_, v)| v != NONE)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    }
}
