use serde::{Deserialize, Serialize};

use super::{separator, separator_index, DataError, Dialog, DialogState, SchemaRegistry, TaskSchema, Tokenizer, EOS_ID};

/// `u_1 r_1 ... u_{k-1} r_{k-1} u_k` joined by single spaces.
pub fn serialize_input_text(dialog: &Dialog, k: usize) -> Result<String, DataError> {
    if k == 0 || k > dialog.turns.len() {
        return Err(DataError::TurnOutOfRange {
            k,
            turns: dialog.turns.len(),
        });
    }
    let mut parts = Vec::with_capacity(2 * k - 1);
    for (i, turn) in dialog.turns[..k].iter().enumerate() {
        parts.push(turn.user.as_str());
        if i + 1 < k {
            parts.push(turn.system.as_str());
        }
    }
    Ok(parts.join(" "))
}

pub fn serialize_input(dialog: &Dialog, k: usize, tokenizer: &Tokenizer) -> Result<Vec<usize>, DataError> {
    Ok(tokenizer.tokenize(&serialize_input_text(dialog, k)?))
}

/// `[s_0] id [s_1] v_1 ... [s_n] v_n` with values in schema order.
pub fn serialize_state(state: &DialogState, schema: &TaskSchema, tokenizer: &Tokenizer) -> Result<Vec<usize>, DataError> {
    Ok(tokenizer.tokenize(&state_text(state, schema)?))
}

pub(crate) fn state_text(state: &DialogState, schema: &TaskSchema) -> Result<String, DataError> {
    let mismatch = |detail: String| DataError::SchemaMismatch {
        task: schema.task_id.clone(),
        detail,
    };
    if state.task_id != schema.task_id {
        return Err(mismatch(format!("state belongs to {}", state.task_id)));
    }
    if state.values.len() != schema.slots().len() {
        return Err(mismatch(format!("{} values for {} slots", state.values.len(), schema.slots().len())));
    }
    let mut out = vec![separator(0), schema.task_id.clone()];
    for (i, slot) in schema.slots().iter().enumerate() {
        let value = state.get(slot).ok_or_else(|| mismatch(format!("missing slot {slot}")))?;
        if value.split_whitespace().next().is_none() {
            return Err(DataError::EmptyValue { slot: slot.clone() });
        }
        if value.split_whitespace().any(|w| separator_index(w).is_some()) {
            return Err(DataError::SeparatorInValue {
                slot: slot.clone(),
                value: value.to_string(),
            });
        }
        out.push(separator(i + 1));
        out.push(value.split_whitespace().collect::<Vec<_>>().join(" "));
    }
    Ok(out.join(" "))
}

/// Why a generated sequence could not be read back as a state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParseFailure {
    Empty,
    MissingTaskSeparator,
    MissingTaskName,
    UnknownTask { name: String },
    UnexpectedSeparator { expected: usize, found: String },
    MissingSeparator { expected: usize },
    EmptyValue { slot: String },
    TrailingTokens,
}

/// Reads `[s_0] id [s_1] v_1 ... [s_n] v_n`, stopping at the first
/// end-of-sequence id. Values span every token between consecutive separators.
pub fn parse_state(ids: &[usize], registry: &SchemaRegistry, tokenizer: &Tokenizer) -> Result<DialogState, ParseFailure> {
    let end = ids.iter().position(|&i| i == EOS_ID).unwrap_or(ids.len());
    let words: Vec<&str> = ids[..end].iter().map(|&i| tokenizer.token(i).unwrap_or(super::UNK)).collect();
    parse_words(&words, registry)
}

pub(crate) fn parse_words(words: &[&str], registry: &SchemaRegistry) -> Result<DialogState, ParseFailure> {
    if words.is_empty() {
        return Err(ParseFailure::Empty);
    }
    if separator_index(words[0]) != Some(0) {
        return Err(ParseFailure::MissingTaskSeparator);
    }
    // Split into fields at separator tokens.
    let mut fields: Vec<(usize, Vec<&str>)> = vec![(0, Vec::new())];
    for &w in &words[1..] {
        match separator_index(w) {
            Some(i) => fields.push((i, Vec::new())),
            None => fields.last_mut().expect("non-empty").1.push(w),
        }
    }
    let name = fields[0].1.join(" ");
    if name.is_empty() {
        return Err(ParseFailure::MissingTaskName);
    }
    let schema = registry.get(&name).ok_or(ParseFailure::UnknownTask { name })?;
    let mut state = schema.empty_state();
    for (i, slot) in schema.slots().iter().enumerate() {
        let Some((idx, value)) = fields.get(i + 1) else {
            return Err(ParseFailure::MissingSeparator { expected: i + 1 });
        };
        if *idx != i + 1 {
            return Err(ParseFailure::UnexpectedSeparator {
                expected: i + 1,
                found: separator(*idx),
            });
        }
        if value.is_empty() {
            return Err(ParseFailure::EmptyValue { slot: slot.clone() });
        }
        state.set(slot, &value.join(" "));
    }
    if fields.len() > schema.slots().len() + 1 {
        return Err(ParseFailure::TrailingTokens);
    }
    Ok(state)
}
