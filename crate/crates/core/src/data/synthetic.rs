//! Seeded synthetic corpora: continual-learning tasks built from the domain
//! catalog, and the generic slot-extraction plus copy corpus used to
//! pretrain the backbone.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{self, slot_marker, COPY_TASK, FILL};
use super::{separator, split_counts, DataError, Dialog, Task, TaskSchema, Tokenizer, Turn, NONE};
use crate::backbone::PretrainExample;

/// Owned form of a catalog domain; see [`lexicon::Domain`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainTemplates {
    pub name: String,
    pub slots: Vec<String>,
    pub openers: Vec<String>,
    pub user: Vec<(String, String)>,
    pub system: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwinDomain {
    pub name: String,
    pub source: String,
    pub slots: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub domains: Vec<DomainTemplates>,
    pub twins: Vec<TwinDomain>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn placeholder(slot: &str) -> String {
    format!("{{{slot}}}")
}

impl Catalog {
    pub fn standard() -> Self {
        Self {
            domains: lexicon::DOMAINS
                .iter()
                .map(|d| DomainTemplates {
                    name: d.name.into(),
                    slots: strings(d.slots),
                    openers: strings(d.openers),
                    user: d.user.iter().map(|(s, t)| (s.to_string(), t.to_string())).collect(),
                    system: strings(d.system),
                })
                .collect(),
            twins: lexicon::TWINS
                .iter()
                .map(|t| TwinDomain {
                    name: t.name.into(),
                    source: t.source.into(),
                    slots: strings(t.slots),
                })
                .collect(),
        }
    }

    /// Every template string: openers, user templates and system responses.
    pub fn templates(&self) -> Vec<String> {
        let mut out = Vec::new();
        for d in &self.domains {
            out.extend(d.openers.iter().cloned());
            out.extend(d.user.iter().map(|(_, t)| t.clone()));
            out.extend(d.system.iter().cloned());
        }
        out
    }

    /// Task names, domains first then twins.
    pub fn names(&self) -> Vec<String> {
        self.domains
            .iter()
            .map(|d| d.name.clone())
            .chain(self.twins.iter().map(|t| t.name.clone()))
            .collect()
    }

    /// Non-value words appearing in any template, sorted.
    pub fn template_words(&self) -> Vec<String> {
        let words: BTreeSet<String> = self
            .templates()
            .iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|w| !w.starts_with('{'))
            .map(String::from)
            .collect();
        words.into_iter().collect()
    }

    /// Closed vocabulary for this catalog plus the built-in slot lexicon and
    /// pretraining pools.
    pub fn tokenizer(&self) -> Tokenizer {
        let mut words: Vec<String> = Vec::new();
        for s in lexicon::SLOT_TYPES {
            words.push(slot_marker(s.name));
            words.extend(strings(s.values));
        }
        words.extend(strings(lexicon::PRETRAIN_NAMES));
        words.extend(strings(lexicon::PRETRAIN_WORDS));
        words.extend(self.names());
        words.extend(self.template_words());
        let max_slots = self
            .domains
            .iter()
            .map(|d| d.slots.len())
            .max()
            .unwrap_or(0)
            .max(lexicon::MAX_SLOTS);
        Tokenizer::new(max_slots, words)
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        for d in &self.domains {
            if d.slots.is_empty() || d.system.is_empty() || d.openers.is_empty() {
                return bad(format!("domain {} needs slots, openers and system responses", d.name));
            }
            for s in &d.slots {
                if lexicon::slot_type(s).is_none() {
                    return bad(format!("domain {} uses slot {s} with no value lexicon", d.name));
                }
                if !d.user.iter().any(|(slot, _)| slot == s) {
                    return bad(format!("domain {} has no template for slot {s}", d.name));
                }
            }
            for (slot, t) in &d.user {
                if t.matches('{').count() != 1 || !t.contains(&placeholder(slot)) {
                    return bad(format!("template {t:?} must hold exactly the placeholder for {slot}"));
                }
            }
        }
        for t in &self.twins {
            let Some(src) = self.domains.iter().find(|d| d.name == t.source) else {
                return bad(format!("twin {} refers to unknown domain {}", t.name, t.source));
            };
            if t.slots.iter().any(|s| !src.slots.contains(s)) {
                return bad(format!("twin {} slots must be a subset of {}", t.name, t.source));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_tasks: usize,
    pub dialogs_per_task: usize,
    pub max_turns: usize,
    /// Places the twin of the first domain third in the task order.
    pub similar_pair: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            dialogs_per_task: 100,
            max_turns: 3,
            similar_pair: false,
        }
    }
}

/// Position of the twin task in a similar-pair sequence; its source is task 0.
pub const TWIN_POSITION: usize = 2;

struct TaskPlan<'a> {
    name: &'a str,
    slots: &'a [String],
    domain: &'a DomainTemplates,
}

/// Builds `spec.num_tasks` tasks from `catalog`, split 7:1:2.
///
/// Fails when a catalog template coincides with a pretraining template.
pub fn generate_synthetic_tasks(spec: &SyntheticSpec, catalog: &Catalog, seed: u64) -> Result<Vec<Task>, DataError> {
    if spec.num_tasks < 2 {
        return Err(DataError::InvalidSpec("at least two tasks are required".into()));
    }
    if !(100..=300).contains(&spec.dialogs_per_task) {
        return Err(DataError::InvalidSpec(format!(
            "dialogs_per_task must lie in 100..=300, got {}",
            spec.dialogs_per_task
        )));
    }
    if spec.max_turns == 0 {
        return Err(DataError::InvalidSpec("max_turns must be positive".into()));
    }
    catalog.validate()?;
    let bank: HashSet<String> = pretraining_templates(catalog).into_iter().collect();
    if let Some(t) = catalog.templates().into_iter().find(|t| bank.contains(t)) {
        return Err(DataError::TemplateOverlap(t));
    }

    let mut plans: Vec<TaskPlan> = catalog
        .domains
        .iter()
        .map(|d| TaskPlan {
            name: &d.name,
            slots: &d.slots,
            domain: d,
        })
        .collect();
    if spec.similar_pair {
        let first = &catalog.domains[0];
        let twin = catalog
            .twins
            .iter()
            .find(|t| t.source == first.name)
            .ok_or_else(|| DataError::InvalidSpec(format!("no twin defined for {}", first.name)))?;
        let at = TWIN_POSITION.min(spec.num_tasks - 1);
        plans.insert(
            at,
            TaskPlan {
                name: &twin.name,
                slots: &twin.slots,
                domain: first,
            },
        );
    }
    if plans.len() < spec.num_tasks {
        return Err(DataError::InvalidSpec(format!(
            "catalog holds {} tasks, {} requested",
            plans.len(),
            spec.num_tasks
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for plan in plans.into_iter().take(spec.num_tasks) {
        let schema = TaskSchema::new(plan.name, plan.slots.to_vec())?;
        let mut dialogs: Vec<Dialog> = (0..spec.dialogs_per_task)
            .map(|_| synth_dialog(&mut rng, &plan, &schema, spec.max_turns))
            .collect();
        let (train, val, _) = split_counts(dialogs.len());
        let test = dialogs.split_off(train + val);
        let val = dialogs.split_off(train);
        tasks.push(Task {
            schema,
            train: dialogs,
            val,
            test,
        });
    }
    Ok(tasks)
}

fn synth_dialog(rng: &mut ChaCha8Rng, plan: &TaskPlan, schema: &TaskSchema, max_turns: usize) -> Dialog {
    let n = rng.gen_range(1..=max_turns);
    let mut pending: Vec<&String> = plan.slots.iter().collect();
    pending.shuffle(rng);
    let mut state = schema.empty_state();
    let mut turns = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        let user = match pending.last() {
            Some(_) if rng.gen_bool(0.85) => {
                let slot = pending.pop().expect("non-empty");
                let choices: Vec<&String> = plan.domain.user.iter().filter(|(s, _)| s == slot).map(|(_, t)| t).collect();
                let template = choices.choose(rng).expect("validated");
                let values = lexicon::slot_type(slot).expect("validated").values;
                let value = values.choose(rng).expect("non-empty lexicon");
                state.set(slot, value);
                template.replace(&placeholder(slot), value)
            }
            _ => plan.domain.openers.choose(rng).expect("validated").clone(),
        };
        let system = plan.domain.system.choose(rng).expect("validated").clone();
        turns.push(Turn { user, system });
        states.push(state.clone());
    }
    Dialog {
        task_id: schema.task_id.clone(),
        turns,
        states,
    }
}

const BANK_SEED: u64 = 0x5eed_0001;
const BANK_SIZE: usize = 400;

/// The fixed bank of pretraining utterance templates. `{}` marks a value slot;
/// the last quarter holds no placeholder and serves as system responses.
pub fn pretraining_templates(catalog: &Catalog) -> Vec<String> {
    let mut words: Vec<String> = strings(lexicon::PRETRAIN_WORDS);
    words.extend(catalog.template_words());
    let mut rng = ChaCha8Rng::seed_from_u64(BANK_SEED);
    (0..BANK_SIZE)
        .map(|i| {
            let len = rng.gen_range(2..=4);
            let mut t: Vec<&str> = (0..len).map(|_| words.choose(&mut rng).expect("non-empty").as_str()).collect();
            let holes = if i < BANK_SIZE * 3 / 4 { rng.gen_range(1..=2) } else { 0 };
            for _ in 0..holes {
                let at = rng.gen_range(0..=t.len());
                t.insert(at, "{}");
            }
            t.join(" ")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainCorpusConfig {
    pub examples: usize,
    pub copy_fraction: f64,
    /// Instruction segments are padded with `<fill>` to a random length up to this.
    pub max_instruction: usize,
    pub max_turns: usize,
    pub seed: u64,
}

impl Default for PretrainCorpusConfig {
    fn default() -> Self {
        Self {
            examples: 6000,
            copy_fraction: 0.15,
            max_instruction: 20,
            max_turns: 3,
            seed: 11,
        }
    }
}

/// Generic slot extraction and copy examples.
///
/// Extraction: the history mentions values of a random set of slot types,
/// followed by an instruction `[s_0] name [s_1] <slot:a> ...`; the target is
/// `[s_0] name [s_1] v_a ...` with `none` for unmentioned slots. Copy: random
/// words followed by `<copy>`; the target repeats the words.
pub fn pretraining_corpus(config: &PretrainCorpusConfig, catalog: &Catalog, tokenizer: &Tokenizer) -> Vec<PretrainExample> {
    let bank = pretraining_templates(catalog);
    let split = BANK_SIZE * 3 / 4;
    let (user_bank, system_bank) = bank.split_at(split);
    let mut names = strings(lexicon::PRETRAIN_NAMES);
    names.extend(catalog.names());
    let mut copy_words: Vec<String> = strings(lexicon::PRETRAIN_WORDS);
    copy_words.extend(catalog.template_words());
    for s in lexicon::SLOT_TYPES {
        copy_words.extend(strings(s.values));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.examples);
    for _ in 0..config.examples {
        let (input, target, instruction) = if rng.gen_bool(config.copy_fraction.clamp(0.0, 1.0)) {
            let len = rng.gen_range(2..=8);
            let words: Vec<String> = (0..len).map(|_| copy_words.choose(&mut rng).expect("non-empty").clone()).collect();
            (words.clone(), words, vec![COPY_TASK.to_string()])
        } else {
            extraction(&mut rng, user_bank, system_bank, &names, config.max_turns.max(1))
        };
        let mut text = input;
        let fill = rng.gen_range(instruction.len()..=config.max_instruction.max(instruction.len())) - instruction.len();
        text.extend(instruction);
        text.extend(std::iter::repeat(FILL.to_string()).take(fill));
        out.push(PretrainExample {
            input: tokenizer.tokenize(&text.join(" ")),
            target: tokenizer.tokenize(&target.join(" ")),
        });
    }
    out
}

type Texts = Vec<String>;

fn extraction(rng: &mut ChaCha8Rng, user_bank: &[String], system_bank: &[String], names: &[String], max_turns: usize) -> (Texts, Texts, Texts) {
    let name = names.choose(rng).expect("non-empty").clone();
    let k = rng.gen_range(1..=lexicon::MAX_SLOTS);
    let types: Vec<&lexicon::SlotType> = lexicon::SLOT_TYPES.choose_multiple(rng, k).collect();
    let others: Vec<&lexicon::SlotType> = lexicon::SLOT_TYPES
        .iter()
        .filter(|s| !types.iter().any(|t| t.name == s.name))
        .collect();
    let mut pending: Vec<usize> = (0..k).collect();
    pending.shuffle(rng);
    let mut values = vec![NONE.to_string(); k];
    let mut history = Vec::new();
    let turns = rng.gen_range(1..=max_turns);
    for t in 0..turns {
        let template = user_bank.choose(rng).expect("non-empty");
        for w in template.split_whitespace() {
            if w != "{}" {
                history.push(w.to_string());
                continue;
            }
            if !pending.is_empty() && (others.is_empty() || rng.gen_bool(0.85)) {
                let j = pending.pop().expect("non-empty");
                let v = types[j].values.choose(rng).expect("non-empty").to_string();
                values[j] = v.clone();
                history.push(v);
            } else if let Some(o) = others.choose(rng) {
                history.push(o.values.choose(rng).expect("non-empty").to_string());
            }
        }
        if t + 1 < turns {
            history.extend(system_bank.choose(rng).expect("non-empty").split_whitespace().map(String::from));
        }
    }
    let mut instruction = vec![separator(0), name.clone()];
    let mut target = vec![separator(0), name];
    for (i, (ty, v)) in types.iter().zip(values).enumerate() {
        instruction.push(separator(i + 1));
        instruction.push(slot_marker(ty.name));
        target.push(separator(i + 1));
        target.push(v);
    }
    (history, target, instruction)
}
