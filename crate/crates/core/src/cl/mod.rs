//! Continual-learning trainers over a frozen backbone: prompt-pool training
//! with and without rehearsal, its two ablations, and the multitask, oracle
//! and naive sequential baselines.

mod buffer;
#[cfg(test)]
mod tests;

use std::ops::Range;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneError};
use crate::context::{ContextEncoder, ContextError};
use crate::data::{parse_state, turn_samples, DataError, SchemaRegistry, Task, Tokenizer, TurnSample};
use crate::eval::{self, AccuracyMatrix, EvalError, JgaReport, MetricsReport, Prediction, SelectionLogEntry};
use crate::numerics::{sgd_step, LinearSchedule, NumericsError, Tape, Tensor, Var};
use crate::pool::{self, PoolConfig, PoolError, PromptPool};

pub use buffer::{BufferEntry, RehearsalBuffer};

#[derive(Debug, Error)]
pub enum ClError {
    #[error("prompt pool capacity exceeded: {tasks} tasks need {needed} prompts, pool holds {size} (raise pool_size or lower per_task)")]
    Capacity { tasks: usize, needed: usize, size: usize },
    #[error("non-finite loss while training task {task}")]
    NonFiniteLoss { task: usize },
    #[error("backbone must be frozen before continual learning")]
    NotFrozen,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("no tasks to train on")]
    NoTasks,
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ppt,
    PptR,
    Mpt,
    Ocpt,
    SeqNaive,
    PptRPromptOnly,
    PptROrdinary,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ppt,
        Method::PptR,
        Method::Mpt,
        Method::Ocpt,
        Method::SeqNaive,
        Method::PptRPromptOnly,
        Method::PptROrdinary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ppt => "ppt",
            Method::PptR => "ppt_r",
            Method::Mpt => "mpt",
            Method::Ocpt => "ocpt",
            Method::SeqNaive => "seq_naive",
            Method::PptRPromptOnly => "ppt_r_prompt_only",
            Method::PptROrdinary => "ppt_r_ordinary",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Whether test-time prompts come from nearest-key selection.
    pub fn selects_keys(self) -> bool {
        !matches!(self, Method::Mpt | Method::Ocpt | Method::SeqNaive)
    }

    pub fn uses_rehearsal(self) -> bool {
        matches!(self, Method::PptR | Method::PptRPromptOnly | Method::PptROrdinary)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyLoss {
    Plain,
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial SGD learning rate, decayed linearly to zero over each task.
    pub lr: f64,
    /// Weight of the key term.
    pub lambda: f64,
    /// Prompts per task (N).
    pub per_task: usize,
    /// Pool size (J).
    pub pool_size: usize,
    /// Rows per prompt (L_p).
    pub prompt_len: usize,
    /// Key and context dimension (D_K).
    pub key_dim: usize,
    /// Dialogs kept per finished task by the rehearsal methods.
    pub buffer_per_task: usize,
    pub seed: u64,
    /// Seed of the fixed context projection.
    pub context_seed: u64,
    /// Overrides the key loss of the rehearsal methods; `None` keeps each
    /// method's own variant.
    #[serde(default)]
    pub key_loss: Option<KeyLoss>,
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Sizes used for the five-task synthetic suite.
    pub fn desk() -> Self {
        Self {
            epochs: 8,
            batch_size: 4,
            lr: 25.0,
            lambda: 0.03,
            per_task: 5,
            pool_size: 25,
            prompt_len: 4,
            key_dim: 32,
            buffer_per_task: 5,
            seed: 0,
            context_seed: 17,
            key_loss: None,
            max_decode_len: 24,
        }
    }

    /// Published hyperparameters (T5-small scale).
    pub fn paper() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 0.25,
            lambda: 0.03,
            per_task: 10,
            pool_size: 150,
            prompt_len: 10,
            key_dim: 384,
            buffer_per_task: 50,
            seed: 0,
            context_seed: 17,
            key_loss: None,
            max_decode_len: 64,
        }
    }

    pub fn validate(&self, tasks: usize) -> Result<(), ClError> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("per_task", self.per_task),
            ("pool_size", self.pool_size),
            ("prompt_len", self.prompt_len),
            ("key_dim", self.key_dim),
            ("max_decode_len", self.max_decode_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ClError::InvalidConfig(format!("{name} must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ClError::InvalidConfig(format!("lr {} and lambda {} must be finite, lr positive", self.lr, self.lambda)));
        }
        if self.per_task * tasks > self.pool_size {
            return Err(ClError::Capacity {
                tasks,
                needed: self.per_task * tasks,
                size: self.pool_size,
            });
        }
        Ok(())
    }

    fn pool_config(&self, embed_dim: usize) -> PoolConfig {
        PoolConfig {
            size: self.pool_size,
            per_task: self.per_task,
            prompt_len: self.prompt_len,
            embed_dim,
            key_dim: self.key_dim,
        }
    }
}

/// A turn with its precomputed history embeddings and context vector.
#[derive(Clone, Debug)]
pub struct Sample {
    pub turn: TurnSample,
    pub history: Tensor,
    pub context: Tensor,
}

#[derive(Clone, Debug)]
pub struct PreparedTask {
    pub task_id: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Train sample indices grouped by dialog.
    pub train_dialogs: Vec<Vec<usize>>,
}

/// Frozen components shared by every run: backbone, tokenizer and context encoder.
#[derive(Clone, Debug)]
pub struct Setup {
    pub backbone: Arc<Backbone>,
    pub tokenizer: Arc<Tokenizer>,
    pub context: ContextEncoder,
}

impl Setup {
    pub fn new(backbone: Arc<Backbone>, tokenizer: Arc<Tokenizer>, key_dim: usize, context_seed: u64) -> Result<Self, ClError> {
        if !backbone.is_frozen() {
            return Err(ClError::NotFrozen);
        }
        let context = ContextEncoder::new(backbone.embed_dim(), key_dim, context_seed);
        Ok(Self {
            backbone,
            tokenizer,
            context,
        })
    }

    fn sample(&self, turn: TurnSample) -> Result<Sample, ClError> {
        let history = self.backbone.embed(&turn.input)?;
        let c = self.context.encode(&self.backbone, &turn.input)?;
        let context = Tensor::new(vec![c.dim()], c.0)?;
        Ok(Sample { turn, history, context })
    }

    /// Tokenizes every train and test turn and computes its context vector.
    pub fn prepare(&self, tasks: &[Task]) -> Result<Prepared, ClError> {
        if tasks.is_empty() {
            return Err(ClError::NoTasks);
        }
        let registry = SchemaRegistry::from_tasks(tasks);
        let mut out = Vec::with_capacity(tasks.len());
        for (t, task) in tasks.iter().enumerate() {
            let train_turns = turn_samples(&task.train, &task.schema, t, &self.tokenizer)?;
            let mut train_dialogs: Vec<Vec<usize>> = vec![Vec::new(); task.train.len()];
            for (i, s) in train_turns.iter().enumerate() {
                train_dialogs[s.dialog].push(i);
            }
            let train = train_turns.into_iter().map(|s| self.sample(s)).collect::<Result<_, _>>()?;
            let test = turn_samples(&task.test, &task.schema, t, &self.tokenizer)?
                .into_iter()
                .map(|s| self.sample(s))
                .collect::<Result<_, _>>()?;
            out.push(PreparedTask {
                task_id: task.schema.task_id.clone(),
                train,
                test,
                train_dialogs,
            });
        }
        Ok(Prepared { tasks: out, registry })
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub tasks: Vec<PreparedTask>,
    pub registry: SchemaRegistry,
}

impl Prepared {
    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.task_id.clone()).collect()
    }
}

/// Mean losses of one training epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub task: usize,
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub key: f64,
}

/// One evaluation pass over the test sets of tasks `0..=after_task`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub after_task: usize,
    pub reports: Vec<JgaReport>,
    /// Empty for methods that do not select keys.
    pub selections: Vec<SelectionLogEntry>,
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub method: Method,
    pub config: TrainConfig,
    pub task_ids: Vec<String>,
    pub backbone_checksum: String,
    pub accuracy: AccuracyMatrix,
    pub evaluations: Vec<Evaluation>,
    /// Pool state after each task (after the single joint phase for MPT).
    pub checkpoints: Vec<PromptPool>,
    pub pool: PromptPool,
    pub buffer: RehearsalBuffer,
    pub epochs: Vec<EpochStats>,
}

impl TrainedRun {
    pub fn final_evaluation(&self) -> &Evaluation {
        self.evaluations.last().expect("at least one evaluation")
    }

    pub fn acc_key(&self) -> Result<Option<f64>, EvalError> {
        if !self.method.selects_keys() {
            return Ok(None);
        }
        Ok(Some(eval::acc_key(&self.final_evaluation().selections, self.config.per_task)?))
    }

    pub fn jga_avg(&self) -> Result<f64, EvalError> {
        eval::jga_avg(&self.accuracy)
    }

    pub fn metrics(&self) -> Result<MetricsReport, EvalError> {
        metrics_report(
            self.method,
            &self.config,
            &self.task_ids,
            &self.backbone_checksum,
            &self.accuracy,
            self.final_evaluation(),
        )
    }
}

/// Per-task and aggregate metrics from an accuracy matrix and the final
/// evaluation.
pub fn metrics_report(
    method: Method,
    config: &TrainConfig,
    task_ids: &[String],
    backbone_checksum: &str,
    accuracy: &AccuracyMatrix,
    last: &Evaluation,
) -> Result<MetricsReport, EvalError> {
    let log = method.selects_keys().then_some((last.selections.as_slice(), config.per_task));
    MetricsReport::build(
        method.name(),
        config.seed,
        task_ids,
        accuracy,
        &last.reports,
        log,
        serde_json::json!({
            "backbone_checksum": backbone_checksum,
            "config": config,
        }),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum KeyMode {
    /// Keys are neither used in the loss nor updated.
    Off,
    /// Plain pull-in on every sample.
    Plain,
    /// BCE with the fresh/rehearsal label.
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Routing {
    Select,
    Oracle,
    Shared,
}

struct Plan {
    key_mode: KeyMode,
    rehearsal: bool,
    routing: Routing,
}

fn plan(method: Method, config: &TrainConfig) -> Plan {
    let rehearsal_loss = config.key_loss.unwrap_or(KeyLoss::Bce);
    let (key_mode, rehearsal, routing) = match method {
        Method::Ppt => (KeyMode::Plain, false, Routing::Select),
        Method::PptR => (mode_of(rehearsal_loss), true, Routing::Select),
        Method::PptROrdinary => (KeyMode::Plain, true, Routing::Select),
        Method::PptRPromptOnly => (KeyMode::Off, true, Routing::Select),
        Method::Ocpt => (KeyMode::Off, false, Routing::Oracle),
        Method::SeqNaive | Method::Mpt => (KeyMode::Off, false, Routing::Shared),
    };
    Plan {
        key_mode,
        rehearsal,
        routing,
    }
}

fn mode_of(k: KeyLoss) -> KeyMode {
    match k {
        KeyLoss::Plain => KeyMode::Plain,
        KeyLoss::Bce => KeyMode::Bce,
    }
}

const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const BUFFER_STREAM: u64 = 0xc2b2_ae3d_27d4_eb4f;

/// Runs `method` over the prepared task sequence.
pub fn train(method: Method, setup: &Setup, data: &Prepared, config: &TrainConfig) -> Result<TrainedRun, ClError> {
    let t_count = data.tasks.len();
    if t_count == 0 {
        return Err(ClError::NoTasks);
    }
    config.validate(t_count)?;
    if config.key_dim != setup.context.key_dim() {
        return Err(ClError::InvalidConfig(format!(
            "key_dim {} differs from the context encoder's {}",
            config.key_dim,
            setup.context.key_dim()
        )));
    }
    let plan = plan(method, config);
    let mut trainer = Trainer {
        setup,
        data,
        config,
        pool: PromptPool::new(config.pool_config(setup.backbone.embed_dim()), setup.backbone.embedding_table(), config.seed)?,
        shuffle_rng: ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM),
        epochs: Vec::new(),
    };
    let mut buffer = RehearsalBuffer::new(config.buffer_per_task, config.seed ^ BUFFER_STREAM);
    let mut accuracy = AccuracyMatrix::new(t_count);
    let mut evaluations = Vec::new();
    let mut checkpoints = Vec::new();

    if method == Method::Mpt {
        let items: Vec<Item> = (0..t_count)
            .flat_map(|t| (0..data.tasks[t].train.len()).map(move |i| Item { task: t, index: i, current: true }))
            .collect();
        trainer.train_block(0, &items, 0..config.per_task, KeyMode::Off)?;
        let ev = trainer.evaluate(t_count - 1, plan.routing)?;
        for (i, r) in ev.reports.iter().enumerate() {
            accuracy.set(t_count - 1, i, r.jga)?;
        }
        evaluations.push(ev);
        checkpoints.push(trainer.pool.clone());
    } else {
        for t in 0..t_count {
            let block = match plan.routing {
                Routing::Shared => 0..config.per_task,
                _ => trainer.pool.task_block(t)?,
            };
            let mut items: Vec<Item> = (0..data.tasks[t].train.len())
                .map(|i| Item { task: t, index: i, current: true })
                .collect();
            if plan.rehearsal {
                for e in buffer.entries() {
                    for &i in &data.tasks[e.task].train_dialogs[e.dialog] {
                        items.push(Item {
                            task: e.task,
                            index: i,
                            current: false,
                        });
                    }
                }
            }
            trainer.train_block(t, &items, block, plan.key_mode)?;
            if plan.rehearsal {
                buffer.add_task(t, data.tasks[t].train_dialogs.len());
            }
            let ev = trainer.evaluate(t, plan.routing)?;
            for (i, r) in ev.reports.iter().enumerate() {
                accuracy.set(t, i, r.jga)?;
            }
            evaluations.push(ev);
            checkpoints.push(trainer.pool.clone());
        }
    }

    Ok(TrainedRun {
        method,
        config: config.clone(),
        task_ids: data.task_ids(),
        backbone_checksum: setup.backbone.checksum(),
        accuracy,
        evaluations,
        checkpoints,
        pool: trainer.pool,
        buffer,
        epochs: trainer.epochs,
    })
}

pub fn train_ppt(setup: &Setup, data: &Prepared, config: &TrainConfig) -> Result<TrainedRun, ClError> {
    train(Method::Ppt, setup, data, config)
}

pub fn train_ppt_r(setup: &Setup, data: &Prepared, config: &TrainConfig) -> Result<TrainedRun, ClError> {
    train(Method::PptR, setup, data, config)
}

pub fn train_mpt(setup: &Setup, data: &Prepared, config: &TrainConfig) -> Result<TrainedRun, ClError> {
    train(Method::Mpt, setup, data, config)
}

pub fn train_ocpt(setup: &Setup, data: &Prepared, config: &TrainConfig) -> Result<TrainedRun, ClError> {
    train(Method::Ocpt, setup, data, config)
}

pub fn train_seq_naive(setup: &Setup, data: &Prepared, config: &TrainConfig) -> Result<TrainedRun, ClError> {
    train(Method::SeqNaive, setup, data, config)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    PromptOnly,
    Ordinary,
}

pub fn train_ablation(variant: Ablation, setup: &Setup, data: &Prepared, config: &TrainConfig) -> Result<TrainedRun, ClError> {
    let method = match variant {
        Ablation::PromptOnly => Method::PptRPromptOnly,
        Ablation::Ordinary => Method::PptROrdinary,
    };
    train(method, setup, data, config)
}

/// Re-evaluates tasks `0..=after_task` with a stored pool.
pub fn evaluate_checkpoint(
    method: Method,
    setup: &Setup,
    data: &Prepared,
    config: &TrainConfig,
    pool: &PromptPool,
    after_task: usize,
) -> Result<Evaluation, ClError> {
    let trainer = Trainer {
        setup,
        data,
        config,
        pool: pool.clone(),
        shuffle_rng: ChaCha8Rng::seed_from_u64(0),
        epochs: Vec::new(),
    };
    trainer.evaluate(after_task, plan(method, config).routing)
}

/// Re-evaluates stored `(after_task, pool)` checkpoints and rebuilds the
/// accuracy matrix from them.
pub fn replay_checkpoints(
    method: Method,
    setup: &Setup,
    data: &Prepared,
    config: &TrainConfig,
    checkpoints: &[(usize, PromptPool)],
) -> Result<(AccuracyMatrix, Vec<Evaluation>), ClError> {
    let mut accuracy = AccuracyMatrix::new(data.tasks.len());
    let mut evaluations = Vec::with_capacity(checkpoints.len());
    for (after_task, pool) in checkpoints {
        let ev = evaluate_checkpoint(method, setup, data, config, pool, *after_task)?;
        for (i, r) in ev.reports.iter().enumerate() {
            accuracy.set(*after_task, i, r.jga)?;
        }
        evaluations.push(ev);
    }
    Ok((accuracy, evaluations))
}

#[derive(Clone, Copy, Debug)]
struct Item {
    task: usize,
    index: usize,
    current: bool,
}

struct Trainer<'a> {
    setup: &'a Setup,
    data: &'a Prepared,
    config: &'a TrainConfig,
    pool: PromptPool,
    shuffle_rng: ChaCha8Rng,
    epochs: Vec<EpochStats>,
}

/// Loss terms of one sample.
pub(crate) struct SampleLoss {
    pub total: Var,
    pub ce: f64,
    pub key: f64,
}

/// Builds `CE + λ·key` for one sample on `tape`.
pub(crate) fn sample_loss(
    tape: &Tape,
    backbone: &Backbone,
    sample: &Sample,
    prompts: &[Var],
    keys: &[Var],
    key_mode: KeyLoss,
    use_keys: bool,
    current: bool,
    lambda: f64,
) -> Result<SampleLoss, ClError> {
    let w = backbone.bind_constant(tape);
    let history = tape.constant(sample.history.clone());
    let input = pool::assemble_input(tape, history, prompts)?;
    let ce = backbone.loss(tape, &w, input, &sample.turn.target)?;
    let ce_value = tape.scalar_value(ce);
    if !use_keys {
        return Ok(SampleLoss {
            total: ce,
            ce: ce_value,
            key: 0.0,
        });
    }
    let c = tape.constant(sample.context.clone());
    let key = match key_mode {
        KeyLoss::Plain => pool::key_loss_plain(tape, c, keys)?,
        KeyLoss::Bce => pool::key_loss_bce(tape, c, keys, current)?,
    };
    let key_value = tape.scalar_value(key);
    let weighted = tape.scale(key, lambda)?;
    Ok(SampleLoss {
        total: tape.add(ce, weighted)?,
        ce: ce_value,
        key: key_value,
    })
}

/// Value and gradients of one sample's training loss with `prompts` and
/// `keys` as the selected block.
pub struct Objective {
    pub value: f64,
    pub prompt_grads: Vec<Tensor>,
    pub key_grads: Vec<Tensor>,
}

/// Evaluates `CE + λ·key` for `sample` given explicit block values.
pub fn sample_objective(
    setup: &Setup,
    sample: &Sample,
    prompts: &[Tensor],
    keys: &[Tensor],
    key_loss: KeyLoss,
    current: bool,
    lambda: f64,
) -> Result<Objective, ClError> {
    let tape = Tape::new();
    let pv: Vec<Var> = prompts.iter().map(|p| tape.leaf(p.clone())).collect();
    let kv: Vec<Var> = keys.iter().map(|k| tape.leaf(k.clone())).collect();
    let loss = sample_loss(&tape, &setup.backbone, sample, &pv, &kv, key_loss, !keys.is_empty(), current, lambda)?;
    let value = tape.scalar_value(loss.total);
    let grads = tape.backward(loss.total)?;
    let grad_of = |v: &Var, like: &Tensor| grads.get(*v).unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()));
    Ok(Objective {
        value,
        prompt_grads: pv.iter().zip(prompts).map(|(v, p)| grad_of(v, p)).collect(),
        key_grads: kv.iter().zip(keys).map(|(v, k)| grad_of(v, k)).collect(),
    })
}

impl Trainer<'_> {
    fn train_block(&mut self, task: usize, items: &[Item], block: Range<usize>, key_mode: KeyMode) -> Result<(), ClError> {
        let b = self.config.batch_size;
        let steps = items.len().div_ceil(b) * self.config.epochs;
        let schedule = LinearSchedule::new(self.config.lr, steps)?;
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut step = 0;
        let use_keys = key_mode != KeyMode::Off;
        let loss_kind = if key_mode == KeyMode::Bce { KeyLoss::Bce } else { KeyLoss::Plain };
        for p in &mut self.pool.prompts {
            p.zero_grad();
        }
        for k in &mut self.pool.keys {
            k.zero_grad();
        }
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut self.shuffle_rng);
            let mut stats = EpochStats {
                task,
                epoch,
                ..EpochStats::default()
            };
            for chunk in order.chunks(b) {
                let weight = 1.0 / chunk.len() as f64;
                for &o in chunk {
                    let item = items[o];
                    let sample = &self.data.tasks[item.task].train[item.index];
                    let tape = Tape::new();
                    let prompts: Vec<Var> = block.clone().map(|i| tape.leaf(self.pool.prompts[i].value.clone())).collect();
                    let keys: Vec<Var> = if use_keys {
                        block.clone().map(|i| tape.leaf(self.pool.keys[i].value.clone())).collect()
                    } else {
                        Vec::new()
                    };
                    let loss = sample_loss(
                        &tape,
                        &self.setup.backbone,
                        sample,
                        &prompts,
                        &keys,
                        loss_kind,
                        use_keys,
                        item.current,
                        self.config.lambda,
                    )?;
                    let total = tape.scalar_value(loss.total);
                    if !total.is_finite() {
                        return Err(ClError::NonFiniteLoss { task });
                    }
                    stats.total += total;
                    stats.ce += loss.ce;
                    stats.key += loss.key;
                    let grads = tape.backward(loss.total)?;
                    for (j, i) in block.clone().enumerate() {
                        self.pool.prompts[i].accumulate(&grads, prompts[j], weight);
                        if use_keys {
                            self.pool.keys[i].accumulate(&grads, keys[j], weight);
                        }
                    }
                }
                let lr = schedule.at(step)?;
                step += 1;
                let (prompts, keys) = (&mut self.pool.prompts[block.clone()], &mut self.pool.keys[block.clone()]);
                if use_keys {
                    sgd_step(prompts.iter_mut().chain(keys.iter_mut()), lr)?;
                } else {
                    sgd_step(prompts.iter_mut(), lr)?;
                }
                for p in prompts.iter_mut().chain(keys.iter_mut()) {
                    p.zero_grad();
                }
            }
            let n = items.len().max(1) as f64;
            stats.total /= n;
            stats.ce /= n;
            stats.key /= n;
            self.epochs.push(stats);
        }
        Ok(())
    }

    fn evaluate(&self, after_task: usize, routing: Routing) -> Result<Evaluation, ClError> {
        let mut reports = Vec::with_capacity(after_task + 1);
        let mut selections = Vec::new();
        for (i, task) in self.data.tasks[..=after_task].iter().enumerate() {
            let mut predictions: Vec<Prediction> = Vec::with_capacity(task.test.len());
            for s in &task.test {
                let indices: Vec<usize> = match routing {
                    Routing::Select => {
                        let sel = self.pool.select_test(s.context.data())?;
                        selections.push(SelectionLogEntry {
                            task: i,
                            dialog: s.turn.dialog,
                            turn: s.turn.turn,
                            selected: sel.indices.clone(),
                        });
                        sel.indices
                    }
                    Routing::Oracle => self.pool.task_block(i)?.collect(),
                    Routing::Shared => (0..self.config.per_task).collect(),
                };
                let prompts: Vec<&Tensor> = indices.iter().map(|&j| self.pool.prompt(j)).collect();
                let input = pool::assemble_tensor(&s.history, &prompts)?;
                let out = self.setup.backbone.generate(&input, self.config.max_decode_len)?;
                predictions.push(parse_state(&out, &self.data.registry, &self.setup.tokenizer));
            }
            let gold: Vec<_> = task.test.iter().map(|s| s.turn.state.clone()).collect();
            reports.push(eval::jga(&predictions, &gold)?);
        }
        Ok(Evaluation {
            after_task,
            reports,
            selections,
        })
    }
}
