//! Key-value prompt pool: J prompts of `L_p × D` rows, each paired with a key
//! in context space.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerError};
use crate::numerics::{sigmoid, NumericsError, Parameter, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("pool of {size} prompts cannot hold task {task} with {per_task} prompts per task")]
    Capacity { task: usize, per_task: usize, size: usize },
    #[error("cannot select {n} prompts from a pool of {size}")]
    TooMany { n: usize, size: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("key loss needs at least one selected key")]
    EmptySelection,
    #[error("invalid pool config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("malformed pool checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// J
    pub size: usize,
    /// N
    pub per_task: usize,
    /// L_p
    pub prompt_len: usize,
    /// D
    pub embed_dim: usize,
    /// D_K
    pub key_dim: usize,
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), PoolError> {
        if self.size == 0 || self.per_task == 0 || self.prompt_len == 0 || self.embed_dim == 0 || self.key_dim == 0 {
            return Err(PoolError::InvalidConfig(format!("all sizes must be positive: {self:?}")));
        }
        if self.per_task > self.size {
            return Err(PoolError::TooMany {
                n: self.per_task,
                size: self.size,
            });
        }
        Ok(())
    }

    /// Number of tasks the pool can hold.
    pub fn capacity(&self) -> usize {
        self.size / self.per_task
    }
}

/// Selected pool indices with their distances and gammas, aligned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    pub gammas: Vec<f64>,
}

fn check_dims(c: &[f64], k: &[f64]) -> Result<(), PoolError> {
    if c.len() != k.len() {
        return Err(PoolError::DimMismatch(format!("context dim {} vs key dim {}", c.len(), k.len())));
    }
    Ok(())
}

pub fn distance(c: &[f64], k: &[f64]) -> Result<f64, PoolError> {
    check_dims(c, k)?;
    Ok(c.iter().zip(k).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `sigmoid(‖c − k‖)`.
pub fn gamma(c: &[f64], k: &[f64]) -> Result<f64, PoolError> {
    Ok(sigmoid(distance(c, k)?))
}

fn gammas_on(tape: &Tape, c: Var, keys: &[Var]) -> Result<Vec<Var>, PoolError> {
    if keys.is_empty() {
        return Err(PoolError::EmptySelection);
    }
    let cd = tape.shape(c).iter().product::<usize>();
    keys.iter()
        .map(|&k| {
            let kd = tape.shape(k).iter().product::<usize>();
            if kd != cd {
                return Err(PoolError::DimMismatch(format!("context dim {cd} vs key dim {kd}")));
            }
            Ok(tape.sigmoid(tape.distance(c, k)?)?)
        })
        .collect()
}

/// `Σ γ(c, k_i)` over the selected keys.
pub fn key_loss_plain(tape: &Tape, c: Var, keys: &[Var]) -> Result<Var, PoolError> {
    let g = gammas_on(tape, c, keys)?;
    Ok(tape.sum_scalars(&g)?)
}

/// `Σ BCE(1 − γ(c, k_i), y)` with `y = 1` for fresh current-task samples and
/// `y = 0` for rehearsal samples. `1 − γ` acts as the match probability, so
/// label 1 pulls keys toward `c` and label 0 pushes them away.
pub fn key_loss_bce(tape: &Tape, c: Var, keys: &[Var], is_current: bool) -> Result<Var, PoolError> {
    let g = gammas_on(tape, c, keys)?;
    let label = if is_current { 1.0 } else { 0.0 };
    let terms = g
        .into_iter()
        .map(|gi| Ok(tape.bce(tape.affine(gi, -1.0, 1.0)?, label)?))
        .collect::<Result<Vec<_>, PoolError>>()?;
    Ok(tape.sum_scalars(&terms)?)
}

/// History embeddings followed by the selected prompts, in selection order.
pub fn assemble_input(tape: &Tape, history: Var, prompts: &[Var]) -> Result<Var, PoolError> {
    if prompts.is_empty() {
        return Ok(history);
    }
    let d = tape.shape(history)[1];
    for &p in prompts {
        let s = tape.shape(p);
        if s.len() != 2 || s[1] != d {
            return Err(PoolError::DimMismatch(format!("prompt {s:?} vs embed dim {d}")));
        }
    }
    let mut parts = Vec::with_capacity(prompts.len() + 1);
    parts.push(history);
    parts.extend_from_slice(prompts);
    Ok(tape.concat_rows(&parts)?)
}

/// Tensor version of [`assemble_input`], for decoding.
pub fn assemble_tensor(history: &Tensor, prompts: &[&Tensor]) -> Result<Tensor, PoolError> {
    let d = history.cols();
    let mut data = history.data().to_vec();
    let mut rows = history.rows();
    for p in prompts {
        if p.shape().len() != 2 || p.cols() != d {
            return Err(PoolError::DimMismatch(format!("prompt {:?} vs embed dim {d}", p.shape())));
        }
        data.extend_from_slice(p.data());
        rows += p.rows();
    }
    Ok(Tensor::new(vec![rows, d], data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    config: PoolConfig,
    pub prompts: Vec<Parameter>,
    pub keys: Vec<Parameter>,
}

impl PromptPool {
    /// Prompt rows are copies of random embedding-table rows; keys are
    /// drawn from N(0, 0.5²).
    pub fn new(config: PoolConfig, embedding_table: &Tensor, seed: u64) -> Result<Self, PoolError> {
        config.validate()?;
        if embedding_table.shape().len() != 2 || embedding_table.cols() != config.embed_dim || embedding_table.rows() == 0 {
            return Err(PoolError::DimMismatch(format!(
                "embedding table {:?} vs embed dim {}",
                embedding_table.shape(),
                config.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.5).expect("positive std");
        let (lp, d) = (config.prompt_len, config.embed_dim);
        let mut prompts = Vec::with_capacity(config.size);
        for _ in 0..config.size {
            let mut data = Vec::with_capacity(lp * d);
            for _ in 0..lp {
                let row = rng.gen_range(0..embedding_table.rows());
                data.extend_from_slice(embedding_table.row(row));
            }
            prompts.push(Parameter::new(Tensor::new(vec![lp, d], data)?, true));
        }
        let keys = (0..config.size)
            .map(|_| Parameter::new(Tensor::from_fn(vec![config.key_dim], |_| normal.sample(&mut rng)), true))
            .collect();
        Ok(Self { config, prompts, keys })
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn size(&self) -> usize {
        self.config.size
    }

    fn result(&self, c: &[f64], indices: Vec<usize>) -> Result<SelectionResult, PoolError> {
        let distances = indices
            .iter()
            .map(|&i| distance(c, self.keys[i].value.data()))
            .collect::<Result<Vec<_>, _>>()?;
        let gammas = distances.iter().map(|&d| sigmoid(d)).collect();
        Ok(SelectionResult {
            indices,
            distances,
            gammas,
        })
    }

    /// The contiguous block `N·t .. N·(t+1)` reserved for task `t`.
    pub fn task_block(&self, task: usize) -> Result<std::ops::Range<usize>, PoolError> {
        let n = self.config.per_task;
        if n * (task + 1) > self.config.size {
            return Err(PoolError::Capacity {
                task,
                per_task: n,
                size: self.config.size,
            });
        }
        Ok(n * task..n * (task + 1))
    }

    pub fn select_train(&self, task: usize, c: &[f64]) -> Result<SelectionResult, PoolError> {
        let block = self.task_block(task)?;
        self.result(c, block.collect())
    }

    /// The `N` keys nearest to `c`; equal distances go to the lower index.
    /// Indices are returned in ascending order.
    pub fn select_test(&self, c: &[f64]) -> Result<SelectionResult, PoolError> {
        self.select_nearest(c, self.config.per_task)
    }

    pub fn select_nearest(&self, c: &[f64], n: usize) -> Result<SelectionResult, PoolError> {
        if n > self.config.size {
            return Err(PoolError::TooMany {
                n,
                size: self.config.size,
            });
        }
        let mut order: Vec<(f64, usize)> = self
            .keys
            .iter()
            .enumerate()
            .map(|(i, k)| Ok((distance(c, k.value.data())?, i)))
            .collect::<Result<_, PoolError>>()?;
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut picked: Vec<usize> = order[..n].iter().map(|&(_, i)| i).collect();
        picked.sort_unstable();
        self.result(c, picked)
    }

    pub fn prompt(&self, i: usize) -> &Tensor {
        &self.prompts[i].value
    }

    pub fn key(&self, i: usize) -> &Tensor {
        &self.keys[i].value
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<(), PoolError> {
        let mut tensors = Vec::with_capacity(2 * self.config.size);
        for (i, p) in self.prompts.iter().enumerate() {
            tensors.push((format!("prompt.{i}"), p.value.clone()));
        }
        for (i, k) in self.keys.iter().enumerate() {
            tensors.push((format!("key.{i}"), k.value.clone()));
        }
        let meta = serde_json::json!({ "config": self.config, "run": meta });
        container::write(path, "prompt_pool", &meta, &tensors)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), PoolError> {
        let c = container::read(path)?;
        if c.kind != "prompt_pool" {
            return Err(PoolError::Malformed(format!("expected a prompt pool, found {:?}", c.kind)));
        }
        let config: PoolConfig =
            serde_json::from_value(c.meta["config"].clone()).map_err(|e| PoolError::Malformed(e.to_string()))?;
        config.validate()?;
        let j = config.size;
        if c.tensors.len() != 2 * j {
            return Err(PoolError::Malformed(format!("expected {} tensors, found {}", 2 * j, c.tensors.len())));
        }
        let mut prompts = Vec::with_capacity(j);
        let mut keys = Vec::with_capacity(j);
        for (idx, (name, t)) in c.tensors.into_iter().enumerate() {
            let (expected, shape) = if idx < j {
                (format!("prompt.{idx}"), vec![config.prompt_len, config.embed_dim])
            } else {
                (format!("key.{}", idx - j), vec![config.key_dim])
            };
            if name != expected || t.shape() != shape.as_slice() {
                return Err(PoolError::Malformed(format!("tensor {name} {:?}, expected {expected} {shape:?}", t.shape())));
            }
            if idx < j {
                prompts.push(Parameter::new(t, true));
            } else {
                keys.push(Parameter::new(t, true));
            }
        }
        let run = c.meta.get("run").cloned().unwrap_or(serde_json::Value::Null);
        Ok((Self { config, prompts, keys }, run))
    }
}
