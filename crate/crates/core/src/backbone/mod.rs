//! The frozen encoder-decoder that prompts steer.
//!
//! A small pre-norm transformer with tied input/output embeddings and fixed
//! sinusoidal positions. Prompt vectors enter only on the encoder side,
//! appended after the token embeddings of the dialog history.

mod pretrain;
mod weights;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::{self, ContainerError};
use crate::numerics::{NumericsError, Parameter, Tape, Tensor, Var};

pub use pretrain::{mean_loss, pretrain, PretrainConfig, PretrainExample, PretrainReport};
pub use weights::{Attention, DecoderBlock, EncoderBlock, Linear, Norm, WeightTree, Weights};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("token id {id} outside vocabulary of {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },
    #[error("input of length {len} exceeds max_seq_len {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error("pretraining loss did not decrease over the first epoch ({first:.4} -> {last:.4})")]
    PretrainStalled { first: f64, last: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub bos_id: usize,
    pub eos_id: usize,
}

impl BackboneConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            num_heads: 2,
            ff_dim: 128,
            max_seq_len: 256,
            bos_id: 1,
            eos_id: 2,
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: String| Err(BackboneError::InvalidConfig(m));
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.bos_id >= self.vocab_size || self.eos_id >= self.vocab_size {
            return bad("bos/eos ids outside vocabulary".into());
        }
        if self.max_seq_len == 0 || self.ff_dim == 0 {
            return bad("max_seq_len and ff_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    seed: u64,
    weights: Weights<Parameter>,
    frozen: bool,
    positions: Tensor,
}

/// Cross-attention keys and values of the encoder output, one pair per
/// decoder block, computed once per input.
pub struct Memory {
    kv: Vec<(Var, Var)>,
}

fn sinusoidal(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(vec![len, dim], |idx| {
        let (pos, i) = (idx / dim, idx % dim);
        let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

struct Init {
    rng: ChaCha8Rng,
    dim: usize,
}

impl Init {
    fn gaussian(&mut self, shape: Vec<usize>, std: f64) -> Parameter {
        let normal = Normal::new(0.0, std).expect("positive std");
        Parameter::new(Tensor::from_fn(shape, |_| normal.sample(&mut self.rng)), true)
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Linear<Parameter> {
        Linear {
            weight: self.gaussian(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()),
            bias: Parameter::new(Tensor::zeros(vec![fan_out]), true),
        }
    }

    fn norm(&mut self) -> Norm<Parameter> {
        Norm {
            gain: Parameter::new(Tensor::from_fn(vec![self.dim], |_| 1.0), true),
            bias: Parameter::new(Tensor::zeros(vec![self.dim]), true),
        }
    }

    fn attention(&mut self) -> Attention<Parameter> {
        let d = self.dim;
        Attention {
            query: self.linear(d, d),
            key: self.linear(d, d),
            value: self.linear(d, d),
            output: self.linear(d, d),
        }
    }
}

impl Backbone {
    /// Randomly initialized, trainable backbone.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dim: config.embed_dim,
        };
        let (d, ff) = (config.embed_dim, config.ff_dim);
        let embedding = init.gaussian(vec![config.vocab_size, d], 1.0);
        let encoder = (0..config.encoder_layers)
            .map(|_| EncoderBlock {
                norm1: init.norm(),
                attn: init.attention(),
                norm2: init.norm(),
                ff_in: init.linear(d, ff),
                ff_out: init.linear(ff, d),
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|_| DecoderBlock {
                norm1: init.norm(),
                self_attn: init.attention(),
                norm2: init.norm(),
                cross_attn: init.attention(),
                norm3: init.norm(),
                ff_in: init.linear(d, ff),
                ff_out: init.linear(ff, d),
            })
            .collect();
        let weights = Weights {
            embedding,
            encoder,
            encoder_norm: init.norm(),
            decoder,
            decoder_norm: init.norm(),
        };
        let positions = sinusoidal(config.max_seq_len, d);
        Ok(Self {
            config,
            seed,
            weights,
            frozen: false,
            positions,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Stops all further updates; every parameter becomes a constant.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.weights.visit_mut("", &mut |_, p| {
            p.trainable = false;
            p.zero_grad();
        });
    }

    pub fn weights(&self) -> &Weights<Parameter> {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Weights<Parameter> {
        &mut self.weights
    }

    pub fn embedding_table(&self) -> &Tensor {
        &self.weights.embedding.value
    }

    /// Places all weights on `tape`, tracking gradients only while unfrozen.
    pub fn bind(&self, tape: &Tape) -> Weights<Var> {
        self.weights.map("", &mut |_, p| p.bind(tape))
    }

    /// Places all weights on `tape` as constants.
    pub fn bind_constant(&self, tape: &Tape) -> Weights<Var> {
        self.weights.map("", &mut |_, p| tape.constant(p.value.clone()))
    }

    /// SHA-256 over every weight in checkpoint order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.weights.map("", &mut |name, p| {
            hasher.update(name.as_bytes());
            hasher.update(p.value.to_le_bytes());
        });
        hex::encode(hasher.finalize())
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), BackboneError> {
        match ids.iter().find(|&&id| id >= self.config.vocab_size) {
            Some(&id) => Err(BackboneError::OutOfVocabulary {
                id,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Embedding-table rows for `ids`, as a `|ids| × D` tensor.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor, BackboneError> {
        self.check_ids(ids)?;
        let table = self.embedding_table();
        let data = ids.iter().flat_map(|&id| table.row(id).iter().copied()).collect();
        Ok(Tensor::new(vec![ids.len(), self.config.embed_dim], data)?)
    }

    /// Tape version of [`Backbone::embed`].
    pub fn embed_on(&self, tape: &Tape, w: &Weights<Var>, ids: &[usize]) -> Result<Var, BackboneError> {
        self.check_ids(ids)?;
        Ok(tape.gather(w.embedding, ids)?)
    }

    fn linear(tape: &Tape, l: &Linear<Var>, x: Var) -> Result<Var, NumericsError> {
        let y = tape.matmul(x, l.weight)?;
        tape.add_row(y, l.bias)
    }

    fn norm(tape: &Tape, n: &Norm<Var>, x: Var) -> Result<Var, NumericsError> {
        tape.layer_norm(x, n.gain, n.bias)
    }

    fn attend(&self, tape: &Tape, a: &Attention<Var>, x: Var, k: Var, v: Var, causal: bool) -> Result<Var, NumericsError> {
        let q = Self::linear(tape, &a.query, x)?;
        let heads = self.config.num_heads;
        let dh = self.config.embed_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.softmax_rows(scores, causal)?;
            outs.push(tape.matmul(probs, vh)?);
        }
        let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Self::linear(tape, &a.output, merged)
    }

    fn self_attend(&self, tape: &Tape, a: &Attention<Var>, x: Var, causal: bool) -> Result<Var, NumericsError> {
        let k = Self::linear(tape, &a.key, x)?;
        let v = Self::linear(tape, &a.value, x)?;
        self.attend(tape, a, x, k, v, causal)
    }

    fn feed_forward(tape: &Tape, ff_in: &Linear<Var>, ff_out: &Linear<Var>, x: Var) -> Result<Var, NumericsError> {
        let h = Self::linear(tape, ff_in, x)?;
        let h = tape.gelu(h)?;
        Self::linear(tape, ff_out, h)
    }

    fn with_positions(&self, tape: &Tape, x: Var) -> Result<Var, BackboneError> {
        let n = tape.shape(x)[0];
        if n > self.config.max_seq_len {
            return Err(BackboneError::InputTooLong {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        let d = self.config.embed_dim;
        let pos = Tensor::new(vec![n, d], self.positions.data()[..n * d].to_vec())?;
        let pos = tape.constant(pos);
        Ok(tape.add(x, pos)?)
    }

    /// Runs the encoder over an `n × D` input sequence (token embeddings,
    /// optionally followed by prompt rows) and returns its final states.
    pub fn encode(&self, tape: &Tape, w: &Weights<Var>, input: Var) -> Result<Var, BackboneError> {
        let mut h = self.with_positions(tape, input)?;
        for block in &w.encoder {
            let x = Self::norm(tape, &block.norm1, h)?;
            let a = self.self_attend(tape, &block.attn, x, false)?;
            h = tape.add(h, a)?;
            let x = Self::norm(tape, &block.norm2, h)?;
            let f = Self::feed_forward(tape, &block.ff_in, &block.ff_out, x)?;
            h = tape.add(h, f)?;
        }
        Ok(Self::norm(tape, &w.encoder_norm, h)?)
    }

    pub fn memory(&self, tape: &Tape, w: &Weights<Var>, encoded: Var) -> Result<Memory, BackboneError> {
        let kv = w
            .decoder
            .iter()
            .map(|b| {
                Ok((
                    Self::linear(tape, &b.cross_attn.key, encoded)?,
                    Self::linear(tape, &b.cross_attn.value, encoded)?,
                ))
            })
            .collect::<Result<_, NumericsError>>()?;
        Ok(Memory { kv })
    }

    /// Decoder logits (`|ids| × V`) for the decoder input `ids`.
    pub fn decode(&self, tape: &Tape, w: &Weights<Var>, memory: &Memory, ids: &[usize]) -> Result<Var, BackboneError> {
        let emb = self.embed_on(tape, w, ids)?;
        let mut h = self.with_positions(tape, emb)?;
        for (block, &(k, v)) in w.decoder.iter().zip(&memory.kv) {
            let x = Self::norm(tape, &block.norm1, h)?;
            let a = self.self_attend(tape, &block.self_attn, x, true)?;
            h = tape.add(h, a)?;
            let x = Self::norm(tape, &block.norm2, h)?;
            let c = self.attend(tape, &block.cross_attn, x, k, v, false)?;
            h = tape.add(h, c)?;
            let x = Self::norm(tape, &block.norm3, h)?;
            let f = Self::feed_forward(tape, &block.ff_in, &block.ff_out, x)?;
            h = tape.add(h, f)?;
        }
        let h = Self::norm(tape, &w.decoder_norm, h)?;
        let logits = tape.matmul_bt(h, w.embedding)?;
        Ok(tape.scale(logits, 1.0 / (self.config.embed_dim as f64).sqrt())?)
    }

    /// Teacher-forced token-averaged cross entropy of `target` (end-of-sequence
    /// appended) given encoder input rows `input`.
    pub fn loss(&self, tape: &Tape, w: &Weights<Var>, input: Var, target: &[usize]) -> Result<Var, BackboneError> {
        self.check_ids(target)?;
        let encoded = self.encode(tape, w, input)?;
        let memory = self.memory(tape, w, encoded)?;
        let mut dec_in = Vec::with_capacity(target.len() + 1);
        dec_in.push(self.config.bos_id);
        dec_in.extend_from_slice(target);
        let mut labels = target.to_vec();
        labels.push(self.config.eos_id);
        let logits = self.decode(tape, w, &memory, &dec_in)?;
        Ok(tape.cross_entropy(logits, &labels)?)
    }

    /// Greedy decoding from `input` (`n × D` rows). Stops at end-of-sequence
    /// or after `max_len` tokens; argmax ties go to the lowest token id.
    pub fn generate(&self, input: &Tensor, max_len: usize) -> Result<Vec<usize>, BackboneError> {
        if input.shape().len() != 2 || input.cols() != self.config.embed_dim {
            return Err(NumericsError::ShapeMismatch {
                op: "generate",
                detail: format!("input {:?}, embed_dim {}", input.shape(), self.config.embed_dim),
            }
            .into());
        }
        if input.rows() > self.config.max_seq_len {
            return Err(BackboneError::InputTooLong {
                len: input.rows(),
                max: self.config.max_seq_len,
            });
        }
        let mut out = Vec::new();
        if max_len == 0 {
            return Ok(out);
        }
        let tape = Tape::new();
        let w = self.bind_constant(&tape);
        let x = tape.constant(input.clone());
        let encoded = self.encode(&tape, &w, x)?;
        let memory = self.memory(&tape, &w, encoded)?;
        let mut dec_in = vec![self.config.bos_id];
        while out.len() < max_len {
            let logits = tape.value(self.decode(&tape, &w, &memory, &dec_in)?);
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last);
            if next == self.config.eos_id {
                break;
            }
            out.push(next);
            dec_in.push(next);
        }
        Ok(out)
    }

    /// Final encoder states for plain token input (no prompts).
    pub fn encode_tokens(&self, ids: &[usize]) -> Result<Tensor, BackboneError> {
        let tape = Tape::new();
        let w = self.bind_constant(&tape);
        let x = self.embed_on(&tape, &w, ids)?;
        let h = self.encode(&tape, &w, x)?;
        Ok(tape.value(h))
    }

    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        let mut tensors = Vec::new();
        self.weights.map("", &mut |name, p| tensors.push((name.to_string(), p.value.clone())));
        let meta = serde_json::json!({
            "config": self.config,
            "seed": self.seed,
            "frozen": self.frozen,
        });
        container::write(path, "backbone", &meta, &tensors)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        let c = container::read(path)?;
        if c.kind != "backbone" {
            return Err(BackboneError::Checkpoint(format!("expected a backbone, found {:?}", c.kind)));
        }
        let bad = |m: &str| BackboneError::Checkpoint(m.to_string());
        let config: BackboneConfig =
            serde_json::from_value(c.meta["config"].clone()).map_err(|e| bad(&e.to_string()))?;
        let seed = c.meta["seed"].as_u64().ok_or_else(|| bad("missing seed"))?;
        let frozen = c.meta["frozen"].as_bool().ok_or_else(|| bad("missing frozen flag"))?;
        let mut backbone = Self::new(config, seed)?;
        let mut stored = c.tensors.into_iter();
        let mut failure = None;
        backbone.weights.visit_mut("", &mut |name, p| {
            match stored.next() {
                Some((n, t)) if n == name && t.shape() == p.value.shape() => p.value = t,
                Some((n, t)) => {
                    failure.get_or_insert(format!("tensor {n} {:?} does not match {name}", t.shape()));
                }
                None => {
                    failure.get_or_insert(format!("missing tensor {name}"));
                }
            }
        });
        if let Some(f) = failure {
            return Err(BackboneError::Checkpoint(f));
        }
        if stored.next().is_some() {
            return Err(bad("unexpected extra tensors"));
        }
        if frozen {
            backbone.freeze();
        }
        Ok(backbone)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
