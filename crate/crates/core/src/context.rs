//! Frozen context encoder: mean-pooled final encoder states of the frozen
//! backbone, mapped to the key space by a fixed seeded projection.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneError};
use crate::numerics::{matmul, Tensor};

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("context input is empty")]
    EmptyInput,
    #[error("backbone must be frozen before encoding contexts")]
    NotFrozen,
    #[error("projection expects embed dim {expected}, backbone has {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// A point in key space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextVector(pub Vec<f64>);

impl ContextVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn distance(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextEncoder {
    projection: Tensor,
    seed: u64,
}

impl ContextEncoder {
    /// Projection entries are drawn from N(0, 1/(embed_dim·key_dim)), so a
    /// context's norm tracks the RMS of the pooled state whatever `key_dim` is.
    pub fn new(embed_dim: usize, key_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / ((embed_dim * key_dim) as f64).sqrt()).expect("positive std");
        Self {
            projection: Tensor::from_fn(vec![embed_dim, key_dim], |_| normal.sample(&mut rng)),
            seed,
        }
    }

    pub fn key_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn encode(&self, backbone: &Backbone, ids: &[usize]) -> Result<ContextVector, ContextError> {
        if ids.is_empty() {
            return Err(ContextError::EmptyInput);
        }
        if !backbone.is_frozen() {
            return Err(ContextError::NotFrozen);
        }
        if backbone.embed_dim() != self.projection.rows() {
            return Err(ContextError::DimMismatch {
                expected: self.projection.rows(),
                found: backbone.embed_dim(),
            });
        }
        let states = backbone.encode_tokens(ids)?;
        let d = states.cols();
        let mut pooled = vec![0.0; d];
        for r in 0..states.rows() {
            for (p, v) in pooled.iter_mut().zip(states.row(r)) {
                *p += v;
            }
        }
        let n = states.rows() as f64;
        let pooled = Tensor::new(vec![1, d], pooled.into_iter().map(|v| v / n).collect()).expect("shape");
        let out = matmul(&pooled, &self.projection).expect("shape checked");
        Ok(ContextVector(out.into_vec()))
    }
}

/// One exported row: task name, turn key and the context vector.
pub struct ContextRow {
    pub task_id: String,
    pub turn_key: String,
    pub vector: ContextVector,
}

/// Writes `task_id,turn_key,c_0,...,c_{D_K-1}` with a header line.
pub fn write_context_csv(path: &Path, rows: &[ContextRow]) -> Result<(), ContextError> {
    let io = |source| ContextError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let dim = rows.first().map_or(0, |r| r.vector.dim());
    let header: Vec<String> = ["task_id".to_string(), "turn_key".to_string()]
        .into_iter()
        .chain((0..dim).map(|i| format!("c_{i}")))
        .collect();
    writeln!(f, "{}", header.join(",")).map_err(io)?;
    for r in rows {
        let mut line = format!("{},{}", r.task_id, r.turn_key);
        for v in &r.vector.0 {
            line.push(',');
            line.push_str(&format!("{v:?}"));
        }
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn frozen() -> Backbone {
        let mut b = Backbone::new(BackboneConfig::new(30), 3).unwrap();
        b.freeze();
        b
    }

    #[test]
    fn deterministic_with_fixed_dim() {
        let b = frozen();
        let enc = ContextEncoder::new(64, 32, 5);
        let a = enc.encode(&b, &[4, 5, 6]).unwrap();
        assert_eq!(a, enc.encode(&b, &[4, 5, 6]).unwrap());
        assert_eq!(a.dim(), 32);
        assert_eq!(enc.encode(&b, &[7; 40]).unwrap().dim(), 32);
        assert_eq!(ContextEncoder::new(64, 32, 5), enc);
    }

    #[test]
    fn errors() {
        let b = frozen();
        let enc = ContextEncoder::new(64, 8, 0);
        assert!(matches!(enc.encode(&b, &[]), Err(ContextError::EmptyInput)));
        let live = Backbone::new(BackboneConfig::new(30), 3).unwrap();
        assert!(matches!(enc.encode(&live, &[1]), Err(ContextError::NotFrozen)));
        assert!(matches!(ContextEncoder::new(16, 8, 0).encode(&b, &[1]), Err(ContextError::DimMismatch { .. })));
    }

    #[test]
    fn duplicated_tokens_stay_close() {
        let b = frozen();
        let enc = ContextEncoder::new(64, 32, 1);
        let x = [5, 9, 12, 20];
        let doubled: Vec<usize> = x.iter().flat_map(|&t| [t, t]).collect();
        let a = enc.encode(&b, &x).unwrap();
        let c = enc.encode(&b, &doubled).unwrap();
        let norm = a.distance(&vec![0.0; 32]);
        assert!(a.distance(c.as_slice()) < norm, "{} vs {}", a.distance(c.as_slice()), norm);
    }
}
