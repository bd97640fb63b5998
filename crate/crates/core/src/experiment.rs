//! Experiment plumbing shared by the command line and the acceptance suite:
//! backbone recipes with an on-disk cache, task sources, and multi-seed runs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{mean_loss, pretrain, Backbone, BackboneConfig, BackboneError, PretrainConfig, PretrainExample};
use crate::cl::{self, ClError, Method, Setup, TrainConfig, TrainedRun};
use crate::data::{generate_synthetic_tasks, load_sgd_format, pretraining_corpus, Catalog, DataError, PretrainCorpusConfig, SyntheticSpec, Task, Tokenizer};
use crate::eval::{EvalError, MetricsReport};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Cl(#[from] ClError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("bad pretraining corpus {path} line {line}: {detail}")]
    Corpus { path: PathBuf, line: usize, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Backbone shape without the vocabulary size, which comes from the tokenizer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        let c = BackboneConfig::new(0);
        Self {
            embed_dim: c.embed_dim,
            encoder_layers: c.encoder_layers,
            decoder_layers: c.decoder_layers,
            num_heads: c.num_heads,
            ff_dim: c.ff_dim,
            max_seq_len: c.max_seq_len,
        }
    }
}

impl Architecture {
    pub fn config(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            max_seq_len: self.max_seq_len,
            ..BackboneConfig::new(vocab_size)
        }
    }
}

/// Everything that determines a pretrained backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneRecipe {
    pub architecture: Architecture,
    pub init_seed: u64,
    pub corpus: PretrainCorpusConfig,
    /// JSON-lines file of `{"input": .., "target": ..}` text pairs used in
    /// place of the generated corpus; its tail supplies the held-out split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_file: Option<PathBuf>,
    pub training: PretrainConfig,
    /// Held-out examples used to report cross-entropy before and after.
    pub held_out: usize,
}

impl Default for BackboneRecipe {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            init_seed: 1,
            corpus: PretrainCorpusConfig {
                examples: 40_000,
                ..PretrainCorpusConfig::default()
            },
            corpus_file: None,
            training: PretrainConfig {
                epochs: 3,
                lr: 5e-3,
                ..PretrainConfig::default()
            },
            held_out: 300,
        }
    }
}

const HELD_OUT_SEED: u64 = 0x0ddb_a11;

impl BackboneRecipe {
    /// SHA-256 of the recipe's canonical JSON.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("recipe serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn held_out_corpus(&self, catalog: &Catalog) -> Vec<PretrainExample> {
        let cfg = PretrainCorpusConfig {
            examples: self.held_out,
            seed: self.corpus.seed ^ HELD_OUT_SEED,
            ..self.corpus.clone()
        };
        pretraining_corpus(&cfg, catalog, &catalog.tokenizer())
    }

    /// Builds the corpus, pretrains and freezes a fresh backbone.
    pub fn pretrain(&self, catalog: &Catalog) -> Result<(Backbone, PretrainManifest), ExperimentError> {
        let tok = catalog.tokenizer();
        let (corpus, held) = match &self.corpus_file {
            None => (pretraining_corpus(&self.corpus, catalog, &tok), self.held_out_corpus(catalog)),
            Some(path) => {
                let mut all = load_pretrain_corpus(path, &tok)?;
                if all.len() < 2 {
                    return Err(ExperimentError::Corpus {
                        path: path.clone(),
                        line: 0,
                        detail: format!("need at least 2 examples, found {}", all.len()),
                    });
                }
                let k = self.held_out.min(all.len() / 5).max(1);
                let held = all.split_off(all.len() - k);
                (all, held)
            }
        };
        let fresh = Backbone::new(self.architecture.config(tok.len()), self.init_seed)?;
        let before = mean_loss(&fresh, &held)?;
        let (backbone, report) = pretrain(fresh, &corpus, &self.training)?;
        let after = mean_loss(&backbone, &held)?;
        let manifest = PretrainManifest {
            config_hash: self.config_hash(),
            corpus_hash: corpus_hash(&corpus),
            checksum: backbone.checksum(),
            vocab_size: tok.len(),
            epoch_losses: report.epoch_losses,
            held_out_ce_initial: before,
            held_out_ce_final: after,
            recipe: self.clone(),
        };
        Ok((backbone, manifest))
    }
}

/// One line of a pretraining corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextPair {
    pub input: String,
    pub target: String,
}

/// Reads a JSON-lines corpus of [`TextPair`]s; words outside the tokenizer
/// become `<unk>`. Blank lines are skipped.
pub fn load_pretrain_corpus(path: &Path, tokenizer: &Tokenizer) -> Result<Vec<PretrainExample>, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: TextPair = serde_json::from_str(line).map_err(|e| ExperimentError::Corpus {
            path: path.to_path_buf(),
            line: n + 1,
            detail: e.to_string(),
        })?;
        out.push(PretrainExample {
            input: tokenizer.tokenize(&pair.input),
            target: tokenizer.tokenize(&pair.target),
        });
    }
    Ok(out)
}

/// SHA-256 over every example's token ids, in corpus order.
pub fn corpus_hash(corpus: &[PretrainExample]) -> String {
    let mut h = Sha256::new();
    for ex in corpus {
        for part in [&ex.input, &ex.target] {
            h.update((part.len() as u64).to_le_bytes());
            for &id in part {
                h.update((id as u64).to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Provenance written next to every pretrained checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainManifest {
    pub config_hash: String,
    pub corpus_hash: String,
    pub checksum: String,
    pub vocab_size: usize,
    pub epoch_losses: Vec<f64>,
    pub held_out_ce_initial: f64,
    pub held_out_ce_final: f64,
    pub recipe: BackboneRecipe,
}

impl PretrainManifest {
    pub fn path_for(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("manifest.json")
    }

    pub fn write(&self, path: &Path) -> Result<(), ExperimentError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Manifest {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// Loads `<dir>/<hash>.ckpt` when its manifest and checksum agree with the
/// recipe, otherwise pretrains and stores it there. The flag is true on a
/// cache hit.
pub fn cached_backbone(
    recipe: &BackboneRecipe,
    catalog: &Catalog,
    dir: &Path,
) -> Result<(Backbone, PretrainManifest, bool), ExperimentError> {
    let hash = recipe.config_hash();
    let ckpt = dir.join(format!("backbone-{}.ckpt", &hash[..16]));
    let manifest_path = PretrainManifest::path_for(&ckpt);
    if ckpt.exists() && manifest_path.exists() {
        let manifest = PretrainManifest::read(&manifest_path)?;
        let backbone = Backbone::load(&ckpt)?;
        if manifest.config_hash == hash && backbone.checksum() == manifest.checksum && backbone.is_frozen() {
            return Ok((backbone, manifest, true));
        }
    }
    let (backbone, manifest) = recipe.pretrain(catalog)?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    backbone.save(&ckpt)?;
    manifest.write(&manifest_path)?;
    Ok((backbone, manifest, false))
}

/// Where the task sequence comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated tasks; without a pinned seed each run seed also seeds the data.
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// A directory in the corpus format of [`crate::data::load_sgd_format`].
    Corpus { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            spec: SyntheticSpec::default(),
            seed: None,
        }
    }
}

impl DataSource {
    pub fn tasks(&self, catalog: &Catalog, run_seed: u64) -> Result<Vec<Task>, ExperimentError> {
        Ok(match self {
            DataSource::Synthetic { spec, seed } => generate_synthetic_tasks(spec, catalog, seed.unwrap_or(run_seed))?,
            DataSource::Corpus { path } => load_sgd_format(path)?,
        })
    }
}

/// One seed of one method.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub run: TrainedRun,
    pub metrics: MetricsReport,
}

pub fn run_seed(
    method: Method,
    backbone: Arc<Backbone>,
    catalog: &Catalog,
    source: &DataSource,
    config: &TrainConfig,
    seed: u64,
) -> Result<SeedOutcome, ExperimentError> {
    let config = TrainConfig {
        seed,
        ..config.clone()
    };
    let setup = Setup::new(backbone, Arc::new(catalog.tokenizer()), config.key_dim, config.context_seed)?;
    let tasks = source.tasks(catalog, seed)?;
    let data = setup.prepare(&tasks)?;
    let run = cl::train(method, &setup, &data, &config)?;
    let metrics = run.metrics()?;
    Ok(SeedOutcome { seed, run, metrics })
}

/// Median with min and max.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        Some(Self {
            median,
            min: v[0],
            max: v[n - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_index: usize,
    pub final_jga: Spread,
}

/// Aggregate over the seeds of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub seeds: Vec<u64>,
    pub jga_avg: Spread,
    pub acc_key: Option<Spread>,
    pub tasks: Vec<TaskSummary>,
}

impl Summary {
    pub fn of(reports: &[MetricsReport]) -> Option<Self> {
        let first = reports.first()?;
        let jga: Vec<f64> = reports.iter().map(|r| r.jga_avg).collect();
        let keys: Vec<f64> = reports.iter().filter_map(|r| r.acc_key).collect();
        let t = reports.iter().map(|r| r.tasks.len()).min().unwrap_or(0);
        let tasks = (0..t)
            .map(|i| TaskSummary {
                task_index: i,
                final_jga: Spread::of(&reports.iter().map(|r| r.tasks[i].final_jga).collect::<Vec<_>>()).expect("non-empty"),
            })
            .collect();
        Some(Self {
            method: first.method.clone(),
            seeds: reports.iter().map(|r| r.seed).collect(),
            jga_avg: Spread::of(&jga)?,
            acc_key: Spread::of(&keys),
            tasks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_of_odd_and_even() {
        let s = Spread::of(&[0.3, 0.1, 0.2]).unwrap();
        assert_eq!((s.median, s.min, s.max), (0.2, 0.1, 0.3));
        assert_eq!(Spread::of(&[1.0, 0.0]).unwrap().median, 0.5);
        assert!(Spread::of(&[]).is_none());
    }

    #[test]
    fn recipe_hash_tracks_every_field() {
        let a = BackboneRecipe::default();
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.corpus.seed += 1;
        assert_ne!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.architecture.ff_dim = 64;
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn corpus_hash_is_order_sensitive() {
        let x = PretrainExample { input: vec![4, 5], target: vec![6] };
        let y = PretrainExample { input: vec![4], target: vec![5, 6] };
        assert_ne!(corpus_hash(&[x.clone(), y.clone()]), corpus_hash(&[y.clone(), x.clone()]));
        assert_ne!(corpus_hash(&[x]), corpus_hash(&[y]));
    }

    #[test]
    fn cache_round_trip() {
        let recipe = BackboneRecipe {
            architecture: Architecture {
                embed_dim: 8,
                encoder_layers: 1,
                decoder_layers: 1,
                num_heads: 1,
                ff_dim: 8,
                max_seq_len: 128,
            },
            corpus: PretrainCorpusConfig {
                examples: 0,
                ..PretrainCorpusConfig::default()
            },
            held_out: 4,
            ..BackboneRecipe::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::standard();
        let (a, m, hit) = cached_backbone(&recipe, &cat, dir.path()).unwrap();
        assert!(!hit && a.is_frozen());
        let (b, m2, hit) = cached_backbone(&recipe, &cat, dir.path()).unwrap();
        assert!(hit);
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(m, m2);
    }

    #[test]
    fn data_source_seeding() {
        let cat = Catalog::standard();
        let free = DataSource::default();
        assert_ne!(free.tasks(&cat, 1).unwrap(), free.tasks(&cat, 2).unwrap());
        let pinned = DataSource::Synthetic {
            spec: SyntheticSpec::default(),
            seed: Some(5),
        };
        assert_eq!(pinned.tasks(&cat, 1).unwrap(), pinned.tasks(&cat, 2).unwrap());
    }
}
