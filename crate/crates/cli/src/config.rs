use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ppdst_core::cl::{KeyLoss, Method, TrainConfig};
use ppdst_core::data::Catalog;
use ppdst_core::experiment::{BackboneRecipe, DataSource};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_VAR: &str = "PPDST_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub recipe: BackboneRecipe,
}

/// A declarative experiment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub backbone: BackboneSection,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Applies `path=value` overrides to a parsed TOML document. Only existing
/// scalar fields or absent keys inside existing tables may be set.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<(), CliError> {
    for o in overrides {
        let (path, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {o:?} is not of the form key=value")))?;
        let value = parse_scalar(raw.trim());
        let keys: Vec<&str> = path.trim().split('.').collect();
        let (last, parents) = keys.split_last().expect("split yields one part");
        let mut table = &mut *doc;
        for k in parents {
            table = table
                .entry(k.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| CliError::Config(format!("override {path}: {k} is not a table")))?;
        }
        if let Some(existing) = table.get(*last) {
            if existing.is_table() || existing.is_array() {
                return Err(CliError::Config(format!("override {path}: only scalar fields can be overridden")));
            }
        }
        table.insert(last.to_string(), value);
    }
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => match t.remove("v") {
            Some(v) if !v.is_table() && !v.is_array() => v,
            _ => toml::Value::String(raw.to_string()),
        },
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    /// Reads a config file, applies overrides and resolves relative paths
    /// against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        apply_overrides(&mut doc, overrides)?;
        let mut cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.resolve(base, std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).as_deref());
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path, output_root: Option<&Path>) {
        let join = |p: &Path, root: &Path| if p.is_relative() { root.join(p) } else { p.to_path_buf() };
        self.backbone.checkpoint = join(&self.backbone.checkpoint, base);
        if let Some(f) = &self.backbone.recipe.corpus_file {
            self.backbone.recipe.corpus_file = Some(join(f, base));
        }
        if let DataSource::Corpus { path } = &mut self.data {
            *path = join(path, base);
        }
        self.output_dir = join(&self.output_dir, output_root.unwrap_or(base));
    }

    /// Checks everything that can be checked without pretraining or training.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        let unique: HashSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            return Err(CliError::Config(format!("duplicate seeds in {:?}", self.seeds)));
        }
        if let Some(f) = &self.backbone.recipe.corpus_file {
            if !f.is_file() {
                return Err(CliError::Config(format!("pretraining corpus file {} does not exist", f.display())));
            }
        }
        if let DataSource::Corpus { path } = &self.data {
            if !path.is_dir() {
                return Err(CliError::Config(format!("corpus directory {} does not exist", path.display())));
            }
        }
        let tasks = self
            .data
            .tasks(&Catalog::standard(), self.seeds[0])
            .map_err(|e| CliError::Config(format!("data: {e}")))?
            .len();
        if self.train.key_loss.is_some() && self.method != Method::PptR {
            return Err(CliError::Config(format!(
                "train.key_loss only applies to ppt_r, not {}",
                self.method.name()
            )));
        }
        if self.train.key_loss == Some(KeyLoss::Plain) {
            eprintln!("note: ppt_r with key_loss = \"plain\" is the ordinary-key-loss ablation");
        }
        self.train.validate(tasks).map_err(|e| CliError::Config(format!("train: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
method = "ppt"
output_dir = "out"

[backbone]
checkpoint = "bb.ckpt"
"#;

    fn parse(text: &str, overrides: &[&str]) -> Result<ExperimentConfig, CliError> {
        let mut doc: toml::Table = text.parse().unwrap();
        apply_overrides(&mut doc, &overrides.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
        toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = parse(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.train, TrainConfig::desk());
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.data, DataSource::default());
    }

    #[test]
    fn scalar_overrides_apply() {
        let cfg = parse(MINIMAL, &["train.epochs=3", "method=ocpt", "train.lr=0.5"]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.method, Method::Ocpt);
    }

    #[test]
    fn non_scalar_overrides_are_rejected() {
        assert!(matches!(parse(MINIMAL, &["backbone=1"]), Err(CliError::Config(_))));
        assert!(matches!(parse(MINIMAL, &["seeds"]), Err(CliError::Config(_))));
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        assert!(parse(MINIMAL, &["train.epoch=3"]).is_err());
        assert!(parse(MINIMAL, &["method=adaptercl"]).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_and_output_root() {
        let mut cfg = parse(MINIMAL, &[]).unwrap();
        cfg.resolve(Path::new("/cfg"), Some(Path::new("/scratch")));
        assert_eq!(cfg.backbone.checkpoint, Path::new("/cfg/bb.ckpt"));
        assert_eq!(cfg.output_dir, Path::new("/scratch/out"));
        let mut cfg = parse(MINIMAL, &["output_dir=\"/abs\""]).unwrap();
        cfg.resolve(Path::new("/cfg"), Some(Path::new("/scratch")));
        assert_eq!(cfg.output_dir, Path::new("/abs"));
    }

    #[test]
    fn key_loss_needs_ppt_r() {
        let mut cfg = parse(MINIMAL, &["train.key_loss=\"bce\""]).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        cfg.method = Method::PptR;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn shipped_example_is_valid() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_ppt_r.toml");
        let cfg = ExperimentConfig::load(&path, &[]).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.method, Method::PptR);
        assert_eq!(cfg.train, TrainConfig::desk());
    }

    #[test]
    fn capacity_is_checked_up_front() {
        let cfg = parse(MINIMAL, &["train.pool_size=10"]).unwrap();
        let Err(CliError::Config(msg)) = cfg.validate() else { panic!() };
        assert!(msg.contains("pool"), "{msg}");
    }
}
