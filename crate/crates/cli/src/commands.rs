use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use ppdst_core::backbone::Backbone;
use ppdst_core::cl::{metrics_report, replay_checkpoints, Evaluation, Setup, TrainConfig};
use ppdst_core::data::Catalog;
use ppdst_core::eval::{JgaReport, MetricsReport, SelectionLogEntry};
use ppdst_core::experiment::{run_seed, PretrainManifest, Summary};
use ppdst_core::pool::PromptPool;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const SUMMARY: &str = "summary.json";
pub const POOL_DIR: &str = "pools";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    write(path, serde_json::to_string_pretty(value)?)
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let cfg = ExperimentConfig::load(path, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_backbone(cfg: &ExperimentConfig) -> Result<Arc<Backbone>, CliError> {
    let path = &cfg.backbone.checkpoint;
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "backbone checkpoint {} does not exist; run `ppdst pretrain` first",
            path.display()
        )));
    }
    let mut backbone = Backbone::load(path).with_context(|| format!("loading {}", path.display()))?;
    let manifest = PretrainManifest::path_for(path);
    if manifest.is_file() {
        let m = PretrainManifest::read(&manifest).map_err(anyhow::Error::from)?;
        if m.checksum != backbone.checksum() {
            return Err(CliError::Runtime(anyhow!(
                "checkpoint {} does not match its manifest checksum",
                path.display()
            )));
        }
    }
    backbone.freeze();
    Ok(Arc::new(backbone))
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

pub fn pretrain(config: &Path, overrides: &[String], overwrite: bool) -> Result<(), CliError> {
    let cfg = load_config(config, overrides)?;
    let ckpt = &cfg.backbone.checkpoint;
    if ckpt.exists() && !overwrite {
        return Err(CliError::Config(format!(
            "checkpoint {} already exists; pass --overwrite to replace it",
            ckpt.display()
        )));
    }
    let recipe = &cfg.backbone.recipe;
    eprintln!("pretraining backbone {} ...", &recipe.config_hash()[..16]);
    let (backbone, manifest) = recipe.pretrain(&Catalog::standard()).map_err(anyhow::Error::from)?;
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    backbone.save(ckpt).map_err(anyhow::Error::from)?;
    manifest.write(&PretrainManifest::path_for(ckpt)).map_err(anyhow::Error::from)?;
    println!("checkpoint {}", ckpt.display());
    println!("checksum {}", manifest.checksum);
    println!("held-out loss {:.4} -> {:.4}", manifest.held_out_ce_initial, manifest.held_out_ce_final);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvaluationRecord {
    after_task: usize,
    reports: Vec<JgaReport>,
}

#[derive(Serialize, Deserialize)]
struct SelectionRecord {
    after_task: usize,
    #[serde(flatten)]
    entry: SelectionLogEntry,
}

fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

fn pool_path(dir: &Path, after_task: usize) -> PathBuf {
    dir.join(POOL_DIR).join(format!("after_task_{after_task}.bin"))
}

fn print_summary(summary: &Summary) {
    let acc = summary
        .acc_key
        .map(|s| format!("{:.3} [{:.3}, {:.3}]", s.median, s.min, s.max))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "{} over seeds {:?}: jga_avg {:.3} [{:.3}, {:.3}], acc_key {acc}",
        summary.method, summary.seeds, summary.jga_avg.median, summary.jga_avg.min, summary.jga_avg.max
    );
}

pub fn run(config: &Path, overrides: &[String], overwrite: bool) -> Result<(), CliError> {
    let mut cfg = load_config(config, overrides)?;
    let backbone = load_backbone(&cfg)?;
    let out = cfg.output_dir.clone();
    if out.exists() && fs::read_dir(&out).map(|mut d| d.next().is_some()).unwrap_or(true) {
        if !overwrite {
            return Err(CliError::Config(format!(
                "output directory {} is not empty; pass --overwrite to replace it",
                out.display()
            )));
        }
        fs::remove_dir_all(&out).with_context(|| format!("clearing {}", out.display()))?;
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.backbone.checkpoint = absolute(&cfg.backbone.checkpoint)?;
    if let Some(f) = &cfg.backbone.recipe.corpus_file {
        cfg.backbone.recipe.corpus_file = Some(absolute(f)?);
    }
    if let ppdst_core::experiment::DataSource::Corpus { path } = &mut cfg.data {
        *path = absolute(path)?;
    }
    cfg.output_dir = absolute(&out)?;
    let snapshot = toml::to_string(&cfg).map_err(anyhow::Error::from)?;
    write(&out.join(CONFIG_SNAPSHOT), snapshot)?;

    let catalog = Catalog::standard();
    let mut reports = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let started = std::time::Instant::now();
        let outcome = run_seed(cfg.method, backbone.clone(), &catalog, &cfg.data, &cfg.train, seed).map_err(anyhow::Error::from)?;
        let dir = seed_dir(&out, seed);
        fs::create_dir_all(dir.join(POOL_DIR)).with_context(|| format!("creating {}", dir.display()))?;
        let run = &outcome.run;
        write_json(&dir.join("accuracy.json"), &run.accuracy)?;
        write_json(&dir.join("metrics.json"), &outcome.metrics)?;
        write(&dir.join("metrics.csv"), outcome.metrics.to_csv())?;
        write_json(&dir.join("train_log.json"), &run.epochs)?;
        let records: Vec<EvaluationRecord> = run
            .evaluations
            .iter()
            .map(|e| EvaluationRecord {
                after_task: e.after_task,
                reports: e.reports.clone(),
            })
            .collect();
        write_json(&dir.join("evaluations.json"), &records)?;
        if cfg.method.selects_keys() {
            let mut log = String::new();
            for e in &run.evaluations {
                for s in &e.selections {
                    let rec = SelectionRecord {
                        after_task: e.after_task,
                        entry: s.clone(),
                    };
                    log.push_str(&serde_json::to_string(&rec).map_err(anyhow::Error::from)?);
                    log.push('\n');
                }
            }
            write(&dir.join("selection_log.jsonl"), log)?;
        }
        for (pool, ev) in run.checkpoints.iter().zip(&run.evaluations) {
            let meta = serde_json::json!({
                "after_task": ev.after_task,
                "method": cfg.method.name(),
                "seed": seed,
                "backbone_checksum": run.backbone_checksum,
            });
            pool.save(&pool_path(&dir, ev.after_task), meta).map_err(anyhow::Error::from)?;
        }
        println!(
            "seed {seed}: jga_avg {:.3}, acc_key {} ({:.1}s)",
            outcome.metrics.jga_avg,
            outcome.metrics.acc_key.map_or("n/a".into(), |a| format!("{a:.3}")),
            started.elapsed().as_secs_f64()
        );
        reports.push(outcome.metrics);
    }
    let summary = Summary::of(&reports).ok_or_else(|| anyhow!("no seeds ran"))?;
    write_json(&out.join(SUMMARY), &summary)?;
    print_summary(&summary);
    println!("run directory {}", out.display());
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_pools(dir: &Path) -> anyhow::Result<Vec<(usize, PromptPool)>> {
    let pool_dir = dir.join(POOL_DIR);
    let mut pools = Vec::new();
    for entry in fs::read_dir(&pool_dir).with_context(|| format!("listing {}", pool_dir.display()))? {
        let path = entry?.path();
        let (pool, meta) = PromptPool::load(&path).with_context(|| format!("loading {}", path.display()))?;
        let after = meta["after_task"]
            .as_u64()
            .ok_or_else(|| anyhow!("{} has no after_task", path.display()))?;
        pools.push((after as usize, pool));
    }
    pools.sort_by_key(|(t, _)| *t);
    Ok(pools)
}

pub fn eval(run_dir: &Path) -> Result<(), CliError> {
    let snapshot = run_dir.join(CONFIG_SNAPSHOT);
    let text = fs::read_to_string(&snapshot)
        .map_err(|e| CliError::Config(format!("{} is not a run directory: {e}", run_dir.display())))?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", snapshot.display())))?;
    cfg.validate()?;
    let backbone = load_backbone(&cfg)?;
    let catalog = Catalog::standard();
    let setup = Setup::new(backbone.clone(), Arc::new(catalog.tokenizer()), cfg.train.key_dim, cfg.train.context_seed)
        .map_err(anyhow::Error::from)?;
    let mut reports = Vec::new();
    let mut mismatched = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(run_dir, seed);
        let stored: MetricsReport = read_json(&dir.join("metrics.json"))?;
        let config = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let tasks = cfg.data.tasks(&catalog, seed).map_err(anyhow::Error::from)?;
        let data = setup.prepare(&tasks).map_err(anyhow::Error::from)?;
        let pools = load_pools(&dir)?;
        let (accuracy, evaluations) = replay_checkpoints(cfg.method, &setup, &data, &config, &pools).map_err(anyhow::Error::from)?;
        let last: &Evaluation = evaluations.last().ok_or_else(|| anyhow!("{} holds no pool checkpoints", dir.display()))?;
        let report = metrics_report(cfg.method, &config, &data.task_ids(), &backbone.checksum(), &accuracy, last)
            .map_err(anyhow::Error::from)?;
        let same = report == stored;
        println!(
            "seed {seed}: jga_avg {:.3}, acc_key {} ({})",
            report.jga_avg,
            report.acc_key.map_or("n/a".into(), |a| format!("{a:.3}")),
            if same { "matches stored metrics" } else { "DIFFERS from stored metrics" }
        );
        if !same {
            mismatched.push(seed);
        }
        reports.push(report);
    }
    let summary = Summary::of(&reports).ok_or_else(|| anyhow!("no seeds configured"))?;
    print_summary(&summary);
    if !mismatched.is_empty() {
        return Err(CliError::Runtime(anyhow!("recomputed metrics differ for seeds {mismatched:?}")));
    }
    Ok(())
}

pub fn export_contexts(config: &Path, overrides: &[String], seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(config, overrides)?;
    let backbone = load_backbone(&cfg)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let catalog = Catalog::standard();
    let setup = Setup::new(backbone, Arc::new(catalog.tokenizer()), cfg.train.key_dim, cfg.train.context_seed)
        .map_err(anyhow::Error::from)?;
    let tasks = cfg.data.tasks(&catalog, seed).map_err(anyhow::Error::from)?;
    let data = setup.prepare(&tasks).map_err(anyhow::Error::from)?;
    let mut csv = String::from("task_id,turn_key");
    for i in 0..cfg.train.key_dim {
        let _ = write!(csv, ",c{i}");
    }
    csv.push('\n');
    let mut rows = 0;
    for task in &data.tasks {
        for s in &task.test {
            let _ = write!(csv, "{},{}:{}", task.task_id, s.turn.dialog, s.turn.turn);
            for v in s.context.data() {
                let _ = write!(csv, ",{v:?}");
            }
            csv.push('\n');
            rows += 1;
        }
    }
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => cfg.output_dir.join(format!("contexts_seed_{seed}.csv")),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write(&path, csv)?;
    println!("{rows} context vectors written to {}", path.display());
    Ok(())
}
