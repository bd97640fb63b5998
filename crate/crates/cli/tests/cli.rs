use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use ppdst_core::backbone::Backbone;
use ppdst_core::cl::Setup;
use ppdst_core::data::{generate_synthetic_tasks, Catalog, SyntheticSpec};
use ppdst_core::eval::MetricsReport;
use ppdst_core::experiment::{PretrainManifest, Summary};

const CONFIG: &str = r#"
method = "ppt"
output_dir = "runs/ppt"
seeds = [0, 1]

[backbone]
checkpoint = "bb.ckpt"

[backbone.recipe]
held_out = 20

[backbone.recipe.architecture]
embed_dim = 16
encoder_layers = 1
decoder_layers = 1
num_heads = 2
ff_dim = 32

[backbone.recipe.corpus]
examples = 300

[backbone.recipe.training]
epochs = 1

[data]
kind = "synthetic"

[data.spec]
num_tasks = 2
dialogs_per_task = 100

[train]
epochs = 1
per_task = 2
pool_size = 4
prompt_len = 2
key_dim = 8
buffer_per_task = 2
max_decode_len = 12
"#;

const CONFIG_ERROR: i32 = 2;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.config(), CONFIG).unwrap();
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> PathBuf {
        self.path("exp.toml")
    }

    fn ppdst(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ppdst"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("PPDST_OUTPUT_ROOT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.ppdst(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn pretrained(self) -> Self {
        self.ok(&["pretrain", "exp.toml"]);
        self
    }
}

fn read<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pretrain_is_reproducible_and_records_hashes() {
    let ws = Workspace::new().pretrained();
    let first = Backbone::load(&ws.path("bb.ckpt")).unwrap().checksum();
    let manifest = PretrainManifest::read(&ws.path("bb.manifest.json")).unwrap();
    assert_eq!(manifest.checksum, first);
    assert_eq!(manifest.config_hash.len(), 64);
    assert_eq!(manifest.corpus_hash.len(), 64);
    assert_eq!(manifest.config_hash, manifest.recipe.config_hash());

    let refused = ws.ppdst(&["pretrain", "exp.toml"]);
    assert_eq!(refused.status.code(), Some(CONFIG_ERROR));
    ws.ok(&["pretrain", "exp.toml", "--overwrite"]);
    assert_eq!(Backbone::load(&ws.path("bb.ckpt")).unwrap().checksum(), first);
}

#[test]
fn missing_paths_are_config_errors() {
    let ws = Workspace::new();
    let out = ws.ppdst(&["pretrain", "exp.toml", "--set", "backbone.recipe.corpus_file=\"nope.jsonl\""]);
    assert_eq!(out.status.code(), Some(CONFIG_ERROR));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));
    assert!(!ws.path("bb.ckpt").exists());

    let corpus = CONFIG.replace("kind = \"synthetic\"", "kind = \"corpus\"\npath = \"missing_dir\"").replace(
        "[data.spec]\nnum_tasks = 2\ndialogs_per_task = 100\n",
        "",
    );
    fs::write(ws.path("corpus.toml"), corpus).unwrap();
    assert_eq!(ws.ppdst(&["pretrain", "corpus.toml"]).status.code(), Some(CONFIG_ERROR));

    assert_eq!(ws.ppdst(&["run", "exp.toml"]).status.code(), Some(CONFIG_ERROR));
    assert_eq!(ws.ppdst(&["run", "nowhere.toml"]).status.code(), Some(CONFIG_ERROR));
}

#[test]
fn pretraining_from_a_text_corpus_file() {
    let ws = Workspace::new();
    let lines: String = (0..40)
        .map(|i| format!("{{\"input\": \"copy paris {i} london\", \"target\": \"paris london\"}}\n"))
        .collect();
    fs::write(ws.path("pairs.jsonl"), lines).unwrap();
    ws.ok(&["pretrain", "exp.toml", "--set", "backbone.recipe.corpus_file=\"pairs.jsonl\""]);
    let manifest = PretrainManifest::read(&ws.path("bb.manifest.json")).unwrap();
    assert!(manifest.recipe.corpus_file.is_some());

    fs::write(ws.path("bad.jsonl"), "{\"input\": 3}\n").unwrap();
    let out = ws.ppdst(&["pretrain", "exp.toml", "--overwrite", "--set", "backbone.recipe.corpus_file=\"bad.jsonl\""]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn run_writes_one_directory_per_seed_and_a_summary() {
    let ws = Workspace::new().pretrained();
    ws.ok(&["run", "exp.toml"]);
    let run = ws.path("runs/ppt");
    for seed in [0, 1] {
        let dir = run.join(format!("seed_{seed}"));
        let metrics: MetricsReport = read(&dir.join("metrics.json"));
        assert_eq!(metrics.seed, seed);
        assert_eq!(metrics.tasks.len(), 2);
        assert!(dir.join("metrics.csv").is_file());
        assert!(dir.join("accuracy.json").is_file());
        assert!(dir.join("selection_log.jsonl").is_file());
        assert!(dir.join("pools/after_task_0.bin").is_file());
        assert!(dir.join("pools/after_task_1.bin").is_file());
    }
    let summary: Summary = read(&run.join("summary.json"));
    assert_eq!(summary.seeds, vec![0, 1]);
    assert!(summary.jga_avg.min <= summary.jga_avg.median && summary.jga_avg.median <= summary.jga_avg.max);
    assert!(run.join("config.toml").is_file());

    let again = ws.ppdst(&["run", "exp.toml"]);
    assert_eq!(again.status.code(), Some(CONFIG_ERROR));

    let eval = ws.ok(&["eval", "runs/ppt"]);
    assert_eq!(eval.matches("matches stored metrics").count(), 2, "{eval}");
}

#[test]
fn rerun_from_snapshot_is_identical() {
    let ws = Workspace::new().pretrained();
    fs::write(ws.path("r.toml"), CONFIG.replace("seeds = [0, 1]", "seeds = [3]")).unwrap();
    ws.ok(&["run", "r.toml", "--set", "method=\"ppt_r\""]);
    ws.ok(&["run", "runs/ppt/config.toml", "--set", "output_dir=\"replay\""]);
    let a = fs::read_to_string(ws.path("runs/ppt/seed_3/accuracy.json")).unwrap();
    let b = fs::read_to_string(ws.path("runs/ppt/replay/seed_3/accuracy.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ocpt_runs_emit_no_selection_log() {
    let ws = Workspace::new().pretrained();
    ws.ok(&["run", "exp.toml", "--set", "method=\"ocpt\"", "--set", "output_dir=\"runs/ocpt\""]);
    let dir = ws.path("runs/ocpt/seed_0");
    assert!(dir.join("metrics.json").is_file());
    assert!(!dir.join("selection_log.jsonl").exists());
}

#[test]
fn capacity_errors_are_actionable() {
    let ws = Workspace::new().pretrained();
    let out = ws.ppdst(&["run", "exp.toml", "--set", "train.pool_size=3"]);
    assert_eq!(out.status.code(), Some(CONFIG_ERROR));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("pool_size"), "{msg}");
    assert!(!ws.path("runs/ppt").exists());
}

#[test]
fn output_root_override() {
    let ws = Workspace::new().pretrained();
    let root = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ppdst"))
        .args(["run", "exp.toml", "--set", "train.epochs=1"])
        .current_dir(ws.dir.path())
        .env("PPDST_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.path().join("runs/ppt/seed_1/metrics.json").is_file());
    assert!(!ws.path("runs").exists());
}

#[test]
fn exported_contexts_match_recomputation() {
    let ws = Workspace::new().pretrained();
    ws.ok(&["export-contexts", "exp.toml", "--seed", "1", "--out", "ctx.csv"]);
    let text = fs::read_to_string(ws.path("ctx.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 2 + 8);

    let mut backbone = Backbone::load(&ws.path("bb.ckpt")).unwrap();
    backbone.freeze();
    let catalog = Catalog::standard();
    let setup = Setup::new(Arc::new(backbone), Arc::new(catalog.tokenizer()), 8, 17).unwrap();
    let spec = SyntheticSpec {
        num_tasks: 2,
        dialogs_per_task: 100,
        ..SyntheticSpec::default()
    };
    let data = setup.prepare(&generate_synthetic_tasks(&spec, &catalog, 1).unwrap()).unwrap();
    let expected: Vec<(String, Vec<f64>)> = data
        .tasks
        .iter()
        .flat_map(|t| t.test.iter().map(|s| (t.task_id.clone(), s.context.data().to_vec())))
        .collect();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), expected.len());
    for (row, (task, c)) in rows.iter().zip(&expected) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 2 + 8);
        assert_eq!(cols[0], task);
        let parsed: Vec<f64> = cols[2..].iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(&parsed, c);
    }
}

#[test]
fn malformed_overrides_are_config_errors() {
    let ws = Workspace::new();
    for bad in ["train=3", "train.epochz=3", "noequals", "seeds=[4]"] {
        let out = ws.ppdst(&["pretrain", "exp.toml", "--set", bad]);
        assert_eq!(out.status.code(), Some(CONFIG_ERROR), "{bad}");
    }
}
