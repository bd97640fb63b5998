use super::*;
use crate::backbone::BackboneConfig;
use crate::data::{Catalog, SyntheticSpec};
use crate::numerics::Parameter;

fn tiny_setup(key_dim: usize) -> Setup {
    let tok = Catalog::standard().tokenizer();
    let mut cfg = BackboneConfig::new(tok.len());
    cfg.embed_dim = 16;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.ff_dim = 32;
    let mut b = Backbone::new(cfg, 5).unwrap();
    b.freeze();
    Setup::new(Arc::new(b), Arc::new(tok), key_dim, 3).unwrap()
}

fn tiny_tasks(n: usize) -> Vec<Task> {
    let spec = SyntheticSpec {
        num_tasks: n.max(2),
        ..SyntheticSpec::default()
    };
    let mut tasks = crate::data::generate_synthetic_tasks(&spec, &Catalog::standard(), 9).unwrap();
    tasks.truncate(n);
    for t in &mut tasks {
        t.train.truncate(6);
        t.test.truncate(3);
    }
    tasks
}

fn tiny_config(tasks: usize) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 3,
        lr: 0.5,
        lambda: 2.0,
        per_task: 2,
        pool_size: 2 * tasks,
        prompt_len: 2,
        key_dim: 8,
        buffer_per_task: 2,
        seed: 4,
        context_seed: 3,
        key_loss: None,
        max_decode_len: 6,
    }
}

fn pool_values(p: &PromptPool, range: impl Iterator<Item = usize>) -> Vec<(Tensor, Tensor)> {
    range.map(|i| (p.prompt(i).clone(), p.key(i).clone())).collect()
}

#[test]
fn ppt_updates_only_the_task_block() {
    let setup = tiny_setup(8);
    let data = setup.prepare(&tiny_tasks(3)).unwrap();
    let cfg = tiny_config(3);
    let run = train_ppt(&setup, &data, &cfg).unwrap();
    let init = PromptPool::new(cfg.pool_config(16), setup.backbone.embedding_table(), cfg.seed).unwrap();
    let before = [&init, &run.checkpoints[0], &run.checkpoints[1]];
    for t in 0..3 {
        let after = &run.checkpoints[t];
        let outside = (0..6).filter(|i| !(2 * t..2 * t + 2).contains(i));
        let untouched: Vec<usize> = outside.collect();
        assert_eq!(
            pool_values(before[t], untouched.iter().copied()),
            pool_values(after, untouched.iter().copied()),
            "task {t}"
        );
        assert_ne!(pool_values(before[t], 2 * t..2 * t + 2), pool_values(after, 2 * t..2 * t + 2));
    }
    assert_eq!(run.accuracy.final_row().unwrap().len(), 3);
    assert_eq!(run.final_evaluation().selections.len(), data.tasks.iter().map(|t| t.test.len()).sum::<usize>());
}

#[test]
fn reruns_are_bit_identical() {
    let setup = tiny_setup(8);
    let data = setup.prepare(&tiny_tasks(2)).unwrap();
    let cfg = tiny_config(2);
    for method in [Method::Ppt, Method::PptR] {
        let a = train(method, &setup, &data, &cfg).unwrap();
        let b = train(method, &setup, &data, &cfg).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.pool, b.pool);
        assert_eq!(a.epochs, b.epochs);
    }
}

#[test]
fn checkpoints_reproduce_their_rows() {
    let setup = tiny_setup(8);
    let data = setup.prepare(&tiny_tasks(2)).unwrap();
    let cfg = tiny_config(2);
    let run = train_ppt(&setup, &data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (t, pool) in run.checkpoints.iter().enumerate() {
        let path = dir.path().join(format!("pool_{t}.bin"));
        pool.save(&path, serde_json::json!({ "after_task": t })).unwrap();
        let (loaded, meta) = PromptPool::load(&path).unwrap();
        assert_eq!(meta["after_task"], t);
        let ev = evaluate_checkpoint(Method::Ppt, &setup, &data, &cfg, &loaded, t).unwrap();
        assert_eq!(ev, run.evaluations[t]);
    }
}

#[test]
fn prompt_only_keeps_initial_keys() {
    let setup = tiny_setup(8);
    let data = setup.prepare(&tiny_tasks(2)).unwrap();
    let cfg = tiny_config(2);
    let run = train_ablation(Ablation::PromptOnly, &setup, &data, &cfg).unwrap();
    let init = PromptPool::new(cfg.pool_config(16), setup.backbone.embedding_table(), cfg.seed).unwrap();
    for i in 0..cfg.pool_size {
        assert_eq!(run.pool.key(i), init.key(i));
    }
    assert_ne!(run.pool.prompt(0), init.prompt(0));
}

#[test]
fn rehearsal_buffer_grows_per_task() {
    let setup = tiny_setup(8);
    let data = setup.prepare(&tiny_tasks(3)).unwrap();
    let run = train_ppt_r(&setup, &data, &tiny_config(3)).unwrap();
    assert_eq!(run.buffer.len(), 6);
    assert!((0..3).all(|t| run.buffer.count_for(t) == 2));
    let plain = train_ppt(&setup, &data, &tiny_config(3)).unwrap();
    assert!(plain.buffer.is_empty());
}

#[test]
fn ocpt_matches_ppt_when_selection_is_exact() {
    // With a single block in the pool, selection is always correct and the
    // key term never reaches the prompts.
    let setup = tiny_setup(8);
    let data = setup.prepare(&tiny_tasks(1)).unwrap();
    let cfg = tiny_config(1);
    let ppt = train_ppt(&setup, &data, &cfg).unwrap();
    let ocpt = train_ocpt(&setup, &data, &cfg).unwrap();
    assert_eq!(ppt.acc_key().unwrap(), Some(1.0));
    assert_eq!(ppt.accuracy, ocpt.accuracy);
    for i in 0..cfg.pool_size {
        assert_eq!(ppt.pool.prompt(i), ocpt.pool.prompt(i));
    }
    assert!(ocpt.final_evaluation().selections.is_empty());
    assert_eq!(ocpt.acc_key().unwrap(), None);
}

#[test]
fn seq_naive_on_one_task_equals_mpt() {
    let setup = tiny_setup(8);
    let data = setup.prepare(&tiny_tasks(1)).unwrap();
    let cfg = tiny_config(1);
    let naive = train_seq_naive(&setup, &data, &cfg).unwrap();
    let mpt = train_mpt(&setup, &data, &cfg).unwrap();
    assert_eq!(naive.accuracy, mpt.accuracy);
    assert_eq!(naive.pool, mpt.pool);
}

#[test]
fn mpt_fills_only_the_final_row() {
    let setup = tiny_setup(8);
    let data = setup.prepare(&tiny_tasks(2)).unwrap();
    let run = train_mpt(&setup, &data, &tiny_config(2)).unwrap();
    assert!(run.accuracy.get(0, 0).is_none());
    assert!(run.accuracy.get(1, 0).is_some() && run.accuracy.get(1, 1).is_some());
    assert_eq!(run.checkpoints.len(), 1);
}

#[test]
fn capacity_and_frozen_preconditions() {
    let setup = tiny_setup(8);
    let data = setup.prepare(&tiny_tasks(2)).unwrap();
    let mut cfg = tiny_config(2);
    cfg.pool_size = 3;
    assert!(matches!(train_ppt(&setup, &data, &cfg), Err(ClError::Capacity { needed: 4, .. })));
    let mut cfg = tiny_config(2);
    cfg.key_dim = 4;
    assert!(matches!(train_ppt(&setup, &data, &cfg), Err(ClError::InvalidConfig(_))));
    let live = Backbone::new(BackboneConfig::new(10), 0).unwrap();
    let tok = Arc::new(Catalog::standard().tokenizer());
    assert!(matches!(Setup::new(Arc::new(live), tok, 8, 0), Err(ClError::NotFrozen)));
}

fn one_sample_loss(setup: &Setup, sample: &Sample, pool: &PromptPool, mode: KeyLoss, current: bool, lambda: f64) -> (f64, f64, f64, Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let prompts: Vec<Var> = (0..2).map(|i| tape.leaf(pool.prompt(i).clone())).collect();
    let keys: Vec<Var> = (0..2).map(|i| tape.leaf(pool.key(i).clone())).collect();
    let l = sample_loss(&tape, &setup.backbone, sample, &prompts, &keys, mode, true, current, lambda).unwrap();
    let total = tape.scalar_value(l.total);
    let grads = tape.backward(l.total).unwrap();
    let mut p = Parameter::new(pool.prompt(0).clone(), true);
    p.accumulate(&grads, prompts[0], 1.0);
    let mut k = Parameter::new(pool.key(0).clone(), true);
    k.accumulate(&grads, keys[0], 1.0);
    (total, l.ce, l.key, p.grad.data().to_vec(), k.grad.data().to_vec())
}

#[test]
fn loss_decomposes_into_ce_and_key_terms() {
    let setup = tiny_setup(8);
    let data = setup.prepare(&tiny_tasks(1)).unwrap();
    let pool = PromptPool::new(tiny_config(1).pool_config(16), setup.backbone.embedding_table(), 1).unwrap();
    let sample = &data.tasks[0].train[0];
    let (total, ce, key, gp, _) = one_sample_loss(&setup, sample, &pool, KeyLoss::Plain, true, 0.7);
    assert!((total - 0.7 * key - ce).abs() <= 1e-12 * total.abs());
    let (_, ce0, _, gp0, _) = one_sample_loss(&setup, sample, &pool, KeyLoss::Plain, true, 0.0);
    assert_eq!(ce, ce0);
    assert_eq!(gp, gp0);
}

#[test]
fn ordinary_pulls_keys_toward_rehearsal_contexts() {
    let setup = tiny_setup(8);
    let data = setup.prepare(&tiny_tasks(1)).unwrap();
    let pool = PromptPool::new(tiny_config(1).pool_config(16), setup.backbone.embedding_table(), 1).unwrap();
    let sample = &data.tasks[0].train[0];
    let c = sample.context.data();
    let d0 = pool::distance(c, pool.key(0).data()).unwrap();
    let moved = |g: &[f64]| {
        let k: Vec<f64> = pool.key(0).data().iter().zip(g).map(|(k, g)| k - 0.1 * g).collect();
        pool::distance(c, &k).unwrap()
    };
    let (.., plain) = one_sample_loss(&setup, sample, &pool, KeyLoss::Plain, false, 1.0);
    let (.., bce) = one_sample_loss(&setup, sample, &pool, KeyLoss::Bce, false, 1.0);
    assert!(moved(&plain) < d0);
    assert!(moved(&bce) > d0);
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(Method::parse(m.name()), Some(m));
        assert_eq!(serde_json::to_value(m).unwrap(), m.name());
    }
    assert!(Method::parse("adaptercl").is_none());
}
