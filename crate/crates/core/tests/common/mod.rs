#![allow(dead_code)]

use std::sync::Arc;

use ppdst_core::backbone::{Backbone, BackboneConfig};
use ppdst_core::cl::{sample_objective, KeyLoss, Prepared, Setup};
use ppdst_core::data::{generate_synthetic_tasks, Catalog, SyntheticSpec};
use ppdst_core::numerics::Tensor;
use ppdst_core::pool::{PoolConfig, PromptPool};

pub const TOY_DIM: usize = 16;
pub const TOY_KEY_DIM: usize = 8;

/// Frozen 2+2 layer backbone at width 16 with random weights.
pub fn toy_setup() -> Setup {
    let tok = Catalog::standard().tokenizer();
    let mut cfg = BackboneConfig::new(tok.len());
    cfg.embed_dim = TOY_DIM;
    cfg.encoder_layers = 2;
    cfg.decoder_layers = 2;
    cfg.num_heads = 2;
    cfg.ff_dim = 32;
    let mut b = Backbone::new(cfg, 11).unwrap();
    b.freeze();
    Setup::new(Arc::new(b), Arc::new(tok), TOY_KEY_DIM, 5).unwrap()
}

pub fn toy_data(setup: &Setup) -> Prepared {
    let spec = SyntheticSpec {
        num_tasks: 2,
        dialogs_per_task: 100,
        ..SyntheticSpec::default()
    };
    let mut tasks = generate_synthetic_tasks(&spec, &Catalog::standard(), 2).unwrap();
    for t in &mut tasks {
        t.train.truncate(2);
        t.test.truncate(1);
    }
    setup.prepare(&tasks).unwrap()
}

pub fn toy_pool(setup: &Setup, per_task: usize, prompt_len: usize) -> PromptPool {
    let cfg = PoolConfig {
        size: 2 * per_task,
        per_task,
        prompt_len,
        embed_dim: TOY_DIM,
        key_dim: TOY_KEY_DIM,
    };
    PromptPool::new(cfg, setup.backbone.embedding_table(), 8).unwrap()
}

/// Largest relative error between analytic and central-difference gradients
/// over every prompt and key coordinate of a block, and the number of
/// coordinates checked.
pub fn gradient_check(setup: &Setup, data: &Prepared, key_loss: KeyLoss, current: bool, lambda: f64, h: f64) -> (f64, usize) {
    let pool = toy_pool(setup, 2, 2);
    let sample = &data.tasks[0].train[1];
    let prompts: Vec<Tensor> = (0..2).map(|i| pool.prompt(i).clone()).collect();
    let keys: Vec<Tensor> = (0..2).map(|i| pool.key(i).clone()).collect();
    let analytic = sample_objective(setup, sample, &prompts, &keys, key_loss, current, lambda).unwrap();
    let f = |p: &[Tensor], k: &[Tensor]| sample_objective(setup, sample, p, k, key_loss, current, lambda).unwrap().value;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(f64::MIN_POSITIVE);
    for (which, grads) in [(0, &analytic.prompt_grads), (1, &analytic.key_grads)] {
        for i in 0..2 {
            let len = grads[i].numel();
            for j in 0..len {
                let bump = |delta: f64| {
                    let (mut p, mut k) = (prompts.clone(), keys.clone());
                    let t = if which == 0 { &mut p[i] } else { &mut k[i] };
                    t.data_mut()[j] += delta;
                    f(&p, &k)
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                worst = worst.max(rel(grads[i].data()[j], numeric));
                checked += 1;
            }
        }
    }
    (worst, checked)
}
