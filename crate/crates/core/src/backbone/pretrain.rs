use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneError, WeightTree};
use crate::numerics::{Adam, Tape, Var};

/// One teacher-forced pair: encoder input tokens and the target sequence
/// (end-of-sequence is appended by the loss).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 16,
            lr: 2e-3,
            warmup_steps: 100,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Mean teacher-forced loss over `examples` without touching any weights.
pub fn mean_loss(backbone: &Backbone, examples: &[PretrainExample]) -> Result<f64, BackboneError> {
    let mut total = 0.0;
    for ex in examples {
        let tape = Tape::new();
        let w = backbone.bind_constant(&tape);
        let x = backbone.embed_on(&tape, &w, &ex.input)?;
        let loss = backbone.loss(&tape, &w, x, &ex.target)?;
        total += tape.scalar_value(loss);
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Trains every backbone weight with teacher forcing and Adam, then freezes.
///
/// Fails with [`BackboneError::PretrainStalled`] when the mean loss over the
/// last tenth of the first epoch is not below that of its first tenth.
pub fn pretrain(
    mut backbone: Backbone,
    corpus: &[PretrainExample],
    config: &PretrainConfig,
) -> Result<(Backbone, PretrainReport), BackboneError> {
    let mut report = PretrainReport::default();
    if config.epochs == 0 || corpus.is_empty() {
        backbone.freeze();
        return Ok((backbone, report));
    }
    let batch = config.batch_size.max(1);
    let batches_per_epoch = corpus.len().div_ceil(batch);
    let total_steps = batches_per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::with_capacity(batches_per_epoch);
        for chunk in order.chunks(batch) {
            let weight = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let ex = &corpus[i];
                let tape = Tape::new();
                let w = backbone.bind(&tape);
                let x = backbone.embed_on(&tape, &w, &ex.input)?;
                let loss = backbone.loss(&tape, &w, x, &ex.target)?;
                batch_loss += tape.scalar_value(loss) * weight;
                let grads = tape.backward(loss)?;
                let mut vars: Vec<Var> = Vec::new();
                w.map("", &mut |_, v| vars.push(*v));
                let mut idx = 0;
                backbone.weights_mut().visit_mut("", &mut |_, p| {
                    p.accumulate(&grads, vars[idx], weight);
                    idx += 1;
                });
            }
            batch_losses.push(batch_loss);

            step += 1;
            let warm = (step as f64 / config.warmup_steps.max(1) as f64).min(1.0);
            let decay = 1.0 - 0.9 * step as f64 / total_steps as f64;
            let lr = config.lr * warm * decay;
            adam.begin_step();
            let mut slot = 0;
            backbone.weights_mut().visit_mut("", &mut |_, p| {
                adam.update(slot, p, lr);
                p.zero_grad();
                slot += 1;
            });
        }
        if epoch == 0 {
            let window = (batch_losses.len() / 10).max(1);
            let first = batch_losses[..window].iter().sum::<f64>() / window as f64;
            let last = batch_losses[batch_losses.len() - window..].iter().sum::<f64>() / window as f64;
            if last >= first {
                return Err(BackboneError::PretrainStalled { first, last });
            }
        }
        report
            .epoch_losses
            .push(batch_losses.iter().sum::<f64>() / batch_losses.len() as f64);
    }
    report.steps = step;
    backbone.freeze();
    Ok((backbone, report))
}
