//! Dense `f64` tensors, a reverse-mode tape, and the optimizers used to train
//! prompts, keys, and (during pretraining only) the backbone.

mod optim;
mod tape;
mod tensor;

pub use optim::{sgd_step, Adam, LinearSchedule};
pub use tape::{Gradients, Tape, Var, PROB_EPS};
pub use tensor::{matmul, Tensor};

pub(crate) use tape::sigmoid;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("learning rate must be non-negative, got {0}")]
    NegativeLearningRate(f64),
    #[error("schedule step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
}

/// A tensor with its accumulated gradient and a trainable flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self { value, grad, trainable }
    }

    /// Places the value on `tape`; it tracks gradients only when trainable.
    pub fn bind(&self, tape: &Tape) -> Var {
        if self.trainable {
            tape.leaf(self.value.clone())
        } else {
            tape.constant(self.value.clone())
        }
    }

    /// Adds `weight · grads[var]` into the accumulated gradient.
    pub fn accumulate(&mut self, grads: &Gradients, var: Var, weight: f64) {
        if !self.trainable {
            return;
        }
        if let Some(g) = grads.raw(var) {
            for (acc, v) in self.grad.data_mut().iter_mut().zip(g) {
                *acc += weight * v;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}
