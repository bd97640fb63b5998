use super::{NumericsError, Parameter};

/// Plain gradient descent on the trainable parameters: `value -= lr * grad`.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64) -> Result<(), NumericsError> {
    if lr < 0.0 || lr.is_nan() {
        return Err(NumericsError::NegativeLearningRate(lr));
    }
    for p in params {
        if !p.trainable {
            continue;
        }
        let grad = p.grad.clone();
        for (v, g) in p.value.data_mut().iter_mut().zip(grad.data()) {
            *v -= lr * g;
        }
    }
    Ok(())
}

/// Linear decay from `initial` at step 0 to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub initial: f64,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(initial: f64, total_steps: usize) -> Result<Self, NumericsError> {
        if initial < 0.0 || initial.is_nan() {
            return Err(NumericsError::NegativeLearningRate(initial));
        }
        Ok(Self { initial, total_steps })
    }

    pub fn at(&self, step: usize) -> Result<f64, NumericsError> {
        if step > self.total_steps {
            return Err(NumericsError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if self.total_steps == 0 {
            return Ok(0.0);
        }
        Ok(self.initial * (self.total_steps - step) as f64 / self.total_steps as f64)
    }
}

/// Adam with bias correction. Used for backbone pretraining only.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Advances the shared step counter; call once before the per-slot updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter; `slot` must identify the same parameter every step.
    pub fn update(&mut self, slot: usize, p: &mut Parameter, lr: f64) {
        if !p.trainable {
            return;
        }
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        if self.moments.len() <= slot {
            self.moments.resize_with(slot + 1, Default::default);
        }
        let (m, v) = &mut self.moments[slot];
        if m.is_empty() {
            *m = vec![0.0; p.value.numel()];
            *v = vec![0.0; p.value.numel()];
        }
        let grad = p.grad.clone();
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((x, g), mi), vi) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }

    /// One update over `params`, which must be passed in the same order every call.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64) {
        self.begin_step();
        for (i, p) in params.into_iter().enumerate() {
            self.update(i, p, lr);
        }
    }
}
