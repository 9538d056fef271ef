//! SGD with momentum and a stepped exponential learning-rate decay.

use super::{Tensor, TensorError};

/// Velocity state plus the decay schedule: the learning rate is
/// `base_lr * decay^(epoch / decay_every)` with integer division, so the rate
/// drops once every `decay_every` epochs.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    base_lr: f64,
    momentum: f64,
    decay: f64,
    decay_every: usize,
    lr: f64,
    velocities: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(param_shapes: &[Vec<usize>], lr: f64, momentum: f64, decay: f64, decay_every: usize) -> Self {
        SgdMomentum {
            base_lr: lr,
            momentum,
            decay,
            decay_every: decay_every.max(1),
            lr,
            velocities: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Set the effective learning rate for an epoch (0-based).
    pub fn begin_epoch(&mut self, epoch: usize) {
        self.lr = self.base_lr * self.decay.powi((epoch / self.decay_every) as i32);
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn velocity(&self, idx: usize) -> &Tensor {
        &self.velocities[idx]
    }

    /// One update: `v <- momentum*v + g; p <- p - lr*v`. Parameters with no
    /// gradient this step still have their velocity decayed.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Option<Tensor>],
    ) -> Result<(), TensorError> {
        if params.len() != self.velocities.len() || grads.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                detail: format!(
                    "{} params, {} grads, {} velocities",
                    params.len(),
                    grads.len(),
                    self.velocities.len()
                ),
            });
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocities) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "sgd_step",
                        detail: format!("grad {:?} vs param {:?}", g.shape(), p.shape()),
                    });
                }
            }
            let vd = v.data_mut();
            for i in 0..vd.len() {
                let gi = g.as_ref().map_or(0.0, |g| g.data()[i]);
                vd[i] = self.momentum * vd[i] + gi;
            }
            let pd = p.data_mut();
            for i in 0..pd.len() {
                pd[i] -= self.lr * vd[i];
                if !pd[i].is_finite() {
                    return Err(TensorError::NonFinite { op: "sgd_step" });
                }
            }
        }
        Ok(())
    }
}
