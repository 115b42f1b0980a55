//! Momentum SGD with an exponential learning-rate schedule.

use super::layers::{dropout_mask, softmax_cross_entropy};
use super::model::{accuracy, element_labels, Network, Task};
use crate::error::{KpError, Result};
use crate::geometry::Batch;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Per-epoch decay chosen so the rate is divided by 10 every 100 epochs.
pub const EPOCH_DECAY_PER_100: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub initial_lr: f64,
    pub epoch: usize,
}

impl Schedule {
    pub fn new(initial_lr: f64) -> Self {
        Schedule {
            initial_lr,
            epoch: 0,
        }
    }

    pub fn decay_factor() -> f64 {
        10f64.powf(-1.0 / 100.0)
    }

    pub fn lr(&self) -> f64 {
        self.initial_lr * Self::decay_factor().powi(self.epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumSgd {
    pub momentum: f64,
    pub buffers: Vec<Vec<f64>>,
}

impl MomentumSgd {
    pub fn for_network(net: &mut Network, momentum: f64) -> Self {
        let buffers = net
            .params_mut()
            .iter()
            .map(|(v, _)| vec![0.0; v.len()])
            .collect();
        MomentumSgd { momentum, buffers }
    }

    /// `v = momentum * v + grad * scale; p -= lr * v`.
    pub fn step(&mut self, params: Vec<(&mut Vec<f64>, f64)>, grads: &[&Vec<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.buffers.len());
        for ((param, scale), (buffer, grad)) in params
            .into_iter()
            .zip(self.buffers.iter_mut().zip(grads.iter()))
        {
            for ((p, v), &g) in param.iter_mut().zip(buffer.iter_mut()).zip(grad.iter()) {
                *v = self.momentum * *v + g * scale;
                *p -= lr * *v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub cross_entropy: f64,
    pub reg_loss: f64,
    pub accuracy: f64,
}

/// Owns the parameters during training: network, optimizer state, schedule
/// and the RNG that drives dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub net: Network,
    pub optimizer: MomentumSgd,
    pub schedule: Schedule,
    pub rng: ChaCha20Rng,
    pub step: usize,
}

impl TrainState {
    pub fn new(mut net: Network, initial_lr: f64, momentum: f64, seed: u64) -> Self {
        let optimizer = MomentumSgd::for_network(&mut net, momentum);
        TrainState {
            net,
            optimizer,
            schedule: Schedule::new(initial_lr),
            rng: ChaCha20Rng::seed_from_u64(seed),
            step: 0,
        }
    }

    pub fn batch_labels(&self, batch: &Batch) -> Result<Vec<u32>> {
        let labels = match self.net.spec.task {
            Task::Classification => element_labels(batch),
            Task::Segmentation => batch.labels.clone(),
        };
        labels.ok_or(KpError::ShapeMismatch {
            context: "batch carries no labels",
            expected: 1,
            got: 0,
        })
    }

    /// One forward/backward/update step: cross-entropy plus the weighted
    /// deformable regularization, minimized by momentum SGD at the scheduled
    /// rate.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let labels = self.batch_labels(batch)?;
        let mask = match self.net.spec.task {
            Task::Classification if self.net.spec.dropout > 0.0 => Some(dropout_mask(
                &mut self.rng,
                batch.element_count,
                self.net.spec.head_hidden,
                self.net.spec.dropout,
            )),
            _ => None,
        };
        let (logits, ctx) = self.net.forward(batch, true, mask.as_ref())?;
        let (ce, grad_logits) = softmax_cross_entropy(&logits, &labels)?;
        let reg = Network::reg_loss(&ctx);
        let loss = ce + super::blocks::REG_WEIGHT * reg;
        if !loss.is_finite() {
            return Err(KpError::NonFiniteLoss {
                epoch: self.schedule.epoch,
                step: self.step,
                dump: format!(
                    "cross_entropy={ce} reg={reg} lr={} logits_finite={}",
                    self.schedule.lr(),
                    logits.is_finite()
                ),
            });
        }
        let grads = self.net.backward(batch, &ctx, &grad_logits)?;
        let flat = grads.flat();
        let lr = self.schedule.lr();
        // params_mut and flat share one canonical order
        let grad_refs: Vec<&Vec<f64>> = flat;
        self.optimizer.step(self.net.params_mut(), &grad_refs, lr);
        self.step += 1;
        Ok(StepStats {
            loss,
            cross_entropy: ce,
            reg_loss: reg,
            accuracy: accuracy(&logits, &labels),
        })
    }

    /// Evaluation accuracy with frozen statistics and no dropout.
    pub fn evaluate(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let labels = self.batch_labels(batch)?;
        let (logits, _) = self.net.forward(batch, false, None)?;
        let (ce, _) = softmax_cross_entropy(&logits, &labels)?;
        Ok((ce, accuracy(&logits, &labels)))
    }

    pub fn end_epoch(&mut self) {
        self.schedule.epoch += 1;
    }
}
