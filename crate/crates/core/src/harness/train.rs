use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MoEConfig, MoEParams};
use crate::numerics::RngStream;

use super::data::Dataset;
use super::loss::{encoded_grad, encoded_loss, Encoded, FrozenBackbone};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_seed: u64,
    pub data_order_seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 0.1,
            init_seed: 0,
            data_order_seed: 0,
            init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is allowed so that a run can be replayed without
    /// moving the parameters.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("init_scale must be positive, got {}", self.init_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: MoEParams,
    /// Mean mini-batch loss before each step.
    pub batch_losses: Vec<f64>,
    /// Loss on the full training set before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Plain SGD from `MoEParams::random(config, init_seed, init_scale)`.
/// Batches walk a fresh shuffle of the training set each epoch, drawn from
/// `data_order_seed`.
pub fn train_sgd(
    train: &Dataset,
    backbone: &FrozenBackbone,
    config: &TrainConfig,
    model: MoEConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let init = MoEParams::random(model, &mut RngStream::new(config.init_seed), config.init_scale)?;
    train_from(init, &backbone.encode(train)?, backbone, config)
}

/// SGD starting at `params`; `config.init_seed` and `init_scale` are unused.
pub fn train_from(
    mut params: MoEParams,
    train: &Encoded,
    backbone: &FrozenBackbone,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let initial_loss = encoded_loss(&params, backbone, train)?.loss;
    let mut order_rng = RngStream::new(config.data_order_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut batch_idx = Vec::with_capacity(config.batch_size);
    let mut batch_losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        batch_idx.clear();
        while batch_idx.len() < config.batch_size {
            if cursor == order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            let take = (config.batch_size - batch_idx.len()).min(order.len() - cursor);
            batch_idx.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let (grad, stats) = encoded_grad(&params, backbone, &train.subset(&batch_idx))?;
        if !stats.loss.is_finite() {
            return Err(Error::Diverged { step, loss: stats.loss });
        }
        batch_losses.push(stats.loss);
        params.axpy(-config.learning_rate, &grad)?;
        if !params.is_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
    }

    let final_loss = encoded_loss(&params, backbone, train)?.loss;
    Ok(TrainOutcome {
        params,
        batch_losses,
        initial_loss,
        final_loss,
    })
}
