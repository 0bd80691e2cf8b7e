//! Mini-batch training with per-sample tapes.

mod loss;
mod optim;

pub use loss::{hybrid_loss, hybrid_on_tape, mae, pinball_loss, pinball_on_tape, LossConfig};
pub use optim::{Adam, AdamConfig};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradStore, Tape};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::graphs::DiffusionOperator;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient norm cap; zero or negative disables clipping.
    pub clip_norm: f64,
    /// Input window length in steps.
    pub window: usize,
    /// Forecast horizon in steps.
    pub horizon: usize,
    /// Seeds batch shuffling. Pipelines set it from their top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: 5.0,
            window: 48,
            horizon: 12,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: 1e-8,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("batch_size", self.batch_size), ("window", self.window), ("horizon", self.horizon)] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// One JSON line per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Loss of one sample and its gradient with respect to every parameter.
pub fn sample_gradient(model: &Model, sample: &Sample, diffusion: &DiffusionOperator, loss_cfg: &LossConfig) -> Result<(f64, GradStore)> {
    let mut tape = Tape::new();
    let powers = model.powers_on_tape(&mut tape, diffusion)?;
    let q = model.forward_sample(&mut tape, &powers, &sample.input)?;
    let y = tape.constant(Tensor::new(vec![model.config.nodes, model.config.horizon], sample.target.clone())?);
    let loss = hybrid_on_tape(&mut tape, y, &q, loss_cfg)?;
    let mut grads = GradStore::zeros_like(&model.params);
    tape.backward(loss, &mut grads)?;
    Ok((tape.value(loss).item(), grads))
}

/// Mean loss and mean gradient over a batch. Per-sample work is spread by
/// `exec`; the reduction runs in batch order so the result does not depend
/// on the execution mode.
pub fn batch_gradient(
    model: &Model,
    batch: &[&Sample],
    diffusion: &DiffusionOperator,
    loss_cfg: &LossConfig,
    exec: Execution,
) -> Result<(f64, GradStore)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let parts = exec.map(batch, |s| sample_gradient(model, s, diffusion, loss_cfg));
    let mut total = GradStore::zeros_like(&model.params);
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.accumulate(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// Mean hybrid loss over `samples` without gradients.
pub fn evaluate_loss(
    model: &Model,
    samples: &[Sample],
    diffusion: &DiffusionOperator,
    loss_cfg: &LossConfig,
    exec: Execution,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let losses = exec.map(samples, |s| -> Result<f64> {
        let mut tape = Tape::new();
        let powers = model.powers_on_tape(&mut tape, diffusion)?;
        let q = model.forward_sample(&mut tape, &powers, &s.input)?;
        let y = tape.constant(Tensor::new(vec![model.config.nodes, model.config.horizon], s.target.clone())?);
        let l = hybrid_on_tape(&mut tape, y, &q, loss_cfg)?;
        Ok(tape.value(l).item())
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

/// Trains `model` in place. Each epoch visits every sample once in a
/// seeded shuffled order. Step losses go to `log` as JSON lines.
pub fn train(
    model: &mut Model,
    samples: &[Sample],
    diffusion: &DiffusionOperator,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    exec: Execution,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.horizon != model.config.horizon {
        return Err(Error::Config(format!(
            "train.horizon {} does not match the model horizon {}",
            cfg.horizon, model.config.horizon
        )));
    }
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut opt = Adam::new(&model.params, cfg.adam());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    model.refresh_centroids();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, mut grads) = batch_gradient(model, &batch, diffusion, loss_cfg, exec)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: opt.steps() as usize + 1,
                    loss,
                });
            }
            opt.step(&mut model.params, &mut grads)?;
            model.refresh_centroids();
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&StepLog {
                    epoch,
                    step: opt.steps(),
                    loss,
                })?;
                writeln!(w, "{line}").map_err(|e| Error::io("writing the training log", e))?;
            }
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    report.steps = opt.steps();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, prepare, SplitFractions, SyntheticSpec};
    use crate::model::ModelConfig;

    fn setup() -> (Model, crate::data::PreparedData) {
        let ds = generate_synthetic(&SyntheticSpec {
            users: 4,
            regions: 2,
            days: 4,
            steps_per_day: 12,
            ..Default::default()
        })
        .unwrap();
        let data = prepare(&ds, &SplitFractions::default(), 6, 2, 4.0, 25.0, 0.1, 1).unwrap();
        let model = Model::new(
            ModelConfig {
                nodes: 4,
                steps_per_day: 12,
                hidden: 4,
                diffusion_order: 1,
                horizon: 2,
                pool_width: 4,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        (model, data)
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let (mut model, data) = setup();
        let before = model.params.clone();
        let cfg = TrainConfig {
            epochs: 0,
            horizon: 2,
            ..Default::default()
        };
        let report = train(
            &mut model,
            &data.train,
            &data.hierarchy.micro,
            &cfg,
            &LossConfig::default(),
            Execution::Sequential,
            None,
        )
        .unwrap();
        assert!(report.epoch_losses.is_empty());
        assert_eq!(model.params, before);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (mut model, data) = setup();
        let err = train(
            &mut model,
            &[],
            &data.hierarchy.micro,
            &TrainConfig {
                horizon: 2,
                ..Default::default()
            },
            &LossConfig::default(),
            Execution::Sequential,
            None,
        );
        assert!(err.is_err());
    }

    #[test]
    fn execution_modes_agree_bitwise() {
        let (model, data) = setup();
        let batch: Vec<&Sample> = data.train.iter().take(5).collect();
        let lc = LossConfig::default();
        let (ls, gs) = batch_gradient(&model, &batch, &data.hierarchy.micro, &lc, Execution::Sequential).unwrap();
        let (lp, gp) = batch_gradient(&model, &batch, &data.hierarchy.micro, &lc, Execution::Parallel).unwrap();
        assert_eq!(ls, lp);
        for id in model.params.ids() {
            assert_eq!(gs.get(id), gp.get(id));
        }
    }

    #[test]
    fn training_lowers_loss_and_logs_each_step() {
        let (mut model, data) = setup();
        let lc = LossConfig::default();
        let d = &data.hierarchy.micro;
        let before = evaluate_loss(&model, &data.train, d, &lc, Execution::Sequential).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            learning_rate: 1e-2,
            horizon: 2,
            ..Default::default()
        };
        let mut buf = Vec::new();
        let report = train(&mut model, &data.train, d, &cfg, &lc, Execution::Sequential, Some(&mut buf)).unwrap();
        let after = evaluate_loss(&model, &data.train, d, &lc, Execution::Sequential).unwrap();
        assert!(after < before, "{before} -> {after}");
        let lines: Vec<StepLog> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len() as u64, report.steps);
        assert_eq!(report.epoch_losses.len(), 5);
    }

    #[test]
    fn same_seed_same_result() {
        let run = || {
            let (mut model, data) = setup();
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 4,
                horizon: 2,
                ..Default::default()
            };
            train(
                &mut model,
                &data.train,
                &data.hierarchy.micro,
                &cfg,
                &LossConfig::default(),
                Execution::Parallel,
                None,
            )
            .unwrap();
            model.params
        };
        assert_eq!(run(), run());
    }
}
