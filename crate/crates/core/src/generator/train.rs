use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build_inputs, GeneratorConfig, GeneratorModel, InputBatch};
use crate::autodiff::{Adam, AdamConfig, ParamTree};
use crate::corpus::{Quadruple, Tokenizer};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-example loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean of the step losses in each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Trains a freshly initialized model on `quads`.
pub fn train_generator(
    quads: &[Quadruple],
    tokenizer: Tokenizer,
    config: GeneratorConfig,
) -> Result<(GeneratorModel, TrainReport)> {
    let mut model = GeneratorModel::new(config, tokenizer)?;
    let report = model.train(quads, |_, _| Ok(()))?;
    Ok((model, report))
}

impl GeneratorModel {
    /// Shuffled mini-batch training on masked objectives, continuing from
    /// the current parameters. `on_epoch` runs after every epoch, e.g. to
    /// write a checkpoint.
    pub fn train(
        &mut self,
        quads: &[Quadruple],
        mut on_epoch: impl FnMut(usize, &GeneratorModel) -> Result<()>,
    ) -> Result<TrainReport> {
        if quads.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        if self.global_concepts.is_empty() {
            self.collect_global_concepts(quads);
        }
        let cfg = self.config.clone();
        let shapes: Vec<(usize, usize)> = self.params.params().iter().map(|m| m.dim()).collect();
        let mut adam = Adam::new(AdamConfig { lr: cfg.lr, clip_norm: cfg.clip_norm, ..Default::default() }, &shapes);
        let frozen = vec![false; shapes.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut order: Vec<usize> = (0..quads.len()).collect();
        let mut report = TrainReport::default();

        'epochs: for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut n = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<InputBatch> =
                    chunk.iter().map(|&i| build_inputs(&quads[i], &cfg, &mut rng)).collect::<Result<_>>()?;
                let (loss, grads) = self.loss_and_grads(&batch)?;
                if !loss.is_finite() {
                    return Err(Error::Corrupt(format!("non-finite loss at step {}", report.steps)));
                }
                adam.step(self.params.params_mut(), &grads, &frozen);
                report.step_losses.push(loss);
                report.steps += 1;
                sum += loss;
                n += 1;
                if cfg.max_steps > 0 && report.steps >= cfg.max_steps {
                    report.epoch_losses.push(sum / n as f64);
                    on_epoch(epoch, self)?;
                    break 'epochs;
                }
            }
            report.epoch_losses.push(sum / n as f64);
            log::debug!("generator epoch {epoch}: loss {:.4}", sum / n as f64);
            on_epoch(epoch, self)?;
        }
        Ok(report)
    }
}
