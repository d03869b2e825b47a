//! Adam with linear warmup + inverse-sqrt decay, and the training loop.

use rayon::prelude::*;

use crate::neural::model::{row_loss_and_grads, Dropout};
use crate::neural::params::{ModelParams, ParamGrads};
use crate::neural::{batch_loss, Batch, NeuralError, TrainExample};
use crate::rng::{child_rng, Stream};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving dev epochs tolerated before stopping;
    /// 0 stops after the first non-improving epoch.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            warmup_steps: 100,
            max_epochs: 20,
            patience: 3,
            batch_size: 16,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            verbose: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub train_losses: Vec<f64>,
    pub dev_losses: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(params: &ModelParams, cfg: &TrainConfig) -> Adam {
        let shapes = &params.layout.shapes;
        Adam {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    /// Linear warmup to `lr`, then inverse-sqrt decay.
    fn lr_at(&self, base: f64, warmup: usize) -> f64 {
        let t = self.step as f64;
        let w = warmup.max(1) as f64;
        base * (t / w).min((w / t).sqrt())
    }

    fn update(&mut self, params: &mut ModelParams, grads: &ParamGrads, base_lr: f64, warmup: usize) {
        self.step += 1;
        let lr = self.lr_at(base_lr, warmup);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (t, g) in grads.tensors.iter().enumerate() {
            let m = self.m[t].data_mut();
            let v = self.v[t].data_mut();
            let p = params.tensors[t].data_mut();
            for ((pi, mi), (vi, &gi)) in
                p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut().zip(g.data()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = child_rng(seed, Stream::Shuffle, &[epoch as u64]);
    idx.shuffle(&mut rng);
    idx
}

/// Run epochs of shuffled mini-batches and return the best-dev parameters
/// (final parameters when `dev_set` is empty) plus the loss curves.
///
/// Per-row gradients within a step may be computed in parallel; they are
/// reduced in row order, so the result is bit-identical to the serial
/// schedule regardless of worker count.
pub fn train(
    params: ModelParams,
    train_set: &[TrainExample],
    dev_set: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport), NeuralError> {
    if train_set.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    let mut params = params;
    let mut adam = Adam::new(&params, cfg);
    let dropout_p = params.config.dropout;
    let dev_refs: Vec<&TrainExample> = dev_set.iter().collect();
    let dev_batch = if dev_refs.is_empty() { None } else { Some(Batch::from_examples(&dev_refs)) };

    let mut report = TrainReport {
        train_losses: Vec::new(),
        dev_losses: Vec::new(),
        best_epoch: 0,
        epochs_run: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, ModelParams)> = None;
    let mut bad_epochs = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let order = shuffled_indices(train_set.len(), cfg.seed, epoch);
        let mut epoch_loss_sum = 0.0;
        let mut epoch_tokens = 0usize;
        for (step_in_epoch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let rows: Vec<&TrainExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let total_tokens: usize =
                rows.iter().map(|e| e.target_ids.len() + 1).sum();
            let scale = 1.0 / total_tokens as f64;
            let row_results: Result<Vec<_>, NeuralError> = rows
                .par_iter()
                .enumerate()
                .map(|(k, ex)| {
                    let dropout = Dropout::new(
                        dropout_p,
                        child_rng(
                            cfg.seed,
                            Stream::Dropout,
                            &[epoch as u64, step_in_epoch as u64, k as u64],
                        ),
                    );
                    row_loss_and_grads(
                        &params,
                        &ex.input_ids,
                        &ex.input_tags,
                        &ex.target_ids,
                        &ex.target_tags,
                        dropout,
                        scale,
                    )
                })
                .collect();
            let row_results = row_results?;
            let mut grads = ParamGrads::zeros_like(&params);
            let mut step_loss = 0.0;
            for row in &row_results {
                step_loss += row.loss_sum;
                grads.accumulate(&row.grads);
            }
            if !step_loss.is_finite() {
                return Err(NeuralError::Diverged { epoch, loss: step_loss });
            }
            adam.update(&mut params, &grads, cfg.lr, cfg.warmup_steps);
            epoch_loss_sum += step_loss;
            epoch_tokens += total_tokens;
        }
        let train_loss = epoch_loss_sum / epoch_tokens as f64;
        if !train_loss.is_finite() {
            return Err(NeuralError::Diverged { epoch, loss: train_loss });
        }
        report.train_losses.push(train_loss);
        report.epochs_run = epoch;

        if let Some(dev) = &dev_batch {
            let dev_loss = batch_loss(&params, dev)?;
            report.dev_losses.push(dev_loss);
            let improved = best.as_ref().map_or(true, |(b, _)| dev_loss < *b);
            if cfg.verbose {
                eprintln!(
                    "epoch {epoch}: train {train_loss:.4} dev {dev_loss:.4}{}",
                    if improved { " *" } else { "" }
                );
            }
            if improved {
                best = Some((dev_loss, params.clone()));
                report.best_epoch = epoch;
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if bad_epochs > cfg.patience {
                    report.stopped_early = true;
                    break;
                }
            }
        } else if cfg.verbose {
            eprintln!("epoch {epoch}: train {train_loss:.4}");
        }
    }

    let final_params = match best {
        Some((_, p)) => p,
        None => {
            report.best_epoch = report.epochs_run;
            params
        }
    };
    Ok((final_params, report))
}
