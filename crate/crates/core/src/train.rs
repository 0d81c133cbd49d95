//! Adam training loop with per-step logging, validation-based early
//! stopping, and deterministic shuffling. One tape per step; batch loss is
//! the mean over examples folded in a fixed order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::corpus::EncodedExample;
use crate::error::{contract_err, numeric_err, Result};
use crate::model::{ForwardOptions, ModelParams, ParamId};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub patience: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub options: ForwardOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            batch_size: 16,
            epochs: 5,
            max_steps: None,
            patience: 1,
            seed: 0,
            shuffle: true,
            options: ForwardOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub l_nll: f64,
    pub l_emo: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub params: ModelParams,
    pub steps: Vec<StepLog>,
    pub best_val_loss: Option<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Aggregate forward metrics over a dataset, values only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetMetrics {
    pub loss: f64,
    pub l_nll: f64,
    pub l_emo: f64,
    pub emo_accuracy: f64,
}

pub fn dataset_metrics(
    params: &ModelParams,
    examples: &[EncodedExample],
    options: &ForwardOptions,
) -> Result<DatasetMetrics> {
    if examples.is_empty() {
        return Err(contract_err("cannot evaluate an empty dataset"));
    }
    let mut loss = 0.0;
    let mut nll = 0.0;
    let mut emo = 0.0;
    let mut correct = 0usize;
    for example in examples {
        let out = params.run_forward(example, options)?;
        loss += out.loss;
        nll += out.l_nll;
        emo += out.l_emo;
        if out.predicted_emotion == example.emotion {
            correct += 1;
        }
    }
    let n = examples.len() as f64;
    Ok(DatasetMetrics {
        loss: loss / n,
        l_nll: nll / n,
        l_emo: emo / n,
        emo_accuracy: correct as f64 / examples.len() as f64,
    })
}

/// One batch: mean loss over the examples, backward, and the per-parameter
/// gradients in store order (zeros where no gradient flowed).
pub fn batch_gradients(
    params: &ModelParams,
    examples: &[EncodedExample],
    options: &ForwardOptions,
) -> Result<(StepComponents, Vec<Vec<f64>>)> {
    if examples.is_empty() {
        return Err(contract_err("empty batch"));
    }
    let mut tape = Tape::new();
    let mut bind = crate::model::binding(params);
    let mut loss_ids = Vec::with_capacity(examples.len());
    let mut nll_sum = 0.0;
    let mut emo_sum = 0.0;
    for example in examples {
        let graph = crate::model::forward_graph(&mut tape, &mut bind, params, example, options)?;
        nll_sum += tape.scalar_value(graph.l_nll)?;
        emo_sum += tape.scalar_value(graph.l_emo)?;
        loss_ids.push(graph.loss);
    }
    let mut total = loss_ids[0];
    for &id in &loss_ids[1..] {
        total = tape.add(total, id)?;
    }
    let mean = tape.scale(total, 1.0 / examples.len() as f64)?;
    let loss_value = tape.scalar_value(mean)?;
    if !loss_value.is_finite() {
        return Err(numeric_err(format!("non-finite batch loss {loss_value}")));
    }
    tape.backward(mean)?;

    let grads: Vec<Vec<f64>> = params
        .store
        .ids()
        .map(|pid| match crate::model::bound_node(&bind, pid) {
            Some(node) => tape
                .grad(node)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; params.store.get(pid).numel()]),
            None => vec![0.0; params.store.get(pid).numel()],
        })
        .collect();
    let n = examples.len() as f64;
    Ok((
        StepComponents {
            loss: loss_value,
            l_nll: nll_sum / n,
            l_emo: emo_sum / n,
        },
        grads,
    ))
}

#[derive(Debug, Clone, Copy)]
pub struct StepComponents {
    pub loss: f64,
    pub l_nll: f64,
    pub l_emo: f64,
}

/// Adam with bias correction; state lives in store order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let m = params.store.ids().map(|id| vec![0.0; params.store.get(id).numel()]).collect();
        let v = params.store.ids().map(|id| vec![0.0; params.store.get(id).numel()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = params.store.ids().collect();
        for pid in ids {
            let g = &grads[pid.0];
            let m = &mut self.m[pid.0];
            let v = &mut self.v[pid.0];
            let data = params.store.get_mut(pid).data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Full training run. `on_step` sees every step's losses in order.
pub fn train(
    params: ModelParams,
    train_set: &[EncodedExample],
    valid_set: &[EncodedExample],
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainResult> {
    if train_set.is_empty() {
        return Err(contract_err("empty training set"));
    }
    if config.batch_size == 0 {
        return Err(contract_err("batch size must be positive"));
    }
    let mut params = params;
    let mut adam = Adam::new(&params, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut steps = Vec::new();
    let mut step = 0usize;
    let mut best_val: Option<f64> = None;
    let mut best_snapshot: Option<ModelParams> = None;
    let mut bad_epochs = 0usize;
    let mut stopped_early = false;
    let mut epochs_run = 0usize;

    'epochs: for epoch in 0..config.epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(config.batch_size) {
            if let Some(cap) = config.max_steps {
                if step >= cap {
                    break 'epochs;
                }
            }
            let batch: Vec<EncodedExample> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (components, grads) = batch_gradients(&params, &batch, &config.options)?;
            adam.step(&mut params, &grads)?;
            step += 1;
            let log = StepLog {
                step,
                epoch,
                loss: components.loss,
                l_nll: components.l_nll,
                l_emo: components.l_emo,
            };
            on_step(&log);
            steps.push(log);
        }

        if !valid_set.is_empty() {
            let val = dataset_metrics(&params, valid_set, &config.options)?;
            let improved = best_val.map_or(true, |b| val.loss < b);
            if improved {
                best_val = Some(val.loss);
                best_snapshot = Some(params.clone());
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if bad_epochs > config.patience.saturating_sub(1) {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let final_params = match best_snapshot {
        Some(best) => best,
        None => params,
    };
    Ok(TrainResult {
        params: final_params,
        steps,
        best_val_loss: best_val,
        epochs_run,
        stopped_early,
    })
}
