//! Training loop: seeded shuffling, a fresh intervention draw for every
//! batch of every epoch, early stopping on validation MAE.

use std::io::Write;
use std::rc::Rc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, TrainConfig};
use crate::data::{Batch, Split, WindowedDataset};
use crate::error::{MipError, Result};
use crate::intervention::{batch_source_map, InterventionConfig};
use crate::model::{MipModel, Targets};
use crate::optim::{clip_global_norm, Adam};
use crate::tape::Tape;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_task: f64,
    pub loss_inv: f64,
    pub loss_reg: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.epochs {
            writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"))?;
        }
        Ok(())
    }
}

/// Loss components of one batch as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub task: f64,
    pub inv: f64,
    pub reg: f64,
}

fn targets_of(batch: &Batch) -> Targets {
    Targets {
        values: Rc::new(batch.targets.clone()),
        mask: batch.mask.clone().map(Rc::new),
    }
}

/// Loss components and per-parameter gradients for one batch.
pub fn loss_and_gradients(
    model: &MipModel,
    batch: &Batch,
    source: Option<Rc<Vec<usize>>>,
    loss: &LossConfig,
) -> Result<(StepLosses, Vec<Option<Array2<f64>>>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let x = tape.constant(batch.inputs.clone());
    let obj = model.objective(&mut tape, &bound, x, &targets_of(batch), source, loss)?;
    let losses = StepLosses {
        total: tape.scalar(obj.total),
        task: tape.scalar(obj.task),
        inv: tape.scalar(obj.inv),
        reg: tape.scalar(obj.reg),
    };
    for (name, v) in [
        ("task", losses.task),
        ("inv", losses.inv),
        ("reg", losses.reg),
        ("total", losses.total),
    ] {
        if !v.is_finite() {
            return Err(MipError::Numerical(format!("loss term `{name}` is {v}")));
        }
    }
    let mut grads = tape.backward(obj.total);
    let grads: Vec<_> = bound.vars().iter().map(|&v| grads.take(v)).collect();
    for (i, g) in grads.iter().enumerate() {
        if g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(MipError::Numerical(format!(
                "gradient of `{}` is not finite",
                model.params().iter().nth(i).map_or("?", |(n, _)| n)
            )));
        }
    }
    Ok((losses, grads))
}

/// Masked MAE of the model over `windows`, in normalized units.
pub fn split_mae(model: &MipModel, data: &WindowedDataset, windows: &[usize], batch_size: usize) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0.0);
    for chunk in windows.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk);
        let pred = model.predict(&batch.inputs)?;
        match &batch.mask {
            Some(m) => {
                ndarray::Zip::from(&pred)
                    .and(&batch.targets)
                    .and(m)
                    .for_each(|&p, &t, &w| sum += w * (p - t).abs());
                count += m.sum();
            }
            None => {
                ndarray::Zip::from(&pred)
                    .and(&batch.targets)
                    .for_each(|&p, &t| sum += (p - t).abs());
                count += pred.len() as f64;
            }
        }
    }
    if count <= 0.0 {
        return Err(MipError::Data("no valid targets to score".into()));
    }
    Ok(sum / count)
}

/// Trains `model` and returns it at its best validation epoch.
pub fn train(
    model: MipModel,
    data: &WindowedDataset,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    intervention: &InterventionConfig,
) -> Result<(MipModel, TrainReport)> {
    train_with(model, data, train_cfg, loss_cfg, intervention, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    mut model: MipModel,
    data: &WindowedDataset,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    intervention: &InterventionConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MipModel, TrainReport)> {
    train_cfg.validate()?;
    loss_cfg.validate()?;
    intervention.validate()?;
    let dims = model.dims();
    if dims.nodes != data.num_nodes() || dims.features != data.num_features() || dims.window != data.window {
        return Err(MipError::Config(format!(
            "model expects N={}, k={}, T={} but the data has N={}, k={}, T={}",
            dims.nodes,
            dims.features,
            dims.window,
            data.num_nodes(),
            data.num_features(),
            data.window
        )));
    }
    let mut report = TrainReport::default();
    if train_cfg.max_epochs == 0 {
        return Ok((model, report));
    }
    let mut train_windows: Vec<usize> = data.splits.get(Split::Train).collect();
    let val_windows: Vec<usize> = data.splits.get(Split::Val).collect();
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(MipError::Data(format!(
            "need nonempty train and validation splits, got {} and {} windows",
            train_windows.len(),
            val_windows.len()
        )));
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut swap_rng = ChaCha8Rng::seed_from_u64(intervention.seed);
    let mut opt = Adam::new(model.params(), train_cfg.learning_rate);
    let invariant_learning = model.components().invariant_learning;
    let mut best: Option<(f64, usize, Vec<Array2<f64>>)> = None;
    let mut since_best = 0;

    for epoch in 0..train_cfg.max_epochs {
        let started = Instant::now();
        train_windows.shuffle(&mut shuffle_rng);
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for chunk in train_windows.chunks(train_cfg.batch_size) {
            let batch = data.batch(chunk);
            if !batch.has_valid_targets() {
                continue;
            }
            let source = invariant_learning.then(|| {
                Rc::new(batch_source_map(
                    batch.samples,
                    batch.steps,
                    batch.nodes,
                    intervention.ratio,
                    &mut swap_rng,
                ))
            });
            let (losses, mut grads) = loss_and_gradients(&model, &batch, source, loss_cfg)?;
            clip_global_norm(&mut grads, train_cfg.grad_clip_norm);
            opt.step(model.params_mut(), &grads);
            for (s, v) in sums.iter_mut().zip([losses.total, losses.task, losses.inv, losses.reg]) {
                *s += v;
            }
            batches += 1;
        }
        if batches == 0 {
            return Err(MipError::Data("no training batch has valid targets".into()));
        }
        let val_mae = split_mae(&model, data, &val_windows, train_cfg.batch_size)?;
        if !val_mae.is_finite() {
            return Err(MipError::Numerical(format!("validation MAE is {val_mae} at epoch {epoch}")));
        }
        let n = batches as f64;
        let record = EpochRecord {
            epoch,
            loss_total: sums[0] / n,
            loss_task: sums[1] / n,
            loss_inv: sums[2] / n,
            loss_reg: sums[3] / n,
            val_mae,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: total {:.5} task {:.5} inv {:.5} reg {:.5} val_mae {:.5}",
            record.loss_total,
            record.loss_task,
            record.loss_inv,
            record.loss_reg,
            val_mae
        );
        on_epoch(&record);
        report.epochs.push(record);

        if best.as_ref().is_none_or(|b| val_mae < b.0) {
            best = Some((val_mae, epoch, model.params().values().to_vec()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_cfg.early_stop_patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some((mae, epoch, values)) = best {
        model.params_mut().values_mut().clone_from_slice(&values);
        report.best_epoch = Some(epoch);
        report.best_val_mae = Some(mae);
    }
    Ok((model, report))
}
