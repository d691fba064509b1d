//! Loss terms on plain arrays. The tape ops in [`crate::tape`] compute the
//! same quantities with gradients; these versions are the reference used in
//! reports and tests.

use ndarray::{Array3, Zip};

use crate::config::LossConfig;
use crate::data::FlowTensor;
use crate::error::{MipError, Result};

/// Mean absolute error across the feature vector of one `(t, n)` slot.
pub fn elementwise_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(MipError::shape(
            "elementwise loss",
            format!("{} features", target.len()),
            format!("{} features", pred.len()),
        ));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

fn check_pair(pred: &FlowTensor, target: &FlowTensor, mask: Option<&Array3<f64>>) -> Result<()> {
    if pred.values.dim() != target.values.dim() {
        return Err(MipError::shape(
            "loss inputs",
            format!("{:?}", target.values.dim()),
            format!("{:?}", pred.values.dim()),
        ));
    }
    if pred.units != target.units {
        return Err(MipError::Contract("prediction and target carry different units".into()));
    }
    if let Some(m) = mask {
        if m.dim() != pred.values.dim() {
            return Err(MipError::shape("loss mask", format!("{:?}", pred.values.dim()), format!("{:?}", m.dim())));
        }
    }
    Ok(())
}

/// Per-slot losses over every `(t, n)` slot with at least one valid entry.
/// Masked entries are dropped from the slot's mean.
pub fn slot_losses(pred: &FlowTensor, target: &FlowTensor, mask: Option<&Array3<f64>>) -> Result<Vec<f64>> {
    check_pair(pred, target, mask)?;
    let (steps, nodes, k) = pred.values.dim();
    let mut out = Vec::with_capacity(steps * nodes);
    for t in 0..steps {
        for n in 0..nodes {
            let (mut sum, mut count) = (0.0, 0.0);
            for f in 0..k {
                let w = mask.map_or(1.0, |m| m[[t, n, f]]);
                sum += w * (pred.values[[t, n, f]] - target.values[[t, n, f]]).abs();
                count += w;
            }
            if count > 0.0 {
                out.push(sum / count);
            }
        }
    }
    Ok(out)
}

/// Mean of the slot losses plus `lambda1` times their population variance.
pub fn invariant_loss(
    aux_pred: &FlowTensor,
    target: &FlowTensor,
    lambda1: f64,
    mask: Option<&Array3<f64>>,
) -> Result<f64> {
    let losses = slot_losses(aux_pred, target, mask)?;
    if losses.is_empty() {
        return Err(MipError::Data("invariant loss over an empty valid set".into()));
    }
    let count = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / count;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / count;
    Ok(mean + lambda1 * var)
}

/// Mean absolute error over every valid scalar entry.
pub fn task_loss(pred: &FlowTensor, target: &FlowTensor, mask: Option<&Array3<f64>>) -> Result<f64> {
    check_pair(pred, target, mask)?;
    let (mut sum, mut count) = (0.0, 0.0);
    match mask {
        Some(m) => Zip::from(&pred.values)
            .and(&target.values)
            .and(m)
            .for_each(|&p, &t, &w| {
                sum += w * (p - t).abs();
                count += w;
            }),
        None => Zip::from(&pred.values).and(&target.values).for_each(|&p, &t| {
            sum += (p - t).abs();
            count += 1.0;
        }),
    }
    if count <= 0.0 {
        return Err(MipError::Data("task loss over an empty valid set".into()));
    }
    Ok(sum / count)
}

pub fn total_loss(task: f64, inv: f64, reg: f64, cfg: &LossConfig) -> f64 {
    task + inv + cfg.lambda2 * reg
}
