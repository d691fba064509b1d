//! MAE, RMSE and MAPE in raw units.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{FlowTensor, Units};
use crate::error::{MipError, Result};

/// Metric values; `None` when no entry qualified.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    /// Percent.
    pub mape: Option<f64>,
    pub count: usize,
    /// Entries with a nonzero target, the MAPE denominator.
    pub mape_count: usize,
}

/// Running sums that reduce to [`Metrics`]; merging is exact, so pooled
/// metrics equal a recomputation over the union of elements.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
    ape_count: usize,
}

impl Accumulator {
    pub fn push(&mut self, pred: f64, target: f64) {
        let e = pred - target;
        self.abs += e.abs();
        self.sq += e * e;
        self.count += 1;
        if target != 0.0 {
            self.ape += (e / target).abs();
            self.ape_count += 1;
        }
    }

    pub fn merge(&mut self, other: &Accumulator) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.ape += other.ape;
        self.count += other.count;
        self.ape_count += other.ape_count;
    }

    pub fn finish(&self) -> Metrics {
        let n = self.count as f64;
        Metrics {
            mae: (self.count > 0).then(|| self.abs / n),
            rmse: (self.count > 0).then(|| (self.sq / n).sqrt()),
            mape: (self.ape_count > 0).then(|| 100.0 * self.ape / self.ape_count as f64),
            count: self.count,
            mape_count: self.ape_count,
        }
    }
}

/// Adds every unmasked entry of one prediction/target pair.
pub fn accumulate(acc: &mut Accumulator, pred: &Array3<f64>, target: &Array3<f64>, mask: Option<&Array3<f64>>) {
    match mask {
        Some(m) => Zip::from(pred).and(target).and(m).for_each(|&p, &t, &w| {
            if w > 0.0 {
                acc.push(p, t)
            }
        }),
        None => Zip::from(pred).and(target).for_each(|&p, &t| acc.push(p, t)),
    }
}

/// Metrics over a set of raw-unit tensors, with optional per-tensor masks.
pub fn compute_metrics(preds: &[FlowTensor], targets: &[FlowTensor], masks: Option<&[Array3<f64>]>) -> Result<Metrics> {
    if preds.len() != targets.len() || masks.is_some_and(|m| m.len() != preds.len()) {
        return Err(MipError::shape(
            "metric inputs",
            format!("{} tensors", preds.len()),
            format!("{} targets", targets.len()),
        ));
    }
    let mut acc = Accumulator::default();
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        if p.units != Units::Raw || t.units != Units::Raw {
            return Err(MipError::Contract("metrics are computed on denormalized values".into()));
        }
        if p.values.dim() != t.values.dim() {
            return Err(MipError::shape(
                "metric pair",
                format!("{:?}", t.values.dim()),
                format!("{:?}", p.values.dim()),
            ));
        }
        accumulate(&mut acc, &p.values, &t.values, masks.map(|m| &m[i]));
    }
    Ok(acc.finish())
}
