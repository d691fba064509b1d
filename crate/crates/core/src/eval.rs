//! Frozen-model evaluation on the three test periods and their union.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{unflatten, FlowTensor, Split, Units, WindowedDataset};
use crate::error::{MipError, Result};
use crate::metrics::{accumulate, Accumulator, Metrics};
use crate::model::{Dims, MipModel};

/// Anything that maps normalized input rows to normalized predictions.
pub trait Predictor {
    fn dims(&self) -> Dims;
    fn predict_rows(&self, inputs: &ndarray::Array2<f64>) -> Result<ndarray::Array2<f64>>;
}

impl Predictor for MipModel {
    fn dims(&self) -> Dims {
        MipModel::dims(self)
    }

    fn predict_rows(&self, inputs: &ndarray::Array2<f64>) -> Result<ndarray::Array2<f64>> {
        self.predict(inputs)
    }
}

/// Metrics of one test period (or the union of all three).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub windows: usize,
    /// Last step of the output window.
    pub final_horizon: Metrics,
    /// Pooled over every step of the output window.
    pub all_horizons: Metrics,
    pub per_horizon: Vec<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// test0, test1, test2, overall.
    pub blocks: Vec<SplitMetrics>,
}

impl MetricsReport {
    pub fn block(&self, split: &str) -> Option<&SplitMetrics> {
        self.blocks.iter().find(|b| b.split == split)
    }

    pub fn overall(&self) -> &SplitMetrics {
        self.blocks.last().expect("report has blocks")
    }

    /// Plain-text table of final-horizon (or pooled) metrics.
    pub fn table(&self, all_horizons: bool) -> String {
        let mut out = String::new();
        let label = if all_horizons { "all horizons" } else { "final horizon" };
        let _ = writeln!(out, "{label}");
        let _ = writeln!(out, "{:<8} {:>10} {:>10} {:>10} {:>10}", "split", "MAE", "RMSE", "MAPE%", "count");
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        for b in &self.blocks {
            let m = if all_horizons { &b.all_horizons } else { &b.final_horizon };
            let _ = writeln!(
                out,
                "{:<8} {:>10} {:>10} {:>10} {:>10}",
                b.split,
                fmt(m.mae),
                fmt(m.rmse),
                fmt(m.mape),
                m.count
            );
        }
        out
    }
}

/// Per-horizon accumulators for a set of windows.
fn score_windows(
    model: &impl Predictor,
    data: &WindowedDataset,
    windows: &[usize],
    batch_size: usize,
) -> Result<Vec<Accumulator>> {
    let steps = data.window;
    let mut acc = vec![Accumulator::default(); steps];
    for chunk in windows.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk);
        let pred = model.predict_rows(&batch.inputs)?;
        for (tensor, &w) in unflatten(&pred, steps, data.num_nodes()).into_iter().zip(chunk) {
            let raw = data.normalizer.denormalize(&FlowTensor {
                values: tensor,
                units: Units::Normalized,
            })?;
            let target = data.raw_target(w);
            let mask = data.target_mask(w);
            for (h, slot) in acc.iter_mut().enumerate() {
                let sl = ndarray::s![h..h + 1, .., ..];
                let m = mask.as_ref().map(|m| m.slice(sl).to_owned());
                accumulate(
                    slot,
                    &raw.values.slice(sl).to_owned(),
                    &target.values.slice(sl).to_owned(),
                    m.as_ref(),
                );
            }
        }
    }
    Ok(acc)
}

fn block(split: &str, windows: usize, per: &[Accumulator]) -> SplitMetrics {
    let mut pooled = Accumulator::default();
    for a in per {
        pooled.merge(a);
    }
    SplitMetrics {
        split: split.to_string(),
        windows,
        final_horizon: per.last().map(|a| a.finish()).unwrap_or_default(),
        all_horizons: pooled.finish(),
        per_horizon: per.iter().map(|a| a.finish()).collect(),
    }
}

/// Evaluates on test0, test1, test2 and their union, in raw units.
pub fn evaluate(model: &impl Predictor, data: &WindowedDataset, batch_size: usize) -> Result<MetricsReport> {
    let dims = model.dims();
    if dims.nodes != data.num_nodes() || dims.features != data.num_features() || dims.window != data.window {
        return Err(MipError::Config(format!(
            "checkpoint expects N={}, k={}, T={} but the data has N={}, k={}, T={}",
            dims.nodes,
            dims.features,
            dims.window,
            data.num_nodes(),
            data.num_features(),
            data.window
        )));
    }
    let mut blocks = Vec::with_capacity(4);
    let mut union = vec![Accumulator::default(); data.window];
    let mut union_windows = 0;
    for split in Split::TESTS {
        let windows: Vec<usize> = data.splits.get(split).collect();
        let per = score_windows(model, data, &windows, batch_size)?;
        for (u, a) in union.iter_mut().zip(&per) {
            u.merge(a);
        }
        union_windows += windows.len();
        blocks.push(block(split.name(), windows.len(), &per));
    }
    blocks.push(block("overall", union_windows, &union));
    Ok(MetricsReport { blocks })
}
