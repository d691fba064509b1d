//! Config-driven glue: load or generate data, build a model, train and
//! evaluate one variant or the whole ablation matrix.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Config, Variant};
use crate::data::{load_dataset, make_windows, WindowedDataset};
use crate::error::{MipError, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::graph::GeoGraph;
use crate::model::{Dims, MipModel};
use crate::synth::generate_synthetic;
use crate::train::{train_with, EpochRecord, TrainReport};

/// Windowed data and its graph as described by `config.data`.
pub fn prepare_data(config: &Config) -> Result<(WindowedDataset, GeoGraph)> {
    let d = &config.data;
    let (mut raw, graph) = match (&d.synthetic, &d.path) {
        (Some(synth), _) => generate_synthetic(synth)?,
        (None, Some(path)) => load_dataset(path)?,
        (None, None) => {
            return Err(MipError::Config(
                "set data.path or a [data.synthetic] section".into(),
            ))
        }
    };
    if let Some(mask) = d.mask_zeros {
        raw.mask_zeros = mask;
    }
    Ok((make_windows(raw, d.window, &d.splits)?, graph))
}

pub fn build_model(config: &Config, data: &WindowedDataset, graph: GeoGraph) -> Result<MipModel> {
    let dims = Dims {
        nodes: data.num_nodes(),
        features: data.num_features(),
        window: data.window,
    };
    MipModel::new(&config.model, dims, graph)
}

/// Outcome of training and evaluating one variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub metrics: MetricsReport,
    pub training: TrainReport,
    pub seconds: f64,
}

/// Trains `variant` under `config` (other settings unchanged) and evaluates it.
pub fn run_variant(
    config: &Config,
    variant: Variant,
    data: &WindowedDataset,
    graph: &GeoGraph,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MipModel, VariantRun)> {
    let started = Instant::now();
    let mut config = config.clone();
    config.model.variant = variant;
    let model = build_model(&config, data, graph.clone())?;
    let (model, training) = train_with(model, data, &config.train, &config.loss, &config.intervention, on_epoch)?;
    let metrics = evaluate(&model, data, config.train.batch_size)?;
    let run = VariantRun {
        variant,
        metrics,
        training,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, run))
}

/// Runs every variant in order on the same data.
pub fn run_ablation(
    config: &Config,
    variants: &[Variant],
    data: &WindowedDataset,
    graph: &GeoGraph,
) -> Result<Vec<VariantRun>> {
    variants
        .iter()
        .map(|&v| {
            log::info!("training variant {v}");
            run_variant(config, v, data, graph, |_| {}).map(|(_, run)| run)
        })
        .collect()
}

/// Text table of one metric per split for each run.
pub fn ablation_table(runs: &[VariantRun], all_horizons: bool) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let splits: Vec<String> = runs
        .first()
        .map(|r| r.metrics.blocks.iter().map(|b| b.split.clone()).collect())
        .unwrap_or_default();
    let _ = write!(out, "{:<24}", "variant");
    for s in &splits {
        let _ = write!(out, " {:>10} {:>10}", format!("{s} MAE"), format!("{s} RMSE"));
    }
    out.push('\n');
    for run in runs {
        let _ = write!(out, "{:<24}", run.variant.label());
        for block in &run.metrics.blocks {
            let m = if all_horizons { &block.all_horizons } else { &block.final_horizon };
            let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = write!(out, " {:>10} {:>10}", cell(m.mae), cell(m.rmse));
        }
        out.push('\n');
    }
    out
}
