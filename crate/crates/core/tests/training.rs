use std::rc::Rc;

use mip_core::checkpoint::Checkpoint;
use mip_core::config::{Config, LossConfig, ModelConfig, TrainConfig, Variant};
use mip_core::data::{make_windows, read_numeric_csv, Split, WindowedDataset};
use mip_core::export::{export_prompt_scores, ExportRequest};
use mip_core::intervention::InterventionConfig;
use mip_core::model::{Dims, MipModel};
use mip_core::optim::{clip_global_norm, Adam};
use mip_core::synth::{generate_synthetic, SynthConfig};
use mip_core::tape::Tape;
use mip_core::train::train;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WINDOW: usize = 4;

fn dataset(nodes: usize) -> (WindowedDataset, mip_core::graph::GeoGraph) {
    let (raw, graph) = generate_synthetic(&SynthConfig {
        num_nodes: nodes,
        num_steps: 120,
        ..SynthConfig::default()
    })
    .unwrap();
    (make_windows(raw, WINDOW, &[0.6, 0.1, 0.1, 0.1, 0.1]).unwrap(), graph)
}

fn small_model(variant: Variant, graph: mip_core::graph::GeoGraph) -> MipModel {
    let cfg = ModelConfig {
        hidden_dim: 8,
        num_prototypes: 5,
        num_st_layers: 1,
        variant,
        ..ModelConfig::default()
    };
    let dims = Dims {
        nodes: graph.num_nodes(),
        features: 1,
        window: WINDOW,
    };
    MipModel::new(&cfg, dims, graph).unwrap()
}

fn short_run() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_epochs: 3,
        early_stop_patience: 10,
        ..TrainConfig::default()
    }
}

/// Plain MAE training written out by hand: same shuffle stream, batching,
/// clipping and Adam settings, no prompts, no auxiliary terms.
fn direct_mae_epochs(mut model: MipModel, data: &WindowedDataset, cfg: &TrainConfig) -> Vec<f64> {
    let mut windows: Vec<usize> = data.splits.get(Split::Train).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.params(), cfg.learning_rate);
    let mut curve = Vec::new();
    for _ in 0..cfg.max_epochs {
        windows.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0);
        for chunk in windows.chunks(cfg.batch_size) {
            let batch = data.batch(chunk);
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, true);
            let x = tape.constant(batch.inputs.clone());
            let pred = model.forward(&mut tape, &bound, x).unwrap().prediction;
            let mae = tape.masked_mae(pred, Rc::new(batch.targets.clone()), None);
            let mut g = tape.backward(mae);
            let mut grads: Vec<Option<Array2<f64>>> = bound.vars().iter().map(|&v| g.take(v)).collect();
            clip_global_norm(&mut grads, cfg.grad_clip_norm);
            opt.step(model.params_mut(), &grads);
            sum += tape.scalar(mae);
            count += 1;
        }
        curve.push(sum / count as f64);
    }
    curve
}

#[test]
fn backbone_training_is_plain_mae_training() {
    let (data, graph) = dataset(5);
    let model = small_model(Variant::Backbone, graph);
    let cfg = TrainConfig {
        early_stop_patience: 100,
        ..short_run()
    };
    let expected = direct_mae_epochs(model.clone(), &data, &cfg);
    for loss in [
        LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..LossConfig::default()
        },
        LossConfig::default(),
    ] {
        let (_, report) = train(model.clone(), &data, &cfg, &loss, &InterventionConfig::default()).unwrap();
        let got: Vec<f64> = report.epochs.iter().map(|r| r.loss_total).collect();
        assert_eq!(got, expected);
        assert!(report.epochs.iter().all(|r| r.loss_inv == 0.0 && r.loss_reg == 0.0));
    }
}

#[test]
fn checkpoint_files_restore_predictions_bit_exactly() {
    let (data, graph) = dataset(5);
    let (model, _) = train(
        small_model(Variant::Full, graph),
        &data,
        &short_run(),
        &LossConfig::default(),
        &InterventionConfig::default(),
    )
    .unwrap();
    let config = Config {
        model: model.config().clone(),
        ..Config::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    Checkpoint::new(&model, &config, Some(&data.normalizer)).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.normalizer.as_ref(), Some(&data.normalizer));
    let restored = loaded.model().unwrap();
    for w in data.splits.get(Split::Test2).take(10) {
        let batch = data.batch(&[w]);
        let (a, b) = (model.predict(&batch.inputs).unwrap(), restored.predict(&batch.inputs).unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn exported_scores_are_stochastic_and_differ_between_variants() {
    let (data, graph) = dataset(6);
    let windows: Vec<usize> = data.splits.get(Split::Test0).collect();
    let request = ExportRequest {
        node: 3,
        horizon: WINDOW,
        windows: windows.clone(),
    };
    let dir = tempfile::tempdir().unwrap();
    let mut exports = Vec::new();
    for variant in [Variant::WoInvariantLearning, Variant::Full] {
        let (model, _) = train(
            small_model(variant, graph.clone()),
            &data,
            &short_run(),
            &LossConfig::default(),
            &InterventionConfig::default(),
        )
        .unwrap();
        let out = dir.path().join(variant.label());
        let export = export_prompt_scores(&model, &data, &request, &out).unwrap();
        assert_eq!(export.files.len(), 6);
        for file in export.files.iter().filter(|f| f.extension().is_some_and(|e| e == "csv")) {
            let rows = read_numeric_csv(file).unwrap();
            assert!(!rows.is_empty());
            for row in rows {
                assert_eq!(row.len(), 5);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
        assert_eq!(export.invariant_node.nrows(), windows.len());
        exports.push(export);
    }
    let gap = (&exports[0].invariant_node - &exports[1].invariant_node)
        .mapv(|v| v * v)
        .sum()
        .sqrt();
    assert!(gap > 0.0);
}

#[test]
fn export_rejects_out_of_range_requests() {
    let (data, graph) = dataset(5);
    let model = small_model(Variant::Full, graph);
    let dir = tempfile::tempdir().unwrap();
    for (node, horizon, windows) in [(5, 1, vec![0]), (0, 0, vec![0]), (0, WINDOW + 1, vec![0]), (0, 1, vec![])] {
        let req = ExportRequest { node, horizon, windows };
        assert!(export_prompt_scores(&model, &data, &req, dir.path()).is_err());
    }
    let backbone = small_model(Variant::Backbone, model.graph().clone());
    let req = ExportRequest {
        node: 0,
        horizon: 1,
        windows: vec![0],
    };
    assert!(export_prompt_scores(&backbone, &data, &req, dir.path()).is_err());
}
