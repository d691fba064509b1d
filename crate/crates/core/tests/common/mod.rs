#![allow(dead_code)]

use std::rc::Rc;

use mip_core::config::{LossConfig, ModelConfig};
use mip_core::data::{FlowTensor, Units};
use mip_core::gradcheck::{check_gradients, GradCheck, GradCheckOptions};
use mip_core::graph::{build_semantic_adjacency, SemanticGraphParams};
use mip_core::intervention::batch_source_map;
use mip_core::loss::invariant_loss;
use mip_core::memory::{memory_regularization, top_two, MemoryBank, PromptKind, PromptTensor};
use mip_core::model::{Dims, MipModel, Targets};
use mip_core::params::ParamSet;
use mip_core::synth::random_graph;
use mip_core::tape::Tape;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEPS: usize = 3;
pub const NODES: usize = 4;
pub const PROTOTYPES: usize = 4;
pub const HIDDEN: usize = 4;
pub const FEATURES: usize = 1;

/// Hinge arguments and absolute errors closer to zero than this are resampled.
pub const KINK_CLEARANCE: f64 = 1e-3;

pub fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Memory regularizer as a function of queries and prototypes:
/// scores from the queries, prompts from the scores, top-two held fixed.
pub fn reg_gradcheck(seed: u64, margin: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = STEPS * NODES;
    let mut params = loop {
        let mut p = ParamSet::new();
        p.add("query", normal(rows, HIDDEN, &mut rng));
        p.add("prototypes", normal(PROTOTYPES, HIDDEN, &mut rng));
        if reg_clearance(&p, margin) > KINK_CLEARANCE {
            break p;
        }
    };
    let run = |p: &ParamSet, want_grad: bool| {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true);
        let (q, phi) = (b.vars()[0], b.vars()[1]);
        let logits = tape.matmul_nt(q, phi);
        let scores = tape.row_softmax(logits);
        let h = tape.matmul(scores, phi);
        let top = top_two(tape.value(scores).view()).unwrap();
        let reg = tape.memory_reg(h, phi, Rc::new(top), margin, 1.0);
        let grads = want_grad.then(|| {
            let mut g = tape.backward(reg);
            vec![g.take(q), g.take(phi)]
        });
        (tape.scalar(reg), grads)
    };

    let (value, grads) = run(&params, true);
    assert!((value - reg_oracle(&params, margin)).abs() <= 1e-9 * value.abs().max(1.0));
    check_gradients(&mut params, &grads.unwrap(), |p| run(p, false).0, &GradCheckOptions::default())
}

fn reg_parts(p: &ParamSet) -> (Array2<f64>, Array2<f64>) {
    let (q, phi) = (&p.values()[0], &p.values()[1]);
    let scores = mip_core::linalg::row_softmax(q.dot(&phi.t()).view());
    let h = scores.dot(phi);
    (scores, h)
}

fn reg_clearance(p: &ParamSet, margin: f64) -> f64 {
    let phi = &p.values()[1];
    let (scores, h) = reg_parts(p);
    let mut clearance = f64::INFINITY;
    for (r, (a, b)) in top_two(scores.view()).unwrap().into_iter().enumerate() {
        let da = (&h.row(r) - &phi.row(a)).mapv(|x| x * x).sum();
        let db = (&h.row(r) - &phi.row(b)).mapv(|x| x * x).sum();
        clearance = clearance.min((da - db + margin).abs());
        let mut sorted = scores.row(r).to_vec();
        sorted.sort_by(|x, y| y.total_cmp(x));
        clearance = clearance.min(sorted[0] - sorted[1]).min(sorted[1] - sorted[2]);
    }
    clearance
}

/// Independent value through the per-step tensor API.
fn reg_oracle(p: &ParamSet, margin: f64) -> f64 {
    let (scores, h) = reg_parts(p);
    let prompts = PromptTensor {
        values: h.into_shape_with_order((STEPS, NODES, HIDDEN)).unwrap(),
        kind: PromptKind::Invariant,
    };
    let per_step: Vec<Array2<f64>> = (0..STEPS)
        .map(|t| scores.slice(ndarray::s![t * NODES..(t + 1) * NODES, ..]).to_owned())
        .collect();
    let bank = MemoryBank::new(p.values()[1].clone()).unwrap();
    memory_regularization(&prompts, &per_step, &bank, margin).unwrap()
}

/// Invariant risk as a function of the auxiliary prediction.
pub fn inv_gradcheck(seed: u64, lambda1: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = STEPS * NODES;
    let target = normal(rows, FEATURES, &mut rng);
    let mut params = loop {
        let pred = normal(rows, FEATURES, &mut rng);
        let clearance = (&pred - &target).iter().fold(f64::INFINITY, |m, e| m.min(e.abs()));
        if clearance > KINK_CLEARANCE {
            let mut p = ParamSet::new();
            p.add("prediction", pred);
            break p;
        }
    };
    let target = Rc::new(target);
    let run = |p: &ParamSet, want_grad: bool| {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true);
        let risk = tape.invariant_risk(b.vars()[0], target.clone(), None, lambda1);
        let grads = want_grad.then(|| vec![tape.backward(risk).take(b.vars()[0])]);
        (tape.scalar(risk), grads)
    };

    let (value, grads) = run(&params, true);
    let as_tensor = |m: &Array2<f64>| FlowTensor {
        values: m.clone().into_shape_with_order((STEPS, NODES, FEATURES)).unwrap(),
        units: Units::Normalized,
    };
    let oracle = invariant_loss(&as_tensor(&params.values()[0]), &as_tensor(&target), lambda1, None).unwrap();
    assert!((value - oracle).abs() <= 1e-12);
    check_gradients(&mut params, &grads.unwrap(), |p| run(p, false).0, &GradCheckOptions::default())
}

/// `1ᵀ Ã w` with respect to the prototypes and both projections.
pub fn semantic_gradcheck(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    params.add("prototypes", normal(PROTOTYPES, HIDDEN, &mut rng));
    params.add("proj_a", normal(NODES, PROTOTYPES, &mut rng) * 0.5);
    params.add("proj_b", normal(NODES, PROTOTYPES, &mut rng) * 0.5);
    let weights = normal(NODES, 1, &mut rng);
    let run = |p: &ParamSet, want_grad: bool| {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true);
        let v = b.vars();
        let left = tape.matmul(v[1], v[0]);
        let right = tape.matmul(v[2], v[0]);
        let logits = tape.matmul_nt(left, right);
        let adj = tape.row_softmax(logits);
        let w = tape.constant(weights.clone());
        let ones = tape.constant(Array2::ones((1, NODES)));
        let mixed = tape.matmul(adj, w);
        let total = tape.matmul(ones, mixed);
        let grads = want_grad.then(|| {
            let mut g = tape.backward(total);
            vec![g.take(v[0]), g.take(v[1]), g.take(v[2])]
        });
        (tape.scalar(total), grads)
    };
    let (value, grads) = run(&params, true);
    let oracle = build_semantic_adjacency(
        &MemoryBank::new(params.values()[0].clone()).unwrap(),
        &SemanticGraphParams {
            proj_a: params.values()[1].clone(),
            proj_b: params.values()[2].clone(),
        },
    )
    .unwrap();
    assert!((value - oracle.matrix.dot(&weights).sum()).abs() < 1e-12);
    check_gradients(&mut params, &grads.unwrap(), |p| run(p, false).0, &GradCheckOptions::default())
}

/// A full model at the gradient-check size with a two-sample batch and a
/// fixed intervention map.
pub struct ObjectiveInstance {
    pub model: MipModel,
    pub inputs: Array2<f64>,
    pub targets: Targets,
    pub source: Rc<Vec<usize>>,
    pub loss: LossConfig,
}

pub fn objective_instance(seed: u64) -> ObjectiveInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        hidden_dim: HIDDEN,
        num_prototypes: PROTOTYPES,
        seed,
        ..ModelConfig::default()
    };
    let dims = Dims {
        nodes: NODES,
        features: FEATURES,
        window: STEPS,
    };
    let graph = random_graph(NODES, 2, &mut rng).unwrap();
    let model = MipModel::new(&config, dims, graph).unwrap();
    let samples = 2;
    let rows = samples * STEPS * NODES;
    let inputs = normal(rows, FEATURES, &mut rng);
    let targets = Targets {
        values: Rc::new(normal(rows, FEATURES, &mut rng)),
        mask: None,
    };
    let source = Rc::new(batch_source_map(samples, STEPS, NODES, 0.5, &mut rng));
    ObjectiveInstance {
        model,
        inputs,
        targets,
        source,
        loss: LossConfig::default(),
    }
}

impl ObjectiveInstance {
    /// Returns `(total, task, inv, reg)` and, when asked, the gradient of the total.
    pub fn evaluate(&self, params: &ParamSet, want_grad: bool) -> ([f64; 4], Option<Vec<Option<Array2<f64>>>>) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.constant(self.inputs.clone());
        let obj = self
            .model
            .objective(&mut tape, &bound, x, &self.targets, Some(self.source.clone()), &self.loss)
            .unwrap();
        let values = [obj.total, obj.task, obj.inv, obj.reg].map(|v| tape.scalar(v));
        let grads = want_grad.then(|| {
            let mut g = tape.backward(obj.total);
            bound.vars().iter().map(|&v| g.take(v)).collect()
        });
        (values, grads)
    }

    pub fn gradcheck(&self) -> GradCheck {
        let mut params = self.model.params().clone();
        let (_, grads) = self.evaluate(&params, true);
        check_gradients(
            &mut params,
            &grads.unwrap(),
            |p| self.evaluate(p, false).0[0],
            &GradCheckOptions::default(),
        )
    }
}

pub fn objective_gradcheck(seed: u64) -> GradCheck {
    objective_instance(seed).gradcheck()
}
