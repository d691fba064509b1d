//! Stacked diffusion-GNN / temporal-attention backbone.
//!
//! One spatio-temporal layer is
//!
//! ```text
//! x ← LayerNorm(x + Σ_{z=0..Z} (P_f^z x W1_z + P_b^z x W2_z + Ã^z x W3_z))
//! x ← LayerNorm(x + FFN(Attention(x + pos)))
//! ```
//!
//! preceded by a linear input projection and followed by a two-layer
//! per-slot prediction head. The same type serves as the auxiliary predictor
//! (input width `2d`, geolocation graph only).

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MipError, Result};
use crate::graph::{SemanticAdjacency, TransitionPair};
use crate::linalg::MixMatrix;
use crate::params::{Bound, ParamId, ParamSet};
use crate::tape::{Mixer, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_st_layers: usize,
    pub diffusion_order: usize,
    pub hidden_dim: usize,
    pub attention_heads: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub horizon: usize,
    pub ffn_dim: usize,
    pub positional_embedding: bool,
    pub semantic_graph: bool,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_st_layers", self.num_st_layers),
            ("hidden_dim", self.hidden_dim),
            ("attention_heads", self.attention_heads),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
            ("horizon", self.horizon),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(MipError::Config(format!("backbone {name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.attention_heads) {
            return Err(MipError::Config(format!(
                "hidden_dim {} is not divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            )));
        }
        Ok(())
    }
}

/// Diffusion weights of one GNN layer; index `z` holds the order-`z` matrix.
#[derive(Debug, Clone)]
pub struct GnnIds {
    pub forward: Vec<ParamId>,
    pub backward: Vec<ParamId>,
    pub semantic: Vec<ParamId>,
}

#[derive(Debug, Clone)]
pub struct AttentionIds {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub ffn_in: ParamId,
    pub ffn_in_bias: ParamId,
    pub ffn_out: ParamId,
    pub ffn_out_bias: ParamId,
}

#[derive(Debug, Clone)]
struct StLayer {
    gnn: GnnIds,
    norm1: (ParamId, ParamId),
    attention: AttentionIds,
    norm2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    input: (ParamId, ParamId),
    layers: Vec<StLayer>,
    positional: Option<ParamId>,
    head: (ParamId, ParamId, ParamId, ParamId),
}

/// Graph operators shared by every layer of one forward pass.
#[derive(Debug, Clone)]
pub struct GraphOperators {
    /// `P_f` and `P_b`.
    pub forward: Arc<MixMatrix>,
    pub backward: Arc<MixMatrix>,
    /// `Ã` as a tape value.
    pub semantic: Option<Var>,
    pub nodes: usize,
}

impl GraphOperators {
    pub fn new(transitions: &TransitionPair, semantic: Option<Var>) -> Self {
        Self {
            forward: Arc::new(MixMatrix::new(transitions.forward.clone())),
            backward: Arc::new(MixMatrix::new(transitions.backward.clone())),
            semantic,
            nodes: transitions.forward.nrows(),
        }
    }
}

impl Backbone {
    /// Registers all parameters under `prefix` and returns the module.
    pub fn new<R: Rng>(config: BackboneConfig, prefix: &str, params: &mut ParamSet, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let z_count = config.diffusion_order + 1;
        let input = (
            params.add_uniform(format!("{prefix}.input.weight"), config.input_dim, d, config.input_dim, rng),
            params.add_zeros(format!("{prefix}.input.bias"), 1, d),
        );
        let mut layers = Vec::with_capacity(config.num_st_layers);
        for l in 0..config.num_st_layers {
            let p = format!("{prefix}.layer{l}");
            let mats = |kind: &str, params: &mut ParamSet, rng: &mut R| {
                (0..z_count)
                    .map(|z| params.add_uniform(format!("{p}.gnn.{kind}{z}"), d, d, d, rng))
                    .collect::<Vec<_>>()
            };
            let forward = mats("forward", params, rng);
            let backward = mats("backward", params, rng);
            let semantic = if config.semantic_graph {
                mats("semantic", params, rng)
            } else {
                Vec::new()
            };
            let norm1 = (
                params.add(format!("{p}.norm1.gain"), Array2::ones((1, d))),
                params.add_zeros(format!("{p}.norm1.bias"), 1, d),
            );
            let attention = AttentionIds {
                query: params.add_uniform(format!("{p}.attn.query"), d, d, d, rng),
                key: params.add_uniform(format!("{p}.attn.key"), d, d, d, rng),
                value: params.add_uniform(format!("{p}.attn.value"), d, d, d, rng),
                ffn_in: params.add_uniform(format!("{p}.ffn.in"), d, config.ffn_dim, d, rng),
                ffn_in_bias: params.add_zeros(format!("{p}.ffn.in_bias"), 1, config.ffn_dim),
                ffn_out: params.add_uniform(format!("{p}.ffn.out"), config.ffn_dim, d, config.ffn_dim, rng),
                ffn_out_bias: params.add_zeros(format!("{p}.ffn.out_bias"), 1, d),
            };
            let norm2 = (
                params.add(format!("{p}.norm2.gain"), Array2::ones((1, d))),
                params.add_zeros(format!("{p}.norm2.bias"), 1, d),
            );
            layers.push(StLayer {
                gnn: GnnIds {
                    forward,
                    backward,
                    semantic,
                },
                norm1,
                attention,
                norm2,
            });
        }
        let positional = config
            .positional_embedding
            .then(|| params.add_uniform(format!("{prefix}.positional"), config.horizon, d, d, rng));
        let head = (
            params.add_uniform(format!("{prefix}.head.hidden"), d, d, d, rng),
            params.add_zeros(format!("{prefix}.head.hidden_bias"), 1, d),
            params.add_uniform(format!("{prefix}.head.out"), d, config.output_dim, d, rng),
            params.add_zeros(format!("{prefix}.head.out_bias"), 1, config.output_dim),
        );
        Ok(Self {
            config,
            input,
            layers,
            positional,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Parameter ids of the input projection `(weight, bias)`.
    pub fn input_ids(&self) -> (ParamId, ParamId) {
        self.input
    }

    pub fn layer_gnn(&self, layer: usize) -> &GnnIds {
        &self.layers[layer].gnn
    }

    /// Maps `R×input_dim` rows ordered `(sample, step, node)` to `R×output_dim`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var, graphs: &GraphOperators) -> Result<Var> {
        let (rows, width) = tape.value(input).dim();
        let slab = self.config.horizon * graphs.nodes;
        if width != self.config.input_dim || rows % slab != 0 {
            return Err(MipError::shape(
                "backbone input",
                format!("(B·{}·{})×{}", self.config.horizon, graphs.nodes, self.config.input_dim),
                format!("{rows}×{width}"),
            ));
        }
        if self.config.semantic_graph && graphs.semantic.is_none() {
            return Err(MipError::Contract("backbone expects a semantic adjacency".into()));
        }
        let projected = tape.matmul(input, bound[self.input.0]);
        let mut x = tape.add_row(projected, bound[self.input.1]);
        for layer in &self.layers {
            let g = gnn_layer(tape, bound, x, graphs, &layer.gnn);
            let sum = tape.add(x, g);
            x = tape.layer_norm(sum, bound[layer.norm1.0], bound[layer.norm1.1]);
            let t = temporal_block(
                tape,
                bound,
                x,
                self.positional.map(|p| bound[p]),
                &layer.attention,
                self.config.horizon,
                graphs.nodes,
                self.config.attention_heads,
            );
            let sum = tape.add(x, t);
            x = tape.layer_norm(sum, bound[layer.norm2.0], bound[layer.norm2.1]);
        }
        let (w1, b1, w2, b2) = self.head;
        let h = tape.matmul(x, bound[w1]);
        let h = tape.add_row(h, bound[b1]);
        let h = tape.relu(h);
        let out = tape.matmul(h, bound[w2]);
        Ok(tape.add_row(out, bound[b2]))
    }
}

/// `Σ_{z=0..Z} (P_f^z G W1_z + P_b^z G W2_z + Ã^z G W3_z)`; the semantic terms
/// are skipped when `ids.semantic` is empty. `P^z G` is built as
/// `P (P^{z-1} G)`, so no matrix power is ever formed.
pub fn gnn_layer(tape: &mut Tape, bound: &Bound, x: Var, graphs: &GraphOperators, ids: &GnnIds) -> Var {
    let with_semantic = !ids.semantic.is_empty();
    let mut terms = vec![
        tape.matmul(x, bound[ids.forward[0]]),
        tape.matmul(x, bound[ids.backward[0]]),
    ];
    if with_semantic {
        terms.push(tape.matmul(x, bound[ids.semantic[0]]));
    }
    let (mut fwd, mut bwd, mut sem) = (x, x, x);
    for z in 1..ids.forward.len() {
        fwd = tape.block_mix(Mixer::Fixed(graphs.forward.clone()), fwd, graphs.nodes);
        terms.push(tape.matmul(fwd, bound[ids.forward[z]]));
        bwd = tape.block_mix(Mixer::Fixed(graphs.backward.clone()), bwd, graphs.nodes);
        terms.push(tape.matmul(bwd, bound[ids.backward[z]]));
        if with_semantic {
            let a = graphs.semantic.expect("semantic adjacency");
            sem = tape.block_mix(Mixer::Learned(a), sem, graphs.nodes);
            terms.push(tape.matmul(sem, bound[ids.semantic[z]]));
        }
    }
    tape.weighted_sum(terms.into_iter().map(|t| (t, 1.0)).collect())
}

/// Positional embedding, per-node self-attention over time, then the
/// feedforward network.
#[allow(clippy::too_many_arguments)]
pub fn temporal_block(
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    positional: Option<Var>,
    ids: &AttentionIds,
    steps: usize,
    nodes: usize,
    heads: usize,
) -> Var {
    let a = match positional {
        Some(p) => tape.add_positional(x, p, steps, nodes),
        None => x,
    };
    let q = tape.matmul(a, bound[ids.query]);
    let k = tape.matmul(a, bound[ids.key]);
    let v = tape.matmul(a, bound[ids.value]);
    let att = tape.temporal_attention(q, k, v, steps, nodes, heads);
    let h = tape.matmul(att, bound[ids.ffn_in]);
    let h = tape.add_row(h, bound[ids.ffn_in_bias]);
    let h = tape.relu(h);
    let out = tape.matmul(h, bound[ids.ffn_out]);
    tape.add_row(out, bound[ids.ffn_out_bias])
}

/// Plain-value diffusion weights for evaluating one GNN layer outside a model.
#[derive(Debug, Clone)]
pub struct GnnWeights {
    pub forward: Vec<Array2<f64>>,
    pub backward: Vec<Array2<f64>>,
    pub semantic: Vec<Array2<f64>>,
}

/// Evaluates one GNN layer on a single `N×d` snapshot.
pub fn gnn_layer_eval(
    node_states: &Array2<f64>,
    transitions: &TransitionPair,
    semantic: Option<&SemanticAdjacency>,
    weights: &GnnWeights,
) -> Result<Array2<f64>> {
    let n = node_states.nrows();
    let d = node_states.ncols();
    let order = weights.forward.len().saturating_sub(1);
    if weights.backward.len() != order + 1
        || (!weights.semantic.is_empty() && weights.semantic.len() != order + 1)
        || weights.forward.iter().chain(&weights.backward).chain(&weights.semantic).any(|w| w.dim() != (d, d))
    {
        return Err(MipError::shape("gnn weights", format!("{} matrices of {d}×{d}", order + 1), "mismatched set"));
    }
    if transitions.forward.dim() != (n, n) {
        return Err(MipError::shape("transitions", format!("{n}×{n}"), format!("{:?}", transitions.forward.dim())));
    }
    if !weights.semantic.is_empty() && semantic.is_none() {
        return Err(MipError::Contract("semantic weights given without a semantic adjacency".into()));
    }
    let mut tape = Tape::new();
    let mut params = ParamSet::new();
    let ids = GnnIds {
        forward: weights.forward.iter().enumerate().map(|(z, w)| params.add(format!("f{z}"), w.clone())).collect(),
        backward: weights.backward.iter().enumerate().map(|(z, w)| params.add(format!("b{z}"), w.clone())).collect(),
        semantic: weights.semantic.iter().enumerate().map(|(z, w)| params.add(format!("s{z}"), w.clone())).collect(),
    };
    let bound = params.bind(&mut tape, false);
    let semantic = match semantic {
        Some(s) if !weights.semantic.is_empty() => Some(tape.constant(s.matrix.clone())),
        _ => None,
    };
    let graphs = GraphOperators::new(transitions, semantic);
    let x = tape.constant(node_states.clone());
    let out = gnn_layer(&mut tape, &bound, x, &graphs, &ids);
    Ok(tape.value(out).clone())
}

/// Attention weights and output of single-head temporal attention on one
/// `T×d` series (no positional embedding, no feedforward).
pub fn attention_weights(series: &Array2<f64>, wq: &Array2<f64>, wk: &Array2<f64>) -> Array2<f64> {
    let q = series.dot(wq);
    let k = series.dot(wk);
    let d = series.ncols() as f64;
    crate::linalg::row_softmax((q.dot(&k.t()) / d.sqrt()).view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matrix_power;
    use crate::graph::{build_transitions, GeoGraph};
    use ndarray::array;

    fn line3() -> TransitionPair {
        build_transitions(&GeoGraph::new(array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]).unwrap())
    }

    fn zeros(count: usize, d: usize) -> Vec<Array2<f64>> {
        vec![Array2::zeros((d, d)); count]
    }

    #[test]
    fn identity_configuration() {
        let g = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let sem = SemanticAdjacency {
            matrix: Array2::from_elem((3, 3), 1.0 / 3.0),
        };
        let w = GnnWeights {
            forward: zeros(1, 2),
            backward: zeros(1, 2),
            semantic: vec![Array2::eye(2)],
        };
        assert_eq!(gnn_layer_eval(&g, &line3(), Some(&sem), &w).unwrap(), g);
    }

    #[test]
    fn null_configuration() {
        let g = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let w = GnnWeights {
            forward: zeros(3, 2),
            backward: zeros(3, 2),
            semantic: Vec::new(),
        };
        assert_eq!(gnn_layer_eval(&g, &line3(), None, &w).unwrap(), Array2::<f64>::zeros((3, 2)));
    }

    #[test]
    fn first_order_forward_walk() {
        let g = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let mut forward = zeros(2, 2);
        forward[1] = Array2::eye(2);
        let w = GnnWeights {
            forward,
            backward: zeros(2, 2),
            semantic: Vec::new(),
        };
        let out = gnn_layer_eval(&g, &line3(), None, &w).unwrap();
        // brute force: row n = Σ_m P_f[n, m] g[m]
        let p = line3().forward;
        for n in 0..3 {
            for c in 0..2 {
                let expected: f64 = (0..3).map(|m| p[[n, m]] * g[[m, c]]).sum();
                assert!((out[[n, c]] - expected).abs() < 1e-15);
            }
        }
        assert_eq!(out.row(1).to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn single_step_attention_is_trivial() {
        let w = attention_weights(&array![[1.0, -2.0]], &Array2::eye(2), &Array2::eye(2));
        assert_eq!(w, array![[1.0]]);
    }

    #[test]
    fn identical_rows_attend_uniformly() {
        let series = Array2::from_shape_fn((4, 3), |(_, j)| j as f64 + 0.5);
        let wq = Array2::from_shape_fn((3, 3), |(i, j)| (i + 2 * j) as f64 * 0.1);
        let w = attention_weights(&series, &wq, &Array2::eye(3));
        for v in w.iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn second_order_matches_matrix_powers() {
        let g = GeoGraph::from_edges(4, &[(0, 1), (1, 2), (2, 0), (2, 3), (3, 1)]).unwrap();
        let tr = build_transitions(&g);
        let x = Array2::from_shape_fn((4, 2), |(i, j)| (i as f64 + 1.0) * if j == 0 { 0.5 } else { -1.5 });
        let w = |s: f64| Array2::from_shape_fn((2, 2), |(i, j)| s * (1.0 + i as f64) - j as f64);
        let sem = SemanticAdjacency {
            matrix: crate::linalg::row_softmax(Array2::from_shape_fn((4, 4), |(i, j)| (i * j) as f64 / 3.0).view()),
        };
        let weights = GnnWeights {
            forward: vec![w(0.1), w(0.2), w(0.3)],
            backward: vec![w(-0.1), w(0.4), w(-0.2)],
            semantic: vec![w(0.5), w(-0.3), w(0.7)],
        };
        let got = gnn_layer_eval(&x, &tr, Some(&sem), &weights).unwrap();
        let mut want = Array2::zeros((4, 2));
        for z in 0..3 {
            want += &matrix_power(&tr.forward, z).dot(&x).dot(&weights.forward[z]);
            want += &matrix_power(&tr.backward, z).dot(&x).dot(&weights.backward[z]);
            want += &matrix_power(&sem.matrix, z).dot(&x).dot(&weights.semantic[z]);
        }
        assert!(crate::linalg::max_abs_diff(&got, &want) < 1e-12);
    }
}
