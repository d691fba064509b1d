//! The full predictor: prompt extraction from the memory bank, the
//! memory-derived semantic graph, the prediction backbone and the auxiliary
//! predictor used for invariant learning.
//!
//! Everything runs on a [`Tape`] over rows ordered `(sample, step, node)`,
//! so one code path serves training, inference and gradient checks.

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, GraphOperators};
use crate::config::{Components, LossConfig, ModelConfig, Reduction};
use crate::error::{MipError, Result};
use crate::graph::{build_transitions, GeoGraph, TransitionPair};
use crate::memory::{top_two, MemoryBank, PromptKind};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tape::{Tape, Var};

/// Sizes fixed by the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nodes: usize,
    pub features: usize,
    pub window: usize,
}

#[derive(Debug, Clone)]
struct PromptIds {
    query_weight: ParamId,
    query_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct MipModel {
    config: ModelConfig,
    dims: Dims,
    graph: GeoGraph,
    params: ParamSet,
    prompt: Option<PromptIds>,
    bank: Option<ParamId>,
    semantic: Option<(ParamId, ParamId)>,
    backbone: Backbone,
    aux: Option<Backbone>,
    transitions: TransitionPair,
}

/// Tape handles for the prompt stacks of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PromptVars {
    pub invariant: Var,
    pub variant: Var,
    pub invariant_scores: Var,
    pub variant_scores: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub prediction: Var,
    pub prompts: Option<PromptVars>,
    pub semantic: Option<Var>,
    pub bank: Option<Var>,
}

/// The joint objective and its components, all `1×1` tape values.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub total: Var,
    pub task: Var,
    pub inv: Var,
    pub reg: Var,
    pub prediction: Var,
}

/// Targets of one batch, shared with the loss ops.
#[derive(Debug, Clone)]
pub struct Targets {
    pub values: Rc<Array2<f64>>,
    pub mask: Option<Rc<Array2<f64>>>,
}

impl MipModel {
    pub fn new(config: &ModelConfig, dims: Dims, graph: GeoGraph) -> Result<Self> {
        config.validate()?;
        if dims.nodes == 0 || dims.features == 0 || dims.window == 0 {
            return Err(MipError::Config(format!("model dims must be positive, got {dims:?}")));
        }
        if graph.num_nodes() != dims.nodes {
            return Err(MipError::Config(format!(
                "graph has {} nodes but the data has {}",
                graph.num_nodes(),
                dims.nodes
            )));
        }
        let c = config.variant.components();
        let d = config.hidden_dim;
        let m = config.num_prototypes;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();

        let prompt = c.prompts.then(|| PromptIds {
            query_weight: params.add_uniform("prompt.query.weight", dims.features, d, dims.features, &mut rng),
            query_bias: params.add_zeros("prompt.query.bias", 1, d),
        });
        let bank = if c.prompts || c.semantic_graph {
            let bank = MemoryBank::init(m, d, &mut rng)?;
            Some(params.add("memory.prototypes", bank.prototypes().clone()))
        } else {
            None
        };
        let semantic = c.semantic_graph.then(|| {
            (
                params.add_uniform("semantic.proj_a", dims.nodes, m, m, &mut rng),
                params.add_uniform("semantic.proj_b", dims.nodes, m, m, &mut rng),
            )
        });
        let base = BackboneConfig {
            num_st_layers: config.num_st_layers,
            diffusion_order: config.diffusion_order,
            hidden_dim: d,
            attention_heads: config.attention_heads,
            input_dim: if c.prompts { d } else { dims.features },
            output_dim: dims.features,
            horizon: dims.window,
            ffn_dim: config.ffn_width(),
            positional_embedding: config.positional_embedding,
            semantic_graph: c.semantic_graph,
        };
        let backbone = Backbone::new(base.clone(), "backbone", &mut params, &mut rng)?;
        let aux = if c.invariant_learning {
            let aux_cfg = BackboneConfig {
                input_dim: 2 * d,
                semantic_graph: false,
                ..base
            };
            Some(Backbone::new(aux_cfg, "aux", &mut params, &mut rng)?)
        } else {
            None
        };
        let transitions = build_transitions(&graph);
        Ok(Self {
            config: config.clone(),
            dims,
            graph,
            params,
            prompt,
            bank,
            semantic,
            backbone,
            aux,
            transitions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn components(&self) -> Components {
        self.config.variant.components()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn graph(&self) -> &GeoGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn aux(&self) -> Option<&Backbone> {
        self.aux.as_ref()
    }

    /// Current prototypes, if the variant has a memory bank.
    pub fn memory_bank(&self) -> Option<MemoryBank> {
        self.bank.map(|id| MemoryBank::new(self.params.get(id).clone()).expect("bank stays valid"))
    }

    /// Rows per sample in the flattened layout.
    pub fn slab(&self) -> usize {
        self.dims.window * self.dims.nodes
    }

    fn graph_operators(&self, semantic: Option<Var>) -> GraphOperators {
        GraphOperators::new(&self.transitions, semantic)
    }

    fn check_rows(&self, rows: usize, width: usize, what: &'static str) -> Result<()> {
        if rows == 0 || !rows.is_multiple_of(self.slab()) || width != self.dims.features {
            return Err(MipError::shape(
                what,
                format!("(B·{}·{})×{}", self.dims.window, self.dims.nodes, self.dims.features),
                format!("{rows}×{width}"),
            ));
        }
        Ok(())
    }

    /// Prediction for normalized inputs placed on the tape as `inputs`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, inputs: Var) -> Result<ForwardVars> {
        let (rows, width) = tape.value(inputs).dim();
        self.check_rows(rows, width, "model input")?;
        let bank = self.bank.map(|id| bound[id]);
        let prompts = match (&self.prompt, bank) {
            (Some(ids), Some(phi)) => {
                let q = tape.matmul(inputs, bound[ids.query_weight]);
                let q = tape.add_row(q, bound[ids.query_bias]);
                let logits = tape.matmul_nt(q, phi);
                let invariant_scores = tape.row_softmax(logits);
                let invariant = tape.matmul(invariant_scores, phi);
                let negated = tape.neg(logits);
                let variant_scores = tape.row_softmax(negated);
                let variant = tape.matmul(variant_scores, phi);
                Some(PromptVars {
                    invariant,
                    variant,
                    invariant_scores,
                    variant_scores,
                })
            }
            _ => None,
        };
        let semantic = match (self.semantic, bank) {
            (Some((a, b)), Some(phi)) => {
                let left = tape.matmul(bound[a], phi);
                let right = tape.matmul(bound[b], phi);
                let logits = tape.matmul_nt(left, right);
                Some(tape.row_softmax(logits))
            }
            _ => None,
        };
        let graphs = self.graph_operators(semantic);
        let backbone_input = match prompts {
            Some(p) => match self.config.init_prompt {
                PromptKind::Invariant => p.invariant,
                PromptKind::Variant => p.variant,
            },
            None => inputs,
        };
        let prediction = self.backbone.forward(tape, bound, backbone_input, &graphs)?;
        Ok(ForwardVars {
            prediction,
            prompts,
            semantic,
            bank,
        })
    }

    /// Auxiliary prediction from `H_I ‖ Ĥ_V`, where `Ĥ_V` reads row
    /// `source[r]` of the variant prompts (the identity when `None`).
    pub fn aux_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prompts: &PromptVars,
        source: Option<Rc<Vec<usize>>>,
    ) -> Result<Var> {
        let aux = self
            .aux
            .as_ref()
            .ok_or_else(|| MipError::Contract("this variant has no auxiliary predictor".into()))?;
        let variant = match source {
            Some(index) => {
                if index.len() != tape.value(prompts.variant).nrows() {
                    return Err(MipError::shape(
                        "intervention source map",
                        tape.value(prompts.variant).nrows().to_string(),
                        index.len().to_string(),
                    ));
                }
                tape.gather_rows(prompts.variant, index)
            }
            None => prompts.variant,
        };
        let joined = tape.concat_cols(prompts.invariant, variant);
        let graphs = self.graph_operators(None);
        aux.forward(tape, bound, joined, &graphs)
    }

    /// Builds `task + inv + λ₂·reg` for one batch. Terms a variant does not
    /// use are constant zeros. `source` is the batch-wide intervention map.
    pub fn objective(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: Var,
        targets: &Targets,
        source: Option<Rc<Vec<usize>>>,
        loss: &LossConfig,
    ) -> Result<ObjectiveVars> {
        let fwd = self.forward(tape, bound, inputs)?;
        if tape.value(fwd.prediction).dim() != targets.values.dim() {
            return Err(MipError::shape(
                "targets",
                format!("{:?}", tape.value(fwd.prediction).dim()),
                format!("{:?}", targets.values.dim()),
            ));
        }
        if targets.mask.as_ref().is_some_and(|m| m.sum() <= 0.0) {
            return Err(MipError::Data("batch has no valid targets".into()));
        }
        let task = tape.masked_mae(fwd.prediction, targets.values.clone(), targets.mask.clone());
        let c = self.components();
        let inv = match (&fwd.prompts, c.invariant_learning) {
            (Some(p), true) => {
                let aux = self.aux_forward(tape, bound, p, source)?;
                tape.invariant_risk(aux, targets.values.clone(), targets.mask.clone(), loss.lambda1)
            }
            _ => tape.constant(Array2::zeros((1, 1))),
        };
        let reg = match (&fwd.prompts, fwd.bank, c.memory_reg) {
            (Some(p), Some(phi), true) => {
                let top = top_two(tape.value(p.invariant_scores).view())?;
                let scale = match loss.reg_reduction {
                    Reduction::Mean => 1.0 / top.len() as f64,
                    Reduction::Sum => 1.0,
                };
                tape.memory_reg(p.invariant, phi, Rc::new(top), loss.margin, scale)
            }
            _ => tape.constant(Array2::zeros((1, 1))),
        };
        let total = tape.weighted_sum(vec![(task, 1.0), (inv, 1.0), (reg, loss.lambda2)]);
        Ok(ObjectiveVars {
            total,
            task,
            inv,
            reg,
            prediction: fwd.prediction,
        })
    }

    /// Frozen-model prediction for normalized input rows.
    pub fn predict(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let fwd = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(fwd.prediction).clone())
    }

    /// Invariant and variant prompt scores (`rows × M`) for normalized inputs.
    pub fn prompt_scores(&self, inputs: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let fwd = self.forward(&mut tape, &bound, x)?;
        let p = fwd
            .prompts
            .ok_or_else(|| MipError::Config(format!("variant `{}` has no prompts", self.config.variant)))?;
        Ok((
            tape.value(p.invariant_scores).clone(),
            tape.value(p.variant_scores).clone(),
        ))
    }

    /// Current semantic adjacency `Ã`, if the variant builds one.
    pub fn semantic_adjacency(&self) -> Option<Array2<f64>> {
        let (a, b) = self.semantic?;
        let phi = self.params.get(self.bank?);
        let left = self.params.get(a).dot(phi);
        let right = self.params.get(b).dot(phi);
        Some(crate::linalg::row_softmax(left.dot(&right.t()).view()))
    }
}
