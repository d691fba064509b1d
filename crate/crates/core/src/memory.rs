//! Prototype memory bank, query projection and invariant/variant prompt
//! extraction.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MipError, Result};
use crate::linalg::row_softmax;

/// `M×d` matrix of trainable prototype vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    prototypes: Array2<f64>,
}

impl MemoryBank {
    pub fn new(prototypes: Array2<f64>) -> Result<Self> {
        if prototypes.nrows() == 0 || prototypes.ncols() == 0 {
            return Err(MipError::shape("memory bank", "M×d with M, d ≥ 1", format!("{:?}", prototypes.dim())));
        }
        if !crate::linalg::all_finite(&prototypes) {
            return Err(MipError::Domain("memory bank contains non-finite entries".into()));
        }
        Ok(Self { prototypes })
    }

    /// Entries drawn from `U[-1/√d, 1/√d]`.
    pub fn init<R: Rng>(num_prototypes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let values = Array2::from_shape_fn((num_prototypes, dim), |_| rng.random_range(-bound..=bound));
        Self::new(values)
    }

    pub fn prototypes(&self) -> &Array2<f64> {
        &self.prototypes
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }
}

/// Linear map from `k` input features to the `d`-dimensional query space.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Invariant,
    Variant,
}

/// `T×N×d` stack of prompts, each a convex combination of prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTensor {
    pub values: Array3<f64>,
    pub kind: PromptKind,
}

impl PromptTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

/// Per-step `N×M` attention of every node over the prototypes.
pub type PromptScores = Array2<f64>;

/// `X_t W_Q + b_Q`
pub fn project_query(features: ArrayView2<f64>, params: &QueryParams) -> Result<Array2<f64>> {
    let (k, d) = params.weight.dim();
    if features.ncols() != k {
        return Err(MipError::shape("query features", format!("N×{k}"), format!("{:?}", features.dim())));
    }
    if params.bias.len() != d {
        return Err(MipError::shape("query bias", d, params.bias.len()));
    }
    Ok(features.dot(&params.weight) + &params.bias)
}

fn check_query(query: ArrayView2<f64>, bank: &MemoryBank) -> Result<()> {
    if query.ncols() != bank.dim() {
        return Err(MipError::shape("prompt query", format!("N×{}", bank.dim()), format!("{:?}", query.dim())));
    }
    Ok(())
}

/// `S_I = softmax(Q Φᵀ)`, `H_I = S_I Φ`.
pub fn extract_invariant(query: ArrayView2<f64>, bank: &MemoryBank) -> Result<(PromptScores, Array2<f64>)> {
    check_query(query, bank)?;
    let scores = row_softmax(query.dot(&bank.prototypes.t()).view());
    let prompts = scores.dot(&bank.prototypes);
    Ok((scores, prompts))
}

/// `S_V = softmax(−Q Φᵀ)`, `H_V = S_V Φ`.
pub fn extract_variant(query: ArrayView2<f64>, bank: &MemoryBank) -> Result<(PromptScores, Array2<f64>)> {
    check_query(query, bank)?;
    let scores = row_softmax((-query.dot(&bank.prototypes.t())).view());
    let prompts = scores.dot(&bank.prototypes);
    Ok((scores, prompts))
}

/// Output of [`extract_prompts`].
#[derive(Debug, Clone)]
pub struct ExtractedPrompts {
    pub invariant: PromptTensor,
    pub variant: PromptTensor,
    pub invariant_scores: Vec<PromptScores>,
    pub variant_scores: Vec<PromptScores>,
}

/// Runs query projection and both extractions independently for every step of
/// a `T×N×k` input.
pub fn extract_prompts(inputs: &Array3<f64>, params: &QueryParams, bank: &MemoryBank) -> Result<ExtractedPrompts> {
    let (steps, nodes, _) = inputs.dim();
    let d = bank.dim();
    let mut inv = Array3::zeros((steps, nodes, d));
    let mut var = Array3::zeros((steps, nodes, d));
    let mut inv_scores = Vec::with_capacity(steps);
    let mut var_scores = Vec::with_capacity(steps);
    for t in 0..steps {
        let q = project_query(inputs.index_axis(Axis(0), t), params)?;
        let (si, hi) = extract_invariant(q.view(), bank)?;
        let (sv, hv) = extract_variant(q.view(), bank)?;
        inv.slice_mut(s![t, .., ..]).assign(&hi);
        var.slice_mut(s![t, .., ..]).assign(&hv);
        inv_scores.push(si);
        var_scores.push(sv);
    }
    Ok(ExtractedPrompts {
        invariant: PromptTensor {
            values: inv,
            kind: PromptKind::Invariant,
        },
        variant: PromptTensor {
            values: var,
            kind: PromptKind::Variant,
        },
        invariant_scores: inv_scores,
        variant_scores: var_scores,
    })
}

/// Indices of the largest and second-largest entry of each row; ties go to the
/// lower index.
pub fn top_two(scores: ArrayView2<f64>) -> Result<Vec<(usize, usize)>> {
    if scores.ncols() < 2 {
        return Err(MipError::Config(format!(
            "memory regularization needs at least 2 prototypes, bank has {}",
            scores.ncols()
        )));
    }
    Ok(scores
        .rows()
        .into_iter()
        .map(|row| {
            let (mut a, mut b) = (0usize, usize::MAX);
            for j in 1..row.len() {
                if row[j] > row[a] {
                    b = a;
                    a = j;
                } else if b == usize::MAX || row[j] > row[b] {
                    b = j;
                }
            }
            (a, b)
        })
        .collect())
}

/// Sum over all `(t, n)` slots of the margin hinge between best and
/// runner-up prototypes plus the squared distance to the best prototype.
/// Best/runner-up indices come from `scores` and carry no gradient.
pub fn memory_regularization(
    invariant: &PromptTensor,
    scores: &[PromptScores],
    bank: &MemoryBank,
    margin: f64,
) -> Result<f64> {
    if invariant.kind != PromptKind::Invariant {
        return Err(MipError::Contract("memory regularization expects invariant prompts".into()));
    }
    let (steps, nodes, d) = invariant.shape();
    if scores.len() != steps || d != bank.dim() {
        return Err(MipError::shape(
            "memory regularization",
            format!("{steps} score matrices and d={}", bank.dim()),
            format!("{} score matrices and d={d}", scores.len()),
        ));
    }
    let phi = bank.prototypes();
    let mut total = 0.0;
    for (t, step_scores) in scores.iter().enumerate() {
        if step_scores.dim() != (nodes, bank.num_prototypes()) {
            return Err(MipError::shape(
                "prompt scores",
                format!("{nodes}×{}", bank.num_prototypes()),
                format!("{:?}", step_scores.dim()),
            ));
        }
        for (n, (a, b)) in top_two(step_scores.view())?.into_iter().enumerate() {
            let h = invariant.values.slice(s![t, n, ..]);
            let da = (&h - &phi.row(a)).mapv(|x| x * x).sum();
            let db = (&h - &phi.row(b)).mapv(|x| x * x).sum();
            total += (da - db + margin).max(0.0) + da;
        }
    }
    Ok(total)
}
