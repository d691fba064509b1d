//! Geolocation graph, its random-walk transition matrices, and the semantic
//! adjacency derived from the memory bank.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{MipError, Result};
use crate::linalg::row_softmax;
use crate::memory::MemoryBank;

/// Static sensor/region graph. Row `i` of the adjacency holds the outgoing
/// edge weights of node `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoGraph {
    adjacency: Array2<f64>,
}

impl GeoGraph {
    pub fn new(adjacency: Array2<f64>) -> Result<Self> {
        let (r, c) = adjacency.dim();
        if r != c || r == 0 {
            return Err(MipError::shape("adjacency", "non-empty square N×N", format!("{r}×{c}")));
        }
        if let Some(bad) = adjacency.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(MipError::Domain(format!(
                "adjacency entries must be finite and nonnegative, found {bad}"
            )));
        }
        Ok(Self { adjacency })
    }

    /// Builds an unweighted graph from an edge list.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = Array2::zeros((num_nodes, num_nodes));
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(MipError::Domain(format!(
                    "edge ({u}, {v}) references a node outside [0, {num_nodes})"
                )));
            }
            a[[u, v]] = 1.0;
        }
        Self::new(a)
    }

    /// Rook (4-neighbourhood) adjacency over a row-major `rows × cols` grid.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                    edges.push((i + 1, i));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                    edges.push((i + cols, i));
                }
            }
        }
        Self::from_edges(rows * cols, &edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().filter(|v| **v > 0.0).count()
    }

    /// Reads `adjacency.csv`: N lines of N comma-separated nonnegative reals.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let rows = crate::data::read_numeric_csv(path)?;
        let n = rows.len();
        if n == 0 {
            return Err(MipError::Data(format!("{} is empty", path.display())));
        }
        let mut a = Array2::zeros((n, n));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(MipError::Parse {
                    file: path.to_path_buf(),
                    row: i + 1,
                    column: row.len().min(n) + 1,
                    message: format!("expected {n} values, found {}", row.len()),
                });
            }
            for (j, v) in row.iter().enumerate() {
                a[[i, j]] = *v;
            }
        }
        Self::new(a)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::data::write_numeric_csv(path, self.adjacency.rows().into_iter().map(|r| r.to_vec()))
    }
}

/// Forward and backward random-walk transition matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPair {
    pub forward: Array2<f64>,
    pub backward: Array2<f64>,
}

fn row_normalize(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let degree = row.sum();
        if degree > 0.0 {
            row.mapv_inplace(|v| v / degree);
        }
    }
    out
}

/// `P_f = D⁻¹A` and `P_b = (Dᵀ)⁻¹Aᵀ`; rows of zero-degree nodes stay all-zero.
pub fn build_transitions(graph: &GeoGraph) -> TransitionPair {
    TransitionPair {
        forward: row_normalize(&graph.adjacency),
        backward: row_normalize(&graph.adjacency.t().to_owned()),
    }
}

/// Trainable `N×M` projections mapping prototypes to node embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGraphParams {
    pub proj_a: Array2<f64>,
    pub proj_b: Array2<f64>,
}

/// Row-stochastic learned graph shared by all time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticAdjacency {
    pub matrix: Array2<f64>,
}

/// `Ã = softmax(W_A Φ (W_B Φ)ᵀ)` with the softmax taken per row.
pub fn build_semantic_adjacency(
    bank: &MemoryBank,
    params: &SemanticGraphParams,
) -> Result<SemanticAdjacency> {
    let m = bank.num_prototypes();
    let (na, ma) = params.proj_a.dim();
    let (nb, mb) = params.proj_b.dim();
    if ma != m || mb != m || na != nb {
        return Err(MipError::shape(
            "semantic projections",
            format!("two N×{m} matrices"),
            format!("{na}×{ma} and {nb}×{mb}"),
        ));
    }
    let e1 = params.proj_a.dot(bank.prototypes());
    let e2 = params.proj_b.dot(bank.prototypes());
    Ok(SemanticAdjacency {
        matrix: row_softmax(e1.dot(&e2.t()).view()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn star_graph_transitions() {
        let g = GeoGraph::new(array![[0.0, 1.0, 1.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let p = build_transitions(&g);
        assert_eq!(p.forward.row(0).to_vec(), vec![0.0, 0.5, 0.5]);
        assert_eq!(p.forward.row(1).to_vec(), vec![1.0, 0.0, 0.0]);
        assert_eq!(p.forward.row(2).to_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn symmetric_adjacency_gives_equal_directions() {
        let g = GeoGraph::new(array![[0.0, 2.0, 1.0], [2.0, 0.0, 3.0], [1.0, 3.0, 1.0]]).unwrap();
        let p = build_transitions(&g);
        assert!(crate::linalg::max_abs_diff(&p.forward, &p.backward) <= 1e-12);
    }

    #[test]
    fn single_directed_edge() {
        let g = GeoGraph::new(array![[0.0, 1.0], [0.0, 0.0]]).unwrap();
        let p = build_transitions(&g);
        assert_eq!(p.forward, array![[0.0, 1.0], [0.0, 0.0]]);
        assert_eq!(p.backward, array![[0.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn rejects_bad_adjacency() {
        assert!(matches!(
            GeoGraph::new(Array2::zeros((2, 3))),
            Err(MipError::Shape { .. })
        ));
        assert!(matches!(
            GeoGraph::new(array![[0.0, -1.0], [0.0, 0.0]]),
            Err(MipError::Domain(_))
        ));
        assert!(GeoGraph::from_edges(2, &[(0, 2)]).is_err());
    }

    #[test]
    fn grid_has_rook_neighbourhood() {
        let g = GeoGraph::grid(2, 3).unwrap();
        assert_eq!(g.num_nodes(), 6);
        // 2×3 grid: 7 undirected edges.
        assert_eq!(g.num_edges(), 14);
        assert_eq!(g.adjacency()[[0, 1]], 1.0);
        assert_eq!(g.adjacency()[[0, 3]], 1.0);
        assert_eq!(g.adjacency()[[0, 4]], 0.0);
    }

    #[test]
    fn constant_logits_give_uniform_semantic_graph() {
        let bank = MemoryBank::new(array![[1.0]]).unwrap();
        let params = SemanticGraphParams {
            proj_a: array![[1.0], [1.0]],
            proj_b: array![[1.0], [1.0]],
        };
        let a = build_semantic_adjacency(&bank, &params).unwrap();
        assert_eq!(a.matrix, array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn peaked_logits_give_near_identity() {
        let bank = MemoryBank::new(Array2::eye(2) * 10.0).unwrap();
        let params = SemanticGraphParams {
            proj_a: Array2::eye(2),
            proj_b: Array2::eye(2),
        };
        let a = build_semantic_adjacency(&bank, &params).unwrap();
        // oracle: softmax([100, 0]) evaluated directly
        let off = 1.0 / (1.0 + 100f64.exp());
        let on = 1.0 - off;
        assert!((a.matrix[[0, 0]] - on).abs() < 1e-15);
        assert!((a.matrix[[0, 1]] - off).abs() < 1e-15);
        assert!(crate::linalg::max_abs_diff(&a.matrix, &Array2::eye(2)) < 1e-10);
    }

    #[test]
    fn semantic_shape_mismatch() {
        let bank = MemoryBank::new(Array2::eye(3)).unwrap();
        let params = SemanticGraphParams {
            proj_a: Array2::zeros((4, 2)),
            proj_b: Array2::zeros((4, 3)),
        };
        assert!(matches!(
            build_semantic_adjacency(&bank, &params),
            Err(MipError::Shape { .. })
        ));
    }
}
