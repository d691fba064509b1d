//! Prompt-score export: CSV tables plus a heatmap per prompt kind.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};

use crate::data::{write_numeric_csv, WindowedDataset};
use crate::error::{MipError, Result};
use crate::model::MipModel;
use crate::plot::heatmap;

/// What to export. `horizon` counts from 1 (the first step of the window).
#[derive(Debug, Clone, PartialEq)]
pub struct ExportRequest {
    pub node: usize,
    pub horizon: usize,
    pub windows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreExport {
    /// One row per window: scores of `node` at `horizon`.
    pub invariant_node: Array2<f64>,
    pub variant_node: Array2<f64>,
    /// `N×M`: scores of every node at `horizon`, averaged over the windows.
    pub invariant_mean: Array2<f64>,
    pub variant_mean: Array2<f64>,
    pub files: Vec<PathBuf>,
}

/// Computes the score tables without writing anything.
pub fn prompt_scores(model: &MipModel, data: &WindowedDataset, req: &ExportRequest) -> Result<[Array2<f64>; 4]> {
    let (steps, nodes) = (data.window, data.num_nodes());
    if req.node >= nodes {
        return Err(MipError::Domain(format!("node {} out of range 0..{nodes}", req.node)));
    }
    if req.horizon == 0 || req.horizon > steps {
        return Err(MipError::Domain(format!("horizon {} out of range 1..={steps}", req.horizon)));
    }
    if req.windows.is_empty() {
        return Err(MipError::Domain("no windows selected".into()));
    }
    if let Some(&w) = req.windows.iter().find(|&&w| w >= data.num_windows()) {
        return Err(MipError::Domain(format!("window {w} out of range 0..{}", data.num_windows())));
    }
    let m = model.config().num_prototypes;
    let mut inv_node = Array2::zeros((req.windows.len(), m));
    let mut var_node = Array2::zeros((req.windows.len(), m));
    let mut inv_mean = Array2::zeros((nodes, m));
    let mut var_mean = Array2::zeros((nodes, m));
    let row0 = (req.horizon - 1) * nodes;
    for (i, &w) in req.windows.iter().enumerate() {
        let batch = data.batch(&[w]);
        let (si, sv) = model.prompt_scores(&batch.inputs)?;
        let si = si.slice(s![row0..row0 + nodes, ..]);
        let sv = sv.slice(s![row0..row0 + nodes, ..]);
        inv_node.row_mut(i).assign(&si.row(req.node));
        var_node.row_mut(i).assign(&sv.row(req.node));
        inv_mean += &si;
        var_mean += &sv;
    }
    let count = req.windows.len() as f64;
    inv_mean /= count;
    var_mean /= count;
    Ok([inv_node, var_node, inv_mean, var_mean])
}

/// Writes the four score tables as CSV and two heatmaps into `out_dir`.
pub fn export_prompt_scores(
    model: &MipModel,
    data: &WindowedDataset,
    req: &ExportRequest,
    out_dir: &Path,
) -> Result<ScoreExport> {
    let [inv_node, var_node, inv_mean, var_mean] = prompt_scores(model, data, req)?;
    fs::create_dir_all(out_dir).map_err(|e| MipError::io(out_dir, e))?;
    let (n, h) = (req.node, req.horizon);
    let mut files = Vec::new();
    let tables = [
        (format!("invariant_node{n}_h{h}.csv"), &inv_node),
        (format!("variant_node{n}_h{h}.csv"), &var_node),
        (format!("invariant_h{h}.csv"), &inv_mean),
        (format!("variant_h{h}.csv"), &var_mean),
    ];
    for (name, table) in tables {
        let path = out_dir.join(name);
        write_numeric_csv(&path, table.rows().into_iter().map(|r| r.to_vec()))?;
        files.push(path);
    }
    for (kind, table) in [("invariant", &inv_node), ("variant", &var_node)] {
        let path = out_dir.join(format!("{kind}_node{n}_h{h}.svg"));
        let svg = heatmap(
            &format!("{kind} prompt scores, node {n}, horizon {h}"),
            "prototype",
            "window",
            table,
        );
        fs::write(&path, svg).map_err(|e| MipError::io(&path, e))?;
        files.push(path);
    }
    Ok(ScoreExport {
        invariant_node: inv_node,
        variant_node: var_node,
        invariant_mean: inv_mean,
        variant_mean: var_mean,
        files,
    })
}
