//! Dataset ingestion, z-score normalization, sliding windows and
//! chronological splits.
//!
//! A dataset directory holds
//! - `meta.json`: `{"num_nodes", "num_features", "interval_minutes", "mask_zeros"?}`
//! - `features.csv`: one line per time step, `N·k` reals ordered node-major
//!   (`n0f0,n0f1,...,n1f0,...`), no header
//! - `adjacency.csv`: `N` lines of `N` nonnegative reals, no header

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use log::warn;
use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MipError, Result};
use crate::graph::GeoGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_nodes: usize,
    pub num_features: usize,
    pub interval_minutes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_zeros: Option<bool>,
}

/// `T_total×N×k` observations; zeros mark missing entries when `mask_zeros`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub values: Array3<f64>,
    pub interval_minutes: u32,
    pub mask_zeros: bool,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len_of(Axis(1))
    }

    pub fn num_features(&self) -> usize {
        self.values.len_of(Axis(2))
    }
}

pub fn read_numeric_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = fs::File::open(path).map_err(|e| MipError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MipError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(j, cell)| {
                cell.trim().parse::<f64>().map_err(|_| MipError::Parse {
                    file: path.to_path_buf(),
                    row: i + 1,
                    column: j + 1,
                    message: format!("`{}` is not a number", cell.trim()),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_numeric_csv(path: &Path, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| MipError::io(path, e))
}

/// Reads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<(RawSeries, GeoGraph)> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| MipError::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_text).map_err(|e| MipError::Data(format!("{}: {e}", meta_path.display())))?;
    if meta.num_nodes == 0 || meta.num_features == 0 || meta.interval_minutes == 0 {
        return Err(MipError::Data(format!("{}: dimensions must be positive", meta_path.display())));
    }

    let features_path = dir.join("features.csv");
    let rows = read_numeric_csv(&features_path)?;
    if rows.is_empty() {
        return Err(MipError::Data(format!("{}: T_total = 0", features_path.display())));
    }
    let width = meta.num_nodes * meta.num_features;
    let mut values = Array3::zeros((rows.len(), meta.num_nodes, meta.num_features));
    for (t, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(MipError::Parse {
                file: features_path.clone(),
                row: t + 1,
                column: row.len().min(width) + 1,
                message: format!(
                    "expected {width} values (N={} × k={}), found {}",
                    meta.num_nodes,
                    meta.num_features,
                    row.len()
                ),
            });
        }
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(MipError::Parse {
                    file: features_path.clone(),
                    row: t + 1,
                    column: j + 1,
                    message: "non-finite value".into(),
                });
            }
            values[[t, j / meta.num_features, j % meta.num_features]] = *v;
        }
    }

    let graph = GeoGraph::read_csv(&dir.join("adjacency.csv"))?;
    if graph.num_nodes() != meta.num_nodes {
        return Err(MipError::Data(format!(
            "adjacency has {} nodes but meta declares {}",
            graph.num_nodes(),
            meta.num_nodes
        )));
    }
    Ok((
        RawSeries {
            values,
            interval_minutes: meta.interval_minutes,
            mask_zeros: meta.mask_zeros.unwrap_or(false),
        },
        graph,
    ))
}

/// Writes a dataset directory in the format read by [`load_dataset`].
pub fn save_dataset(dir: &Path, series: &RawSeries, graph: &GeoGraph) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MipError::io(dir, e))?;
    let meta = DatasetMeta {
        num_nodes: series.num_nodes(),
        num_features: series.num_features(),
        interval_minutes: series.interval_minutes,
        mask_zeros: Some(series.mask_zeros),
    };
    let meta_path = dir.join("meta.json");
    let mut f = fs::File::create(&meta_path).map_err(|e| MipError::io(&meta_path, e))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&meta)?).map_err(|e| MipError::io(&meta_path, e))?;
    write_numeric_csv(
        &dir.join("features.csv"),
        series
            .values
            .outer_iter()
            .map(|step| step.iter().copied().collect::<Vec<f64>>()),
    )?;
    graph.write_csv(&dir.join("adjacency.csv"))
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Normalized,
    Raw,
}

/// `T×N×k` flow values tagged with their units.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTensor {
    pub values: Array3<f64>,
    pub units: Units,
}

impl Normalizer {
    /// Fits statistics on `values[steps]`, skipping zeros when `skip_zeros`.
    /// Channels with zero spread are left unscaled.
    pub fn fit(values: &Array3<f64>, steps: Range<usize>, skip_zeros: bool) -> Self {
        let k = values.len_of(Axis(2));
        let mut mean = vec![0.0; k];
        let mut std = vec![1.0; k];
        let slab = values.slice(s![steps, .., ..]);
        for f in 0..k {
            let vals: Vec<f64> = slab
                .index_axis(Axis(2), f)
                .iter()
                .copied()
                .filter(|v| !(skip_zeros && *v == 0.0))
                .collect();
            if vals.is_empty() {
                warn!("feature {f} has no valid training values; leaving it unscaled");
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            if sd > 0.0 {
                mean[f] = m;
                std[f] = sd;
            } else {
                warn!("feature {f} has zero variance on the training range; leaving it unscaled");
            }
        }
        Self { mean, std }
    }

    pub fn normalize_array(&self, values: &Array3<f64>) -> Array3<f64> {
        let mut out = values.clone();
        for mut lane in out.lanes_mut(Axis(2)) {
            for (f, v) in lane.iter_mut().enumerate() {
                *v = (*v - self.mean[f]) / self.std[f];
            }
        }
        out
    }

    pub fn denormalize_array(&self, values: &Array3<f64>) -> Array3<f64> {
        let mut out = values.clone();
        for mut lane in out.lanes_mut(Axis(2)) {
            for (f, v) in lane.iter_mut().enumerate() {
                *v = *v * self.std[f] + self.mean[f];
            }
        }
        out
    }

    pub fn normalize(&self, t: &FlowTensor) -> Result<FlowTensor> {
        if t.units != Units::Raw {
            return Err(MipError::Contract("tensor is already normalized".into()));
        }
        Ok(FlowTensor {
            values: self.normalize_array(&t.values),
            units: Units::Normalized,
        })
    }

    pub fn denormalize(&self, t: &FlowTensor) -> Result<FlowTensor> {
        if t.units != Units::Normalized {
            return Err(MipError::Contract("tensor is already in raw units".into()));
        }
        Ok(FlowTensor {
            values: self.denormalize_array(&t.values),
            units: Units::Raw,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test0,
    Test1,
    Test2,
}

impl Split {
    pub const TESTS: [Split; 3] = [Split::Test0, Split::Test1, Split::Test2];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test0 => "test0",
            Split::Test1 => "test1",
            Split::Test2 => "test2",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = MipError;

    fn from_str(s: &str) -> Result<Self> {
        [Split::Train, Split::Val, Split::Test0, Split::Test1, Split::Test2]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| MipError::Config(format!("unknown split `{s}` (train, val, test0, test1, test2)")))
    }
}

/// Window start indices of each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: [Range<usize>; 3],
}

impl Splits {
    pub fn get(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test0 => self.test[0].clone(),
            Split::Test1 => self.test[1].clone(),
            Split::Test2 => self.test[2].clone(),
        }
    }
}

/// Assigns window starts `0..count` to five chronological splits. Train
/// windows whose targets would overlap a later split's targets are dropped.
pub fn split_windows(count: usize, window: usize, fractions: &[f64; 5]) -> Result<Splits> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(MipError::Config(format!("split fractions must be nonnegative: {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(MipError::Config(format!("split fractions sum to {total}, not 1")));
    }
    let mut bounds = [0usize; 6];
    let mut cum = 0.0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        bounds[i + 1] = ((cum * count as f64).round() as usize).min(count);
    }
    bounds[5] = count;
    let embargo = window.saturating_sub(1);
    Ok(Splits {
        train: 0..bounds[1].saturating_sub(embargo),
        val: bounds[1]..bounds[2],
        test: [bounds[2]..bounds[3], bounds[3]..bounds[4], bounds[4]..bounds[5]],
    })
}

/// One batch flattened to rows ordered `(sample, step, node)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: usize,
    pub steps: usize,
    pub nodes: usize,
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    /// 1.0 where the raw target is valid, 0.0 where it is a masked zero.
    pub mask: Option<Array2<f64>>,
}

impl Batch {
    pub fn has_valid_targets(&self) -> bool {
        self.mask.as_ref().is_none_or(|m| m.sum() > 0.0)
    }
}

/// Normalized series cut into stride-1 input/target windows.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub raw: RawSeries,
    pub normalized: Array3<f64>,
    pub normalizer: Normalizer,
    pub window: usize,
    pub splits: Splits,
}

/// Builds stride-1 windows: window `w` reads steps `[w, w+T)` and predicts
/// `[w+T, w+2T)`. The normalizer is fitted on steps covered by training inputs.
pub fn make_windows(raw: RawSeries, window: usize, fractions: &[f64; 5]) -> Result<WindowedDataset> {
    if window == 0 || raw.len() < 2 * window {
        return Err(MipError::Data(format!(
            "series of {} steps is too short for window {window} (needs ≥ {})",
            raw.len(),
            2 * window
        )));
    }
    let count = raw.len() - 2 * window + 1;
    let splits = split_windows(count, window, fractions)?;
    if splits.train.is_empty() {
        return Err(MipError::Data("training split is empty".into()));
    }
    let fit_steps = 0..splits.train.end - 1 + window;
    let normalizer = Normalizer::fit(&raw.values, fit_steps, raw.mask_zeros);
    let normalized = normalizer.normalize_array(&raw.values);
    Ok(WindowedDataset {
        raw,
        normalized,
        normalizer,
        window,
        splits,
    })
}

impl WindowedDataset {
    pub fn num_windows(&self) -> usize {
        self.raw.len() - 2 * self.window + 1
    }

    pub fn num_nodes(&self) -> usize {
        self.raw.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.raw.num_features()
    }

    pub fn input(&self, w: usize) -> FlowTensor {
        FlowTensor {
            values: self.normalized.slice(s![w..w + self.window, .., ..]).to_owned(),
            units: Units::Normalized,
        }
    }

    pub fn target(&self, w: usize) -> FlowTensor {
        FlowTensor {
            values: self
                .normalized
                .slice(s![w + self.window..w + 2 * self.window, .., ..])
                .to_owned(),
            units: Units::Normalized,
        }
    }

    pub fn raw_target(&self, w: usize) -> FlowTensor {
        FlowTensor {
            values: self
                .raw
                .values
                .slice(s![w + self.window..w + 2 * self.window, .., ..])
                .to_owned(),
            units: Units::Raw,
        }
    }

    /// Mask for one window's targets (`None` when nothing is masked).
    pub fn target_mask(&self, w: usize) -> Option<Array3<f64>> {
        self.raw.mask_zeros.then(|| {
            self.raw
                .values
                .slice(s![w + self.window..w + 2 * self.window, .., ..])
                .mapv(|v| if v == 0.0 { 0.0 } else { 1.0 })
        })
    }

    pub fn batch(&self, windows: &[usize]) -> Batch {
        let (t, n, k) = (self.window, self.num_nodes(), self.num_features());
        let rows = windows.len() * t * n;
        let mut inputs = Array2::zeros((rows, k));
        let mut targets = Array2::zeros((rows, k));
        let mut mask = self.raw.mask_zeros.then(|| Array2::zeros((rows, k)));
        for (b, &w) in windows.iter().enumerate() {
            let base = b * t * n;
            let flat = |a: ndarray::ArrayView3<f64>| a.to_shape((t * n, k)).expect("contiguous window").to_owned();
            inputs
                .slice_mut(s![base..base + t * n, ..])
                .assign(&flat(self.normalized.slice(s![w..w + t, .., ..])));
            targets
                .slice_mut(s![base..base + t * n, ..])
                .assign(&flat(self.normalized.slice(s![w + t..w + 2 * t, .., ..])));
            if let Some(m) = mask.as_mut() {
                let raw = flat(self.raw.values.slice(s![w + t..w + 2 * t, .., ..]));
                m.slice_mut(s![base..base + t * n, ..])
                    .assign(&raw.mapv(|v| if v == 0.0 { 0.0 } else { 1.0 }));
            }
        }
        Batch {
            samples: windows.len(),
            steps: t,
            nodes: n,
            inputs,
            targets,
            mask,
        }
    }
}

/// Per-node mean over a step range.
pub fn node_means(values: &Array3<f64>, steps: Range<usize>) -> Array2<f64> {
    values
        .slice(s![steps, .., ..])
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array2::zeros((values.len_of(Axis(1)), values.len_of(Axis(2)))))
}

/// Splits rows ordered `(sample, step, node)` back into `steps×N×k` tensors.
pub fn unflatten(rows: &Array2<f64>, steps: usize, nodes: usize) -> Vec<Array3<f64>> {
    let k = rows.ncols();
    rows.axis_chunks_iter(Axis(0), steps * nodes)
        .map(|chunk| chunk.to_owned().into_shape_with_order((steps, nodes, k)).expect("chunk shape"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(total: usize, nodes: usize) -> RawSeries {
        RawSeries {
            values: Array3::from_shape_fn((total, nodes, 1), |(t, n, _)| (t * nodes + n) as f64 + 1.0),
            interval_minutes: 5,
            mask_zeros: false,
        }
    }

    #[test]
    fn window_count() {
        let ds = make_windows(series(48, 2), 12, &[0.6, 0.1, 0.1, 0.1, 0.1]).unwrap();
        assert_eq!(ds.num_windows(), 25);
    }

    #[test]
    fn rejects_bad_fractions_and_short_series() {
        assert!(matches!(
            make_windows(series(48, 2), 12, &[0.6, 0.1, 0.1, 0.1, 0.2]),
            Err(MipError::Config(_))
        ));
        assert!(make_windows(series(20, 2), 12, &[0.6, 0.1, 0.1, 0.1, 0.1]).is_err());
    }

    #[test]
    fn constant_series_keeps_raw_values() {
        let raw = RawSeries {
            values: Array3::from_elem((30, 3, 1), 4.0),
            interval_minutes: 5,
            mask_zeros: false,
        };
        let ds = make_windows(raw, 3, &[0.6, 0.1, 0.1, 0.1, 0.1]).unwrap();
        assert!(ds.normalized.iter().all(|v| *v == 4.0));
        assert_eq!(ds.normalizer.std, vec![1.0]);
    }

    #[test]
    fn splits_are_chronological() {
        let ds = make_windows(series(300, 2), 6, &[0.6, 0.1, 0.1, 0.1, 0.1]).unwrap();
        let s = &ds.splits;
        assert!(s.train.end <= s.val.start);
        assert!(s.val.end <= s.test[0].start);
        assert!(s.test[0].start > s.val.end - 1);
        assert_eq!(s.test[2].end, ds.num_windows());
    }

    #[test]
    fn batch_layout_is_sample_step_node() {
        let ds = make_windows(series(40, 3), 4, &[0.6, 0.1, 0.1, 0.1, 0.1]).unwrap();
        let b = ds.batch(&[0, 5]);
        assert_eq!(b.inputs.dim(), (2 * 4 * 3, 1));
        let raw = ds.normalizer.denormalize_array(&Array3::from_shape_fn((1, 1, 1), |_| b.inputs[[4 * 3 + 3 + 2, 0]]));
        // sample 1 = window 5, step 1, node 2 → raw step 6
        assert!((raw[[0, 0, 0]] - (6.0 * 3.0 + 2.0 + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn masks_zero_targets() {
        let mut raw = series(40, 2);
        raw.values[[10, 1, 0]] = 0.0;
        raw.mask_zeros = true;
        let ds = make_windows(raw, 4, &[0.6, 0.1, 0.1, 0.1, 0.1]).unwrap();
        let b = ds.batch(&[6]);
        let m = b.mask.unwrap();
        assert_eq!(m.sum(), (4 * 2 - 1) as f64);
        // window 6 targets raw steps 10..14, so the zero is target step 0, node 1
        assert_eq!(m[[1, 0]], 0.0);
    }

    #[test]
    fn unit_flags_guard_double_denormalization() {
        let n = Normalizer {
            mean: vec![1.0],
            std: vec![2.0],
        };
        let t = FlowTensor {
            values: Array3::from_elem((1, 1, 1), 3.0),
            units: Units::Normalized,
        };
        let raw = n.denormalize(&t).unwrap();
        assert_eq!(raw.values[[0, 0, 0]], 7.0);
        assert!(matches!(n.denormalize(&raw), Err(MipError::Contract(_))));
        assert_eq!(n.normalize(&raw).unwrap(), t);
    }
}
