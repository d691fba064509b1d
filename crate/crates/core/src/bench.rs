//! Inference timing across graph sizes and window lengths.
//!
//! Parameter shapes depend on `N` and `T`, so every cell builds a fresh
//! model from the same model config over a random geometric graph and
//! times single-sample forward passes on random inputs.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{MipError, Result};
use crate::model::{Dims, MipModel};
use crate::synth::{random_graph, random_inputs};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub repetitions: usize,
    pub warmup: usize,
    pub features: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repetitions: 100,
            warmup: 5,
            features: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub nodes: usize,
    pub horizon: usize,
    pub repetitions: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub cpu: String,
    pub logical_cores: usize,
    pub os: String,
    pub arch: String,
}

impl MachineInfo {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu,
            logical_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub machine: MachineInfo,
    pub options: BenchOptions,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, nodes: usize, horizon: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.nodes == nodes && r.horizon == horizon)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let m = &self.machine;
        let _ = writeln!(out, "machine: {} ({} logical cores, {}/{})", m.cpu, m.logical_cores, m.os, m.arch);
        let _ = writeln!(out, "{:>6} {:>4} {:>12} {:>10} {:>10}", "N", "T", "median ms", "min ms", "max ms");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>6} {:>4} {:>12.3} {:>10.3} {:>10.3}",
                r.nodes, r.horizon, r.median_ms, r.min_ms, r.max_ms
            );
        }
        out
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// One row per `(N, T)` pair, in the order given.
///
/// Repetitions are interleaved round-robin over the cells, so slow drift in
/// machine speed hits every cell alike instead of skewing the ratios.
pub fn bench_inference(
    config: &ModelConfig,
    node_counts: &[usize],
    horizons: &[usize],
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if opts.repetitions == 0 {
        return Err(MipError::Config("bench needs at least one repetition".into()));
    }
    let mut cells = Vec::new();
    for &horizon in horizons {
        for &nodes in node_counts {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((nodes as u64) << 16) ^ horizon as u64);
            let graph = random_graph(nodes, 3, &mut rng)?;
            let dims = Dims {
                nodes,
                features: opts.features,
                window: horizon,
            };
            let model = MipModel::new(config, dims, graph)?;
            let x: Array2<f64> = random_inputs(horizon, nodes, opts.features, &mut rng)
                .into_shape_with_order((horizon * nodes, opts.features))
                .expect("contiguous");
            for _ in 0..opts.warmup {
                model.predict(&x)?;
            }
            cells.push((nodes, horizon, model, x, Vec::with_capacity(opts.repetitions)));
        }
    }
    for _ in 0..opts.repetitions {
        for (_, _, model, x, ms) in cells.iter_mut() {
            let t = Instant::now();
            let out = model.predict(x)?;
            ms.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);
        }
    }
    let rows = cells
        .into_iter()
        .map(|(nodes, horizon, _, _, mut ms)| {
            ms.sort_by(f64::total_cmp);
            BenchRow {
                nodes,
                horizon,
                repetitions: opts.repetitions,
                median_ms: median(&ms),
                min_ms: ms[0],
                max_ms: ms[ms.len() - 1],
            }
        })
        .collect();
    Ok(BenchReport {
        machine: MachineInfo::detect(),
        options: *opts,
        rows,
    })
}
