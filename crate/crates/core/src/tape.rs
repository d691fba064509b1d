//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array. Batched spatio-temporal tensors are
//! flattened to rows ordered `(sample, step, node)`, so a block of `N`
//! consecutive rows is one graph snapshot and rows `n, n + N, n + 2N, ...`
//! within a sample form the time series of node `n`.
//!
//! Nodes are appended in topological order, so `backward` is a single reverse
//! sweep. The tape is rebuilt for each forward pass.

use std::rc::Rc;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::linalg::{row_softmax, MixMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Left-multiplying operator for [`Tape::block_mix`].
#[derive(Debug, Clone)]
pub enum Mixer {
    Fixed(Arc<MixMatrix>),
    Learned(Var),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    RowSoftmax(Var),
    Relu(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Rc<Vec<usize>>),
    BlockMix {
        mixer: Mixer,
        x: Var,
        block: usize,
    },
    AddPositional {
        x: Var,
        pos: Var,
        steps: usize,
        nodes: usize,
    },
    TemporalAttention {
        q: Var,
        k: Var,
        v: Var,
        steps: usize,
        nodes: usize,
        heads: usize,
        weights: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Array2<f64>,
        inv_std: Vec<f64>,
    },
    MaskedMae {
        pred: Var,
        target: Rc<Array2<f64>>,
        mask: Option<Rc<Array2<f64>>>,
        count: f64,
    },
    InvariantRisk {
        pred: Var,
        target: Rc<Array2<f64>>,
        mask: Option<Rc<Array2<f64>>>,
        lambda: f64,
    },
    MemoryReg {
        h: Var,
        phi: Var,
        top: Rc<Vec<(usize, usize)>>,
        margin: f64,
        scale: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every tape node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Lays the `block`-row slabs of `x` side by side: `block × (slabs·c)`.
/// One wide product then replaces a product per slab.
fn stack_blocks(x: ArrayView2<f64>, block: usize) -> Array2<f64> {
    let c = x.ncols();
    let slabs = x.nrows() / block;
    let mut out = Array2::zeros((block, slabs * c));
    for (i, slab) in x.axis_chunks_iter(Axis(0), block).enumerate() {
        out.slice_mut(s![.., i * c..(i + 1) * c]).assign(&slab);
    }
    out
}

/// Inverse of [`stack_blocks`].
fn unstack_blocks(wide: &Array2<f64>, c: usize) -> Array2<f64> {
    let (block, width) = wide.dim();
    let slabs = width / c;
    let mut out = Array2::zeros((slabs * block, c));
    for (i, mut slab) in out.axis_chunks_iter_mut(Axis(0), block).enumerate() {
        slab.assign(&wide.slice(s![.., i * c..(i + 1) * c]));
    }
    out
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), g)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::MatMulNT(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), g)
    }

    /// Adds a `1×c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let g = self.any_grad(&[a, row]);
        self.push(value, Op::AddRow(a, row), g)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let g = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = row_softmax(self.value(a).view());
        let g = self.any_grad(&[a]);
        self.push(value, Op::RowSoftmax(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let g = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), g)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row counts differ");
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::ConcatCols(a, b), g)
    }

    /// `out[i] = a[index[i]]`
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((index.len(), src.ncols()));
        for (i, &j) in index.iter().enumerate() {
            value.row_mut(i).assign(&src.row(j));
        }
        let g = self.any_grad(&[a]);
        self.push(value, Op::GatherRows(a, index), g)
    }

    /// Applies a square operator to each block of `block` consecutive rows of `x`.
    pub fn block_mix(&mut self, mixer: Mixer, x: Var, block: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows() % block, 0, "block_mix: rows not a multiple of block");
        let mut value = Array2::zeros(xv.raw_dim());
        let mut needs = self.nodes[x.0].needs_grad;
        match &mixer {
            Mixer::Fixed(m) => {
                assert_eq!(m.dim(), block);
                for (out, inp) in value
                    .axis_chunks_iter_mut(Axis(0), block)
                    .zip(xv.axis_chunks_iter(Axis(0), block))
                {
                    m.apply_into(inp, out);
                }
            }
            Mixer::Learned(p) => {
                let pv = &self.nodes[p.0].value;
                assert_eq!(pv.dim(), (block, block));
                needs |= self.nodes[p.0].needs_grad;
                value = unstack_blocks(&pv.dot(&stack_blocks(xv.view(), block)), xv.ncols());
            }
        }
        self.push(value, Op::BlockMix { mixer, x, block }, needs)
    }

    /// Adds row `t` of the `steps×c` embedding to every row belonging to step `t`.
    pub fn add_positional(&mut self, x: Var, pos: Var, steps: usize, nodes: usize) -> Var {
        let mut value = self.value(x).clone();
        let pv = self.value(pos);
        assert_eq!(pv.nrows(), steps);
        for (r, mut row) in value.rows_mut().into_iter().enumerate() {
            row += &pv.row((r / nodes) % steps);
        }
        let g = self.any_grad(&[x, pos]);
        self.push(
            value,
            Op::AddPositional {
                x,
                pos,
                steps,
                nodes,
            },
            g,
        )
    }

    /// Scaled dot-product attention along the time axis of every node series.
    pub fn temporal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        steps: usize,
        nodes: usize,
        heads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.dim();
        assert_eq!(width % heads, 0, "attention width must divide into heads");
        assert_eq!(rows % (steps * nodes), 0);
        let head_dim = width / heads;
        let inv_scale = 1.0 / (head_dim as f64).sqrt();
        let samples = rows / (steps * nodes);
        let mut value = Array2::zeros((rows, width));
        let mut weights = vec![0.0; samples * nodes * heads * steps * steps];
        let mut logits = vec![0.0; steps];
        for b in 0..samples {
            for n in 0..nodes {
                let row_of = |t: usize| b * steps * nodes + t * nodes + n;
                for h in 0..heads {
                    let cols = h * head_dim..(h + 1) * head_dim;
                    let wbase = (((b * nodes + n) * heads) + h) * steps * steps;
                    for i in 0..steps {
                        let qi = qv.slice(s![row_of(i), cols.clone()]);
                        let mut max = f64::NEG_INFINITY;
                        for (j, l) in logits.iter_mut().enumerate() {
                            *l = qi.dot(&kv.slice(s![row_of(j), cols.clone()])) * inv_scale;
                            max = max.max(*l);
                        }
                        let mut total = 0.0;
                        for l in logits.iter_mut() {
                            *l = (*l - max).exp();
                            total += *l;
                        }
                        let w = &mut weights[wbase + i * steps..wbase + (i + 1) * steps];
                        for (wj, l) in w.iter_mut().zip(&logits) {
                            *wj = l / total;
                        }
                        let mut out = value.slice_mut(s![row_of(i), cols.clone()]);
                        for (j, &wj) in w.iter().enumerate() {
                            out.scaled_add(wj, &vv.slice(s![row_of(j), cols.clone()]));
                        }
                    }
                }
            }
        }
        let g = self.any_grad(&[q, k, v]);
        self.push(
            value,
            Op::TemporalAttention {
                q,
                k,
                v,
                steps,
                nodes,
                heads,
                weights,
            },
            g,
        )
    }

    /// Row-wise layer normalization with learnable `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut normed = Array2::zeros(xv.raw_dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (row, mut out) in xv.rows().into_iter().zip(normed.rows_mut()) {
            let mean = row.sum() / cols;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols;
            let is = 1.0 / (var + EPS).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &x| *o = (x - mean) * is);
            inv_std.push(is);
        }
        let value = &normed * self.value(gain) + self.value(bias);
        let g = self.any_grad(&[x, gain, bias]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            g,
        )
    }

    /// Mean absolute error over entries with mask weight 1 (all entries when unmasked).
    /// Panics if the mask selects nothing; callers check validity first.
    pub fn masked_mae(
        &mut self,
        pred: Var,
        target: Rc<Array2<f64>>,
        mask: Option<Rc<Array2<f64>>>,
    ) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim());
        let (sum, count) = match &mask {
            Some(m) => {
                let mut sum = 0.0;
                Zip::from(pv)
                    .and(target.as_ref())
                    .and(m.as_ref())
                    .for_each(|&p, &t, &w| sum += w * (p - t).abs());
                (sum, m.sum())
            }
            None => (
                Zip::from(pv)
                    .and(target.as_ref())
                    .fold(0.0, |acc, &p, &t| acc + (p - t).abs()),
                pv.len() as f64,
            ),
        };
        assert!(count > 0.0, "masked_mae: empty valid set");
        let value = Array2::from_elem((1, 1), sum / count);
        let g = self.any_grad(&[pred]);
        self.push(
            value,
            Op::MaskedMae {
                pred,
                target,
                mask,
                count,
            },
            g,
        )
    }

    /// Mean plus `lambda` times population variance of per-row mean absolute errors.
    /// Rows whose mask is entirely zero are excluded.
    pub fn invariant_risk(
        &mut self,
        pred: Var,
        target: Rc<Array2<f64>>,
        mask: Option<Rc<Array2<f64>>>,
        lambda: f64,
    ) -> Var {
        let losses = row_losses(self.value(pred).view(), &target, mask.as_deref());
        let (mean, var) = mean_and_population_variance(losses.iter().filter_map(|l| *l));
        let value = Array2::from_elem((1, 1), mean + lambda * var);
        let g = self.any_grad(&[pred]);
        self.push(
            value,
            Op::InvariantRisk {
                pred,
                target,
                mask,
                lambda,
            },
            g,
        )
    }

    /// Triplet-style memory regularizer; `top[r]` holds the (best, runner-up)
    /// prototype indices for row `r` of `h`, treated as constants.
    pub fn memory_reg(
        &mut self,
        h: Var,
        phi: Var,
        top: Rc<Vec<(usize, usize)>>,
        margin: f64,
        scale: f64,
    ) -> Var {
        let (hv, pv) = (self.value(h), self.value(phi));
        assert_eq!(hv.nrows(), top.len());
        let mut total = 0.0;
        for (row, &(a, b)) in hv.rows().into_iter().zip(top.iter()) {
            let da = sq_dist(row, pv.row(a));
            let db = sq_dist(row, pv.row(b));
            total += (da - db + margin).max(0.0) + da;
        }
        let value = Array2::from_elem((1, 1), total * scale);
        let g = self.any_grad(&[h, phi]);
        self.push(
            value,
            Op::MemoryReg {
                h,
                phi,
                top,
                margin,
                scale,
            },
            g,
        )
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        assert!(!terms.is_empty());
        let mut value = Array2::zeros(self.value(terms[0].0).raw_dim());
        for &(v, w) in &terms {
            value.scaled_add(w, self.value(v));
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let g = self.any_grad(&vars);
        self.push(value, Op::WeightedSum(terms), g)
    }

    /// Back-propagates from a `1×1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(up) = grads[idx].take() else { continue };
            self.propagate(idx, &up, &mut grads);
            grads[idx] = Some(up);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, up: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], up.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(up));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], up.dot(self.value(*b)));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], up.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], up.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], up.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], up.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], -up);
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], up.clone());
                }
                if self.wants(*row) {
                    accumulate(&mut grads[row.0], up.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], up * *f);
                }
            }
            Op::RowSoftmax(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let mut d = up * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv * dot);
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let mut d = up.clone();
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|dv, &y| if y <= 0.0 { *dv = 0.0 });
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::ConcatCols(a, b) => {
                let split = self.value(*a).ncols();
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], up.slice(s![.., ..split]).to_owned());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], up.slice(s![.., split..]).to_owned());
                }
            }
            Op::GatherRows(a, index) => {
                if self.wants(*a) {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    for (i, &j) in index.iter().enumerate() {
                        let mut row = d.row_mut(j);
                        row += &up.row(i);
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::BlockMix { mixer, x, block } => {
                let block = *block;
                if self.wants(*x) {
                    let mut d = Array2::zeros(up.raw_dim());
                    match mixer {
                        Mixer::Fixed(m) => {
                            for (out, g) in d
                                .axis_chunks_iter_mut(Axis(0), block)
                                .zip(up.axis_chunks_iter(Axis(0), block))
                            {
                                m.apply_transpose_into(g, out);
                            }
                        }
                        Mixer::Learned(p) => {
                            let wide = self.value(*p).t().dot(&stack_blocks(up.view(), block));
                            d = unstack_blocks(&wide, up.ncols());
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                if let Mixer::Learned(p) = mixer {
                    if self.wants(*p) {
                        let xv = self.value(*x);
                        let d = stack_blocks(up.view(), block).dot(&stack_blocks(xv.view(), block).t());
                        accumulate(&mut grads[p.0], d);
                    }
                }
            }
            Op::AddPositional {
                x,
                pos,
                steps,
                nodes,
            } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], up.clone());
                }
                if self.wants(*pos) {
                    let mut d = Array2::zeros(self.value(*pos).raw_dim());
                    for (r, row) in up.rows().into_iter().enumerate() {
                        let mut target = d.row_mut((r / nodes) % steps);
                        target += &row;
                    }
                    accumulate(&mut grads[pos.0], d);
                }
            }
            Op::TemporalAttention {
                q,
                k,
                v,
                steps,
                nodes,
                heads,
                weights,
            } => self.attention_backward(
                up,
                (*q, *k, *v),
                (*steps, *nodes, *heads),
                weights,
                grads,
            ),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], up.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*gain) {
                    accumulate(
                        &mut grads[gain.0],
                        (up * normed).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                if self.wants(*x) {
                    let dn = up * self.value(*gain);
                    let cols = dn.ncols() as f64;
                    let mut d = Array2::zeros(dn.raw_dim());
                    for (r, mut out) in d.rows_mut().into_iter().enumerate() {
                        let g = dn.row(r);
                        let n = normed.row(r);
                        let mean_g = g.sum() / cols;
                        let mean_gn = g.dot(&n) / cols;
                        Zip::from(&mut out)
                            .and(&g)
                            .and(&n)
                            .for_each(|o, &gv, &nv| *o = inv_std[r] * (gv - mean_g - nv * mean_gn));
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::MaskedMae {
                pred,
                target,
                mask,
                count,
            } => {
                if self.wants(*pred) {
                    let scale = up[[0, 0]] / count;
                    let mut d = Array2::zeros(target.raw_dim());
                    Zip::from(&mut d)
                        .and(self.value(*pred))
                        .and(target.as_ref())
                        .for_each(|dv, &p, &t| *dv = sign(p - t) * scale);
                    if let Some(m) = mask {
                        d *= m.as_ref();
                    }
                    accumulate(&mut grads[pred.0], d);
                }
            }
            Op::InvariantRisk {
                pred,
                target,
                mask,
                lambda,
            } => {
                if self.wants(*pred) {
                    let pv = self.value(*pred);
                    let losses = row_losses(pv.view(), target, mask.as_deref());
                    let valid: Vec<f64> = losses.iter().filter_map(|l| *l).collect();
                    let count = valid.len() as f64;
                    let mean = valid.iter().sum::<f64>() / count;
                    let mut d = Array2::zeros(pv.raw_dim());
                    for (r, loss) in losses.iter().enumerate() {
                        let Some(l) = loss else { continue };
                        let dl = up[[0, 0]] * (1.0 + 2.0 * lambda * (l - mean)) / count;
                        let mut row_count = 0.0;
                        for c in 0..pv.ncols() {
                            if mask.as_ref().is_none_or(|m| m[[r, c]] > 0.0) {
                                row_count += 1.0;
                            }
                        }
                        for c in 0..pv.ncols() {
                            let w = mask.as_ref().map_or(1.0, |m| m[[r, c]]);
                            d[[r, c]] = w * sign(pv[[r, c]] - target[[r, c]]) * dl / row_count;
                        }
                    }
                    accumulate(&mut grads[pred.0], d);
                }
            }
            Op::MemoryReg {
                h,
                phi,
                top,
                margin,
                scale,
            } => {
                let (hv, pv) = (self.value(*h), self.value(*phi));
                let s = up[[0, 0]] * scale;
                let mut dh = Array2::zeros(hv.raw_dim());
                let mut dphi = Array2::zeros(pv.raw_dim());
                for (r, &(a, b)) in top.iter().enumerate() {
                    let row = hv.row(r);
                    let diff_a = &row - &pv.row(a);
                    let diff_b = &row - &pv.row(b);
                    let hinge = diff_a.dot(&diff_a) - diff_b.dot(&diff_b) + margin;
                    let active = if hinge > 0.0 { 1.0 } else { 0.0 };
                    // d/dh ‖h−φa‖² = 2(h−φa); the alignment term always contributes.
                    let coef_a = 2.0 * s * (1.0 + active);
                    let coef_b = 2.0 * s * active;
                    let mut dhr = dh.row_mut(r);
                    dhr.scaled_add(coef_a, &diff_a);
                    dhr.scaled_add(-coef_b, &diff_b);
                    dphi.row_mut(a).scaled_add(-coef_a, &diff_a);
                    dphi.row_mut(b).scaled_add(coef_b, &diff_b);
                }
                if self.wants(*h) {
                    accumulate(&mut grads[h.0], dh);
                }
                if self.wants(*phi) {
                    accumulate(&mut grads[phi.0], dphi);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        accumulate(&mut grads[v.0], up * w);
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        up: &Array2<f64>,
        (q, k, v): (Var, Var, Var),
        (steps, nodes, heads): (usize, usize, usize),
        weights: &[f64],
        grads: &mut [Option<Array2<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.dim();
        let head_dim = width / heads;
        let inv_scale = 1.0 / (head_dim as f64).sqrt();
        let samples = rows / (steps * nodes);
        let mut dq = Array2::zeros((rows, width));
        let mut dk = Array2::zeros((rows, width));
        let mut dv = Array2::zeros((rows, width));
        let mut dw = vec![0.0; steps];
        for b in 0..samples {
            for n in 0..nodes {
                let row_of = |t: usize| b * steps * nodes + t * nodes + n;
                for h in 0..heads {
                    let cols = h * head_dim..(h + 1) * head_dim;
                    let wbase = (((b * nodes + n) * heads) + h) * steps * steps;
                    for i in 0..steps {
                        let w = &weights[wbase + i * steps..wbase + (i + 1) * steps];
                        let gi = up.slice(s![row_of(i), cols.clone()]);
                        // dV_j += w_ij g_i ; dW_ij = g_i · v_j
                        for j in 0..steps {
                            dv.slice_mut(s![row_of(j), cols.clone()]).scaled_add(w[j], &gi);
                            dw[j] = gi.dot(&vv.slice(s![row_of(j), cols.clone()]));
                        }
                        let dot: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                        let qi = qv.slice(s![row_of(i), cols.clone()]).to_owned();
                        for j in 0..steps {
                            let ds = w[j] * (dw[j] - dot) * inv_scale;
                            if ds == 0.0 {
                                continue;
                            }
                            dq.slice_mut(s![row_of(i), cols.clone()])
                                .scaled_add(ds, &kv.slice(s![row_of(j), cols.clone()]));
                            dk.slice_mut(s![row_of(j), cols.clone()]).scaled_add(ds, &qi);
                        }
                    }
                }
            }
        }
        if self.wants(q) {
            accumulate(&mut grads[q.0], dq);
        }
        if self.wants(k) {
            accumulate(&mut grads[k.0], dk);
        }
        if self.wants(v) {
            accumulate(&mut grads[v.0], dv);
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Per-row mean absolute error; `None` for rows with no valid entry.
pub(crate) fn row_losses(
    pred: ArrayView2<f64>,
    target: &Array2<f64>,
    mask: Option<&Array2<f64>>,
) -> Vec<Option<f64>> {
    pred.rows()
        .into_iter()
        .zip(target.rows())
        .enumerate()
        .map(|(r, (p, t))| {
            let mut sum = 0.0;
            let mut count = 0.0;
            for c in 0..p.len() {
                let w = mask.map_or(1.0, |m| m[[r, c]]);
                if w > 0.0 {
                    sum += (p[c] - t[c]).abs();
                    count += 1.0;
                }
            }
            (count > 0.0).then(|| sum / count)
        })
        .collect()
}

pub(crate) fn mean_and_population_variance(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (sum, count) = values.clone().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    assert!(count > 0, "empty valid set");
    let mean = sum / count as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
    (mean, var)
}
