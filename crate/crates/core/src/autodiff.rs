//! Minimal reverse-mode autodiff over 2-D arrays.
//!
//! A `Graph` is an append-only tape; every operation pushes one node holding
//! its value and enough saved state to run the backward rule. Gradients are
//! accumulated per node on `backward` from a scalar (1 x 1) loss node. The op
//! set is exactly what the differentiable cached sampler and the distillation
//! losses need — no broadcasting beyond what the ops state.

use crate::error::{Error, Result};
use crate::model::LN_EPS;
use ndarray::{s, Array2, Axis};

pub type NodeId = usize;

enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulEwise(NodeId, NodeId),
    DivEwise(NodeId, NodeId),
    /// value = parent * c
    ScaleConst(NodeId, f64),
    /// value = parent * s where `s` is a 1 x 1 node
    ScaleByScalar(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    /// value = a . b^T
    MatmulNT(NodeId, NodeId),
    /// saved value is the softmax output itself
    SoftmaxRows(NodeId),
    /// gamma/beta frozen; grad flows to the input only
    LayerNorm {
        input: NodeId,
        gamma: Array2<f64>,
        // saved per-row statistics
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Silu(NodeId),
    Relu(NodeId),
    /// out[r] = in[idx[r]]
    GatherRows(NodeId, Vec<usize>),
    /// out = base with row idx[r] replaced by rows[r]
    ScatterRows {
        base: NodeId,
        rows: NodeId,
        idx: Vec<usize>,
    },
    SliceCols(NodeId, usize, usize),
    SliceBlock(NodeId, [usize; 4]),
    ConcatCols(Vec<NodeId>),
    /// out.flat[k] = in.flat[idx[k]], idx < 0 reads as 0 (zero padding)
    GatherFlat(NodeId, Vec<i64>),
    MeanAll(NodeId),
    SumAll(NodeId),
    /// forward emits the saved hard one-hot row; backward is the identity
    /// into the relaxed parent (straight-through)
    SteOnehot(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    grad: Option<Array2<f64>>,
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::MulEwise(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value / &self.nodes[b].value;
        self.push(v, Op::DivEwise(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::ScaleConst(a, c))
    }

    /// Multiply every entry of `a` by the 1 x 1 node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[s].value.dim(), (1, 1));
        let sv = self.nodes[s].value[[0, 0]];
        let v = &self.nodes[a].value * sv;
        self.push(v, Op::ScaleByScalar(a, s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::Matmul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value.t());
        self.push(v, Op::MatmulNT(a, b))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        crate::model::softmax_rows_inplace(&mut v);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, a: NodeId, gamma: &Array2<f64>, beta: &Array2<f64>) -> NodeId {
        let x = &self.nodes[a].value;
        let (n, d) = x.dim();
        debug_assert_eq!(gamma.dim(), (1, d));
        let mut v = Array2::zeros((n, d));
        let mut mean = Vec::with_capacity(n);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let m = row.sum() / d as f64;
            let var = row.iter().map(|u| (u - m) * (u - m)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                v[[i, j]] = (x[[i, j]] - m) * inv * gamma[[0, j]] + beta[[0, j]];
            }
            mean.push(m);
            inv_std.push(inv);
        }
        self.push(
            v,
            Op::LayerNorm {
                input: a,
                gamma: gamma.clone(),
                mean,
                inv_std,
            },
        )
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(crate::model::silu);
        self.push(v, Op::Silu(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let x = &self.nodes[a].value;
        let d = x.ncols();
        let mut v = Array2::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&x.row(i));
        }
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn scatter_rows(&mut self, base: NodeId, rows: NodeId, idx: &[usize]) -> NodeId {
        let mut v = self.nodes[base].value.clone();
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(i).assign(&self.nodes[rows].value.row(r));
        }
        self.push(
            v,
            Op::ScatterRows {
                base,
                rows,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[a]
            .value
            .slice(s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn slice_block(&mut self, a: NodeId, r0: usize, c0: usize, h: usize, w: usize) -> NodeId {
        let v = self.nodes[a]
            .value
            .slice(s![r0..r0 + h, c0..c0 + w])
            .to_owned();
        self.push(v, Op::SliceBlock(a, [r0, c0, h, w]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let n = self.nodes[parts[0]].value.nrows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.ncols()).sum();
        let mut v = Array2::zeros((n, total));
        let mut c = 0;
        for &p in parts {
            let w = self.nodes[p].value.ncols();
            v.slice_mut(s![.., c..c + w]).assign(&self.nodes[p].value);
            c += w;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Flat gather in row-major order; negative indices read zero (used for
    /// zero-padded im2col patches).
    pub fn gather_flat(&mut self, a: NodeId, idx: &[i64], shape: (usize, usize)) -> NodeId {
        debug_assert_eq!(idx.len(), shape.0 * shape.1);
        let src = self.nodes[a].value.as_slice().expect("contiguous");
        let data: Vec<f64> = idx
            .iter()
            .map(|&i| if i < 0 { 0.0 } else { src[i as usize] })
            .collect();
        let v = Array2::from_shape_vec(shape, data).expect("shape covers indices");
        self.push(v, Op::GatherFlat(a, idx.to_vec()))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let m = x.sum() / x.len() as f64;
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    /// Straight-through estimator: forward value is the hard one-hot row,
    /// backward passes gradients unchanged into the relaxed gates.
    pub fn ste_onehot(&mut self, gates: NodeId, hard_index: usize) -> NodeId {
        let g = &self.nodes[gates].value;
        debug_assert_eq!(g.nrows(), 1);
        let mut v = Array2::zeros(g.dim());
        v[[0, hard_index]] = 1.0;
        self.push(v, Op::SteOnehot(gates))
    }

    fn accumulate(&mut self, id: NodeId, g: &Array2<f64>) {
        match &mut self.nodes[id].grad {
            Some(existing) => *existing += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Reverse sweep from a scalar loss node. Gradients accumulate into every
    /// reachable node; call `grad` afterwards to read them off leaves.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.dim() != (1, 1) {
            return Err(Error::Contract(
                "backward needs a scalar (1 x 1) loss node".into(),
            ));
        }
        self.nodes[loss].grad = Some(Array2::ones((1, 1)));
        for id in (0..=loss).rev() {
            let Some(g) = self.nodes[id].grad.clone() else {
                continue;
            };
            // borrow discipline: clone whatever the rule reads, then mutate
            match &self.nodes[id].op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &g);
                    let neg = -&g;
                    self.accumulate(b, &neg);
                }
                Op::MulEwise(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &g * &self.nodes[b].value;
                    let gb = &g * &self.nodes[a].value;
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::DivEwise(a, b) => {
                    let (a, b) = (*a, *b);
                    let bv = self.nodes[b].value.clone();
                    let ga = &g / &bv;
                    let gb = -&(&g * &self.nodes[a].value) / &(&bv * &bv);
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::ScaleConst(a, c) => {
                    let (a, c) = (*a, *c);
                    let ga = &g * c;
                    self.accumulate(a, &ga);
                }
                Op::ScaleByScalar(a, sid) => {
                    let (a, sid) = (*a, *sid);
                    let sv = self.nodes[sid].value[[0, 0]];
                    let ga = &g * sv;
                    let gs = (&g * &self.nodes[a].value).sum();
                    self.accumulate(a, &ga);
                    let gs = Array2::from_elem((1, 1), gs);
                    self.accumulate(sid, &gs);
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.dot(&self.nodes[b].value.t());
                    let gb = self.nodes[a].value.t().dot(&g);
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::MatmulNT(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.dot(&self.nodes[b].value);
                    let gb = g.t().dot(&self.nodes[a].value);
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let y = self.nodes[id].value.clone();
                    let mut gx = &g * &y;
                    for (mut gr, yr) in gx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                        let dot: f64 = gr.sum();
                        for (u, yv) in gr.iter_mut().zip(yr.iter()) {
                            *u -= dot * yv;
                        }
                    }
                    self.accumulate(a, &gx);
                }
                Op::LayerNorm {
                    input,
                    gamma,
                    mean,
                    inv_std,
                } => {
                    let input = *input;
                    let gamma = gamma.clone();
                    let (mean, inv_std) = (mean.clone(), inv_std.clone());
                    let x = self.nodes[input].value.clone();
                    let (n, d) = x.dim();
                    let mut gx = Array2::zeros((n, d));
                    for i in 0..n {
                        // dy through gamma, then the standard layernorm rule
                        let dnorm: Vec<f64> =
                            (0..d).map(|j| g[[i, j]] * gamma[[0, j]]).collect();
                        let xhat: Vec<f64> = (0..d)
                            .map(|j| (x[[i, j]] - mean[i]) * inv_std[i])
                            .collect();
                        let m1 = dnorm.iter().sum::<f64>() / d as f64;
                        let m2 = dnorm
                            .iter()
                            .zip(&xhat)
                            .map(|(dn, xh)| dn * xh)
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            gx[[i, j]] = (dnorm[j] - m1 - xhat[j] * m2) * inv_std[i];
                        }
                    }
                    self.accumulate(input, &gx);
                }
                Op::Silu(a) => {
                    let a = *a;
                    let gx = self.nodes[a].value.mapv(|x| {
                        let sig = 1.0 / (1.0 + (-x).exp());
                        sig * (1.0 + x * (1.0 - sig))
                    }) * &g;
                    self.accumulate(a, &gx);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let gx = self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }) * &g;
                    self.accumulate(a, &gx);
                }
                Op::GatherRows(a, idx) => {
                    let a = *a;
                    let idx = idx.clone();
                    let mut gx = Array2::zeros(self.nodes[a].value.dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = gx.row_mut(i);
                        row += &g.row(r);
                    }
                    self.accumulate(a, &gx);
                }
                Op::ScatterRows { base, rows, idx } => {
                    let (base, rows) = (*base, *rows);
                    let idx = idx.clone();
                    let mut gbase = g.clone();
                    let mut grows = Array2::zeros(self.nodes[rows].value.dim());
                    for (r, &i) in idx.iter().enumerate() {
                        grows.row_mut(r).assign(&g.row(i));
                        gbase.row_mut(i).fill(0.0);
                    }
                    self.accumulate(base, &gbase);
                    self.accumulate(rows, &grows);
                }
                Op::SliceCols(a, start, len) => {
                    let (a, start, len) = (*a, *start, *len);
                    let mut gx = Array2::zeros(self.nodes[a].value.dim());
                    gx.slice_mut(s![.., start..start + len]).assign(&g);
                    self.accumulate(a, &gx);
                }
                Op::SliceBlock(a, r) => {
                    let (a, [r0, c0, h, w]) = (*a, *r);
                    let mut gx = Array2::zeros(self.nodes[a].value.dim());
                    gx.slice_mut(s![r0..r0 + h, c0..c0 + w]).assign(&g);
                    self.accumulate(a, &gx);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut c = 0;
                    for p in parts {
                        let w = self.nodes[p].value.ncols();
                        let gp = g.slice(s![.., c..c + w]).to_owned();
                        self.accumulate(p, &gp);
                        c += w;
                    }
                }
                Op::GatherFlat(a, idx) => {
                    let a = *a;
                    let idx = idx.clone();
                    let mut gx = Array2::zeros(self.nodes[a].value.dim());
                    {
                        let gs = gx.as_slice_mut().expect("contiguous");
                        let gflat = g.as_slice().expect("contiguous");
                        for (k, &i) in idx.iter().enumerate() {
                            if i >= 0 {
                                gs[i as usize] += gflat[k];
                            }
                        }
                    }
                    self.accumulate(a, &gx);
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    let n = self.nodes[a].value.len() as f64;
                    let gx = Array2::from_elem(self.nodes[a].value.dim(), g[[0, 0]] / n);
                    self.accumulate(a, &gx);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let gx = Array2::from_elem(self.nodes[a].value.dim(), g[[0, 0]]);
                    self.accumulate(a, &gx);
                }
                Op::SteOnehot(gates) => {
                    let gates = *gates;
                    self.accumulate(gates, &g);
                }
            }
        }
        Ok(())
    }
}
