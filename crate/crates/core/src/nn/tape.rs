//! Operation tape over row-major `f64` matrices.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in exact reverse order, accumulating gradients additively,
//! and returns the gradient of each parameter that was read during the pass.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use super::PROB_EPS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather { src: NodeId, idx: Vec<usize> },
    SliceRows { src: NodeId, start: usize },
    MatMul { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    AddN(Vec<NodeId>),
    GatherSum(Vec<(NodeId, Vec<usize>)>),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Mixture { gate: NodeId, experts: Vec<NodeId> },
    Mul { a: NodeId, b: NodeId },
    ConcatCols(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    // None for parameter leaves, whose value lives in the store
    value: Option<Array2<f64>>,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: HashMap<ParamId, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    fn add(&mut self, id: ParamId, g: Array2<f64>) {
        match self.grads.get_mut(&id) {
            Some(acc) => *acc += &g,
            None => {
                self.grads.insert(id, g);
            }
        }
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Argument(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v.view(),
            (None, Op::Param(p)) => self.store.get(*p).value.view(),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).dim()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    /// Rows `idx` of `src`; the backward pass scatter-adds into those rows.
    pub fn gather(&mut self, src: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let v = self.value(src);
        let rows = v.nrows();
        let mut out = Array2::zeros((idx.len(), v.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::Index {
                    index: i,
                    len: rows,
                });
            }
            out.row_mut(r).assign(&v.row(i));
        }
        Ok(self.push(Op::Gather { src, idx }, out))
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(src);
        if start > end || end > v.nrows() {
            return Err(Error::Argument(format!(
                "row slice {start}..{end} of {} rows",
                v.nrows()
            )));
        }
        let out = v.slice(s![start..end, ..]).to_owned();
        Ok(self.push(Op::SliceRows { src, start }, out))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let out = va.dot(&vb);
        Ok(self.push(Op::MatMul { a, b }, out))
    }

    /// `x + bias` with `bias` a `1 x d` row broadcast over rows of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.nrows() != 1 || vb.ncols() != vx.ncols() {
            return Err(shape_err("add_bias", vx.shape(), vb.shape()));
        }
        let out = &vx + &vb;
        Ok(self.push(Op::AddBias { x, bias }, out))
    }

    pub fn add_n(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let first = *terms
            .first()
            .ok_or_else(|| Error::Argument("add_n of nothing".into()))?;
        let mut out = self.value(first).to_owned();
        for &t in &terms[1..] {
            let v = self.value(t);
            if v.dim() != out.dim() {
                return Err(shape_err("add_n", out.shape(), v.shape()));
            }
            out += &v;
        }
        Ok(self.push(Op::AddN(terms.to_vec()), out))
    }

    /// `out[r] = sum_k parts[k].src[parts[k].idx[r]]`: the sum of several
    /// row gathers without materialising each one.
    pub fn gather_sum(&mut self, parts: Vec<(NodeId, Vec<usize>)>) -> Result<NodeId> {
        let (first, idx0) = parts
            .first()
            .ok_or_else(|| Error::Argument("gather_sum of nothing".into()))?;
        let (n, d) = (idx0.len(), self.shape(*first).1);
        let mut out = Array2::zeros((n, d));
        for (src, idx) in &parts {
            let v = self.value(*src);
            if idx.len() != n || v.ncols() != d {
                return Err(shape_err("gather_sum", &[n, d], &[idx.len(), v.ncols()]));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= v.nrows()) {
                return Err(Error::Index {
                    index: bad,
                    len: v.nrows(),
                });
            }
            let v = v.as_standard_layout();
            let (src, dst) = (
                v.as_slice().expect("standard layout"),
                out.as_slice_mut().expect("fresh array"),
            );
            for (o, &i) in dst.chunks_exact_mut(d).zip(idx) {
                add_into(o, &src[i * d..(i + 1) * d]);
            }
        }
        Ok(self.push(Op::GatherSum(parts), out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(Op::Relu(x), out)
    }

    /// Logistic function clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self
            .value(x)
            .mapv(|z| sigmoid(z).clamp(PROB_EPS, 1.0 - PROB_EPS));
        self.push(Op::Sigmoid(x), out)
    }

    /// Row-wise softmax, stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).to_owned();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(Op::Softmax(x), out)
    }

    /// `out[i] = sum_e gate[i, e] * experts[e][i]`.
    pub fn mixture(&mut self, gate: NodeId, experts: &[NodeId]) -> Result<NodeId> {
        let g = self.value(gate);
        if g.ncols() != experts.len() || experts.is_empty() {
            return Err(Error::Argument(format!(
                "mixture: gate has {} columns for {} experts",
                g.ncols(),
                experts.len()
            )));
        }
        let shape = self.value(experts[0]).dim();
        if g.nrows() != shape.0 {
            return Err(shape_err("mixture", g.shape(), &[shape.0, shape.1]));
        }
        let mut out = Array2::zeros(shape);
        for (e, &x) in experts.iter().enumerate() {
            let v = self.value(x);
            if v.dim() != shape {
                return Err(shape_err("mixture", &[shape.0, shape.1], v.shape()));
            }
            let v = v.as_standard_layout();
            let rows = out
                .as_slice_mut()
                .expect("fresh array")
                .chunks_exact_mut(shape.1);
            for ((o, xr), &w) in rows
                .zip(v.as_slice().expect("standard layout").chunks_exact(shape.1))
                .zip(g.column(e))
            {
                for (o, &x) in o.iter_mut().zip(xr) {
                    *o += w * x;
                }
            }
        }
        Ok(self.push(
            Op::Mixture {
                gate,
                experts: experts.to_vec(),
            },
            out,
        ))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let out = &va * &vb;
        Ok(self.push(Op::Mul { a, b }, out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Argument(format!("concat: {e}")))?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// Propagate `seeds` (node, d loss / d node) back to every parameter.
    pub fn backward(self, seeds: &[(NodeId, Array2<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if g.dim() != self.shape(*id) {
                return Err(shape_err(
                    "backward seed",
                    g.shape(),
                    self.value(*id).shape(),
                ));
            }
            accumulate(&mut grads, *id, g.clone());
        }

        let mut out = Gradients::default();
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];

            match &node.op {
                Op::Input => {}
                Op::Param(p) => out.add(*p, g),
                Op::Gather { src, idx } => {
                    let mut acc = Array2::zeros(self.shape(*src));
                    for (r, &row) in idx.iter().enumerate() {
                        let mut dst = acc.row_mut(row);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *src, acc);
                }
                Op::SliceRows { src, start } => {
                    let acc = grads[src.0].get_or_insert_with(|| Array2::zeros(self.shape(*src)));
                    let mut region = acc.slice_mut(s![*start..*start + g.nrows(), ..]);
                    region += &g;
                }
                Op::MatMul { a, b } => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias { x, bias } => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::AddN(terms) => {
                    for &t in &terms[1..] {
                        accumulate(&mut grads, t, g.clone());
                    }
                    accumulate(&mut grads, terms[0], g);
                }
                Op::GatherSum(parts) => {
                    let g = g.as_standard_layout();
                    let gs = g.as_slice().expect("standard layout");
                    let d = g.ncols();
                    for (src, idx) in parts {
                        let mut acc = Array2::zeros(self.shape(*src));
                        let dst = acc.as_slice_mut().expect("fresh array");
                        for (gr, &i) in gs.chunks_exact(d).zip(idx) {
                            add_into(&mut dst[i * d..(i + 1) * d], gr);
                        }
                        accumulate(&mut grads, *src, acc);
                    }
                }
                Op::Relu(x) => {
                    // the output is zero exactly where the input is non-positive
                    let mut g = standard(g);
                    let y = node.value.as_ref().expect("relu keeps its output");
                    for (g, &v) in g
                        .as_slice_mut()
                        .expect("owned")
                        .iter_mut()
                        .zip(y.as_slice().expect("owned"))
                    {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, g);
                }
                Op::Sigmoid(x) => {
                    let mut g = g;
                    let y = node.value.as_ref().unwrap();
                    Zip::from(&mut g)
                        .and(y)
                        .and(&self.value(*x))
                        .for_each(|g, &p, &z| {
                            let raw = sigmoid(z);
                            *g = if !(PROB_EPS..=1.0 - PROB_EPS).contains(&raw) {
                                0.0
                            } else {
                                *g * p * (1.0 - p)
                            };
                        });
                    accumulate(&mut grads, *x, g);
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = g;
                    Zip::from(gx.rows_mut())
                        .and(y.rows())
                        .for_each(|mut gr, yr| {
                            let dot = gr.dot(&yr);
                            Zip::from(&mut gr)
                                .and(&yr)
                                .for_each(|gi, &yi| *gi = yi * (*gi - dot));
                        });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mixture { gate, experts } => {
                    let gv = self.value(*gate);
                    let mut g_gate = Array2::zeros(gv.dim());
                    let g = g.as_standard_layout();
                    let d = g.ncols();
                    let gs = g.as_slice().expect("standard layout");
                    for (e, &x) in experts.iter().enumerate() {
                        let xv = self.value(x);
                        let xv = xv.as_standard_layout();
                        let xs = xv.as_slice().expect("standard layout");
                        let gx = grads[x.0].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
                        let gx = gx
                            .as_slice_mut()
                            .expect("gradient buffers are standard layout");
                        for (r, ((gr, xr), gxr)) in gs
                            .chunks_exact(d)
                            .zip(xs.chunks_exact(d))
                            .zip(gx.chunks_exact_mut(d))
                            .enumerate()
                        {
                            g_gate[[r, e]] = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                            let w = gv[[r, e]];
                            for (o, &v) in gxr.iter_mut().zip(gr) {
                                *o += w * v;
                            }
                        }
                    }
                    accumulate(&mut grads, *gate, g_gate);
                }
                Op::Mul { a, b } => {
                    let ga = &g * &self.value(*b);
                    let gb = &g * &self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        accumulate(&mut grads, p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}
