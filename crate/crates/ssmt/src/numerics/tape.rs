//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Operations evaluate immediately and record themselves on the tape; calling
//! [`Tape::backward`] on a scalar node fills a gradient for every named
//! parameter leaf reachable from it. The tape is append-only, so it also
//! serves as the value arena for incremental (forward-only) decoding, where
//! cached attention keys/values and LSTM states are just node ids.

use std::collections::BTreeMap;

use super::tensor::{log_sum_exp, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct NodeId(usize);

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<String> },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Broadcast-add a `1xc` row vector to every row of an `nxc` matrix.
    AddRow(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// `ln sigmoid(x)`, computed stably.
    LogSigmoid(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Transpose(NodeId),
    GatherRows {
        table: NodeId,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        end: usize,
    },
    Row {
        x: NodeId,
        r: usize,
    },
    Elem {
        x: NodeId,
        r: usize,
        c: usize,
    },
    /// Stack scalar nodes into a `1xn` row vector.
    StackScalars(Vec<NodeId>),
    /// Log-sum-exp over all elements, `-inf`-safe.
    LogSumExp(NodeId),
    Sum(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.scalar_value()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf; gradients flowing into it are discarded.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// A named parameter leaf; backward accumulates its gradient under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(
            Op::Leaf {
                param: Some(name.to_string()),
            },
            value,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .expect("matmul shape mismatch on tape");
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "add shape mismatch on tape");
        let mut value = va.clone();
        value.add_assign(vb);
        self.push(Op::Add(a, b), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "mul shape mismatch on tape");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(va.rows(), va.cols(), data).unwrap();
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows(), 1, "add_row expects a row vector");
        assert_eq!(va.cols(), vr.cols(), "add_row width mismatch");
        let mut value = va.clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                let v = value.at(r, c) + vr.at(0, c);
                value.set(r, c, v);
            }
        }
        self.push(Op::AddRow(a, row), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        // ln sigmoid(x) = -softplus(-x)
        let value = self.value(a).map(|x| {
            if x > 0.0 {
                -(-x).exp().ln_1p()
            } else {
                x - x.exp().ln_1p()
            }
        });
        self.push(Op::LogSigmoid(a), value)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(Op::SoftmaxRows(a), value)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(Op::LogSoftmaxRows(a), value)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(vg.cols(), vx.cols());
        assert_eq!(vb.cols(), vx.cols());
        let n = vx.cols() as f64;
        let mut value = vx.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = (var + eps).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                *v = vg.at(0, c) * (*v - mean) / std + vb.at(0, c);
            }
        }
        self.push(Op::LayerNorm { x, gain, bias, eps }, value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let vt = self.value(table);
        let mut value = Tensor::zeros(idx.len(), vt.cols());
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).copy_from_slice(vt.row(i));
        }
        self.push(
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            value,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(rows, cols, data).unwrap();
        self.push(Op::ConcatRows(parts.to_vec()), value)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let vx = self.value(x);
        assert!(start < end && end <= vx.cols());
        let mut value = Tensor::zeros(vx.rows(), end - start);
        for r in 0..vx.rows() {
            value.row_mut(r).copy_from_slice(&vx.row(r)[start..end]);
        }
        self.push(Op::SliceCols { x, start, end }, value)
    }

    pub fn row(&mut self, x: NodeId, r: usize) -> NodeId {
        let vx = self.value(x);
        let value = Tensor::row_vec(vx.row(r).to_vec());
        self.push(Op::Row { x, r }, value)
    }

    pub fn elem(&mut self, x: NodeId, r: usize, c: usize) -> NodeId {
        let value = Tensor::scalar(self.value(x).at(r, c));
        self.push(Op::Elem { x, r, c }, value)
    }

    pub fn stack_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let data: Vec<f64> = parts.iter().map(|&p| self.scalar_value(p)).collect();
        self.push(Op::StackScalars(parts.to_vec()), Tensor::row_vec(data))
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(log_sum_exp(self.value(a).data()));
        self.push(Op::LogSumExp(a), value)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), value)
    }

    /// Reverse pass from a scalar node. Returns gradients for every named
    /// parameter leaf; constant leaves are skipped.
    pub fn backward(&self, root: NodeId) -> Result<GradMap> {
        if !self.value(root).is_scalar() {
            return Err(Error::Shape(
                "backward requires a scalar root node".to_string(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = g.matmul(&vb.transpose()).unwrap();
                    let db = va.transpose().matmul(&g).unwrap();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = elementwise(&g, vb, |x, y| x * y);
                    let db = elementwise(&g, va, |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.map(|x| x * s));
                }
                Op::AddRow(a, row) => {
                    let mut drow = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let v = drow.at(0, c) + g.at(r, c);
                            drow.set(0, c, v);
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, drow);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = elementwise(&g, y, |gv, yv| gv * yv * (1.0 - yv));
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = elementwise(&g, y, |gv, yv| gv * (1.0 - yv * yv));
                    accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    let da = elementwise(&g, y, |gv, yv| if yv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSigmoid(a) => {
                    // d/dx ln sigmoid(x) = sigmoid(-x)
                    let x = &self.nodes[a.0].value;
                    let da = elementwise(&g, x, |gv, xv| gv / (1.0 + xv.exp()));
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let mut da = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let dot: f64 = g
                            .row(r)
                            .iter()
                            .zip(s.row(r))
                            .map(|(gv, sv)| gv * sv)
                            .sum();
                        for c in 0..g.cols() {
                            da.set(r, c, s.at(r, c) * (g.at(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        for c in 0..g.cols() {
                            da.set(r, c, g.at(r, c) - y.at(r, c).exp() * gsum);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let vx = &self.nodes[x.0].value;
                    let vg = &self.nodes[gain.0].value;
                    let n = vx.cols() as f64;
                    let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                    let mut dgain = Tensor::zeros(1, vx.cols());
                    let mut dbias = Tensor::zeros(1, vx.cols());
                    for r in 0..vx.rows() {
                        let row = vx.row(r);
                        let mean = row.iter().sum::<f64>() / n;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let std = (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / std).collect();
                        let dy = g.row(r);
                        let mut dxhat = vec![0.0; row.len()];
                        for c in 0..row.len() {
                            dxhat[c] = dy[c] * vg.at(0, c);
                            let v = dgain.at(0, c) + dy[c] * xhat[c];
                            dgain.set(0, c, v);
                            let v = dbias.at(0, c) + dy[c];
                            dbias.set(0, c, v);
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for c in 0..row.len() {
                            let v = (dxhat[c] - sum_dxhat / n - xhat[c] * sum_dxhat_xhat / n)
                                / std;
                            dx.set(r, c, v);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose());
                }
                Op::GatherRows { table, idx } => {
                    let vt = &self.nodes[table.0].value;
                    let mut dt = Tensor::zeros(vt.rows(), vt.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..vt.cols() {
                            let v = dt.at(i, c) + g.at(r, c);
                            dt.set(i, c, v);
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let vp = &self.nodes[p.0].value;
                        let mut dp = Tensor::zeros(vp.rows(), vp.cols());
                        for r in 0..vp.rows() {
                            dp.row_mut(r).copy_from_slice(g.row(offset + r));
                        }
                        offset += vp.rows();
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let vp = &self.nodes[p.0].value;
                        let mut dp = Tensor::zeros(vp.rows(), vp.cols());
                        for r in 0..vp.rows() {
                            dp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + vp.cols()]);
                        }
                        offset += vp.cols();
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                    for r in 0..vx.rows() {
                        dx.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Row { x, r } => {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                    dx.row_mut(*r).copy_from_slice(g.row(0));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Elem { x, r, c } => {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                    dx.set(*r, *c, g.scalar_value());
                    accumulate(&mut grads, *x, dx);
                }
                Op::StackScalars(parts) => {
                    for (c, &p) in parts.iter().enumerate() {
                        accumulate(&mut grads, p, Tensor::scalar(g.at(0, c)));
                    }
                }
                Op::LogSumExp(a) => {
                    let va = &self.nodes[a.0].value;
                    let out = node.value.scalar_value();
                    let gs = g.scalar_value();
                    let da = if out == f64::NEG_INFINITY {
                        Tensor::zeros(va.rows(), va.cols())
                    } else {
                        va.map(|x| {
                            if x == f64::NEG_INFINITY {
                                0.0
                            } else {
                                gs * (x - out).exp()
                            }
                        })
                    };
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let va = &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, Tensor::full(va.rows(), va.cols(), g.scalar_value()));
                }
            }
        }

        let mut out = GradMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = grads[i].take() {
                    match out.get_mut(name) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            out.insert(name.clone(), g);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert!(a.same_shape(b));
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.rows(), a.cols(), data).unwrap()
}
