//! Neural building blocks on the tape: affine maps, layer norm, multi-head
//! attention, an LSTM cell step, feed-forward layers and positional encoding.
//!
//! Attention takes pre-projected key/value matrices so decoding can grow them
//! incrementally; a full causal pass and a position-by-position incremental
//! pass produce the same values.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x @ w + b` with `b` broadcast over rows.
pub fn affine(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let xw = tape.matmul(x, w);
    tape.add_row(xw, b)
}

pub fn layer_norm(tape: &mut Tape, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
    tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

/// Project key/value inputs once; callers cache and concatenate the results
/// for incremental decoding.
pub fn project_kv(
    tape: &mut Tape,
    x: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
) -> (NodeId, NodeId) {
    (affine(tape, x, wk, bk), affine(tape, x, wv, bv))
}

/// Multi-head scaled dot-product attention over pre-projected `k`/`v`.
///
/// `mask` (if given) is added to every head's score matrix before the
/// softmax; use `causal_mask` for autoregressive self-attention.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    x_q: NodeId,
    k: NodeId,
    v: NodeId,
    wq: NodeId,
    bq: NodeId,
    wo: NodeId,
    bo: NodeId,
    heads: usize,
    mask: Option<NodeId>,
) -> NodeId {
    let dim = tape.value(x_q).cols();
    assert_eq!(dim % heads, 0, "model dim must divide head count");
    let head_dim = dim / heads;
    let q = affine(tape, x_q, wq, bq);
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        let scores = match mask {
            Some(m) => tape.add(scores, m),
            None => scores,
        };
        let weights = tape.softmax_rows(scores);
        outs.push(tape.matmul(weights, vh));
    }
    let cat = tape.concat_cols(&outs);
    affine(tape, cat, wo, bo)
}

/// Additive causal mask: position `i` may attend to positions `<= i`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(n, n);
    for r in 0..n {
        for c in r + 1..n {
            m.set(r, c, -1e30);
        }
    }
    m
}

/// Position-wise feed-forward with ReLU.
#[allow(clippy::too_many_arguments)]
pub fn feed_forward(
    tape: &mut Tape,
    x: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
) -> NodeId {
    let h = affine(tape, x, w1, b1);
    let h = tape.relu(h);
    affine(tape, h, w2, b2)
}

/// One LSTM cell step. `x` is `nxd_in`, `h`/`c` are `nxH`; the stacked weight
/// matrices hold the input, forget, cell and output gates in that order.
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell(
    tape: &mut Tape,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
) -> (NodeId, NodeId) {
    let hidden = tape.value(h).cols();
    let xw = tape.matmul(x, wx);
    let hw = tape.matmul(h, wh);
    let gates = tape.add(xw, hw);
    let gates = tape.add_row(gates, b);
    let i_gate = tape.slice_cols(gates, 0, hidden);
    let f_gate = tape.slice_cols(gates, hidden, 2 * hidden);
    let g_gate = tape.slice_cols(gates, 2 * hidden, 3 * hidden);
    let o_gate = tape.slice_cols(gates, 3 * hidden, 4 * hidden);
    let i_gate = tape.sigmoid(i_gate);
    let f_gate = tape.sigmoid(f_gate);
    let g_gate = tape.tanh(g_gate);
    let o_gate = tape.sigmoid(o_gate);
    let fc = tape.mul(f_gate, c);
    let ig = tape.mul(i_gate, g_gate);
    let c_new = tape.add(fc, ig);
    let c_tanh = tape.tanh(c_new);
    let h_new = tape.mul(o_gate, c_tanh);
    (h_new, c_new)
}

/// Sinusoidal positional encodings for positions `offset..offset+len`.
pub fn positional_encoding(len: usize, dim: usize, offset: usize) -> Tensor {
    let mut pe = Tensor::zeros(len, dim);
    for r in 0..len {
        let pos = (offset + r) as f64;
        for c in 0..dim {
            let i = (c / 2) as f64;
            let rate = pos / 10000f64.powf(2.0 * i / dim as f64);
            let v = if c % 2 == 0 { rate.sin() } else { rate.cos() };
            pe.set(r, c, v);
        }
    }
    pe
}
