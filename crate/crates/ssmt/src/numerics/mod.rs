//! Minimal dense numeric core: matrices, a reverse-mode autodiff tape,
//! neural building blocks, Adam and a checkpoint container.

pub mod checkpoint;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{AdamConfig, ParamStore};
pub use tape::{GradMap, NodeId, Tape};
pub use tensor::{log_sum_exp, ln_one_minus_exp, Tensor};

#[cfg(test)]
mod tests {
    use super::nn;
    use super::optim::init_rng;
    use super::*;
    use rand::Rng;

    /// Central finite differences with step 1e-5, checked against the tape
    /// gradient. The oracle is independent of the backward pass: it only
    /// re-runs the forward build.
    fn finite_diff_check(
        store: &ParamStore,
        build: impl Fn(&mut Tape, &ParamStore) -> NodeId,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let root = build(&mut tape, store);
        let grads = tape.backward(root).unwrap();
        let h = 1e-5;
        for name in store.names() {
            let base = store.get(name).clone();
            for i in 0..base.len() {
                let mut plus = store.clone();
                plus.get_mut(name).data_mut()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(name).data_mut()[i] -= h;
                let mut t1 = Tape::new();
                let root1 = build(&mut t1, &plus);
                let f_plus = t1.scalar_value(root1);
                let mut t2 = Tape::new();
                let root2 = build(&mut t2, &minus);
                let f_minus = t2.scalar_value(root2);
                let fd = (f_plus - f_minus) / (2.0 * h);
                let g = grads
                    .get(name)
                    .map(|t| t.data()[i])
                    .unwrap_or(0.0);
                let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1.0);
                assert!(
                    err < tol,
                    "gradient mismatch for {name}[{i}]: tape {g} vs fd {fd} (err {err})"
                );
            }
        }
    }

    fn rand_param(store: &mut ParamStore, name: &str, rows: usize, cols: usize, seed: u64) {
        let mut rng = init_rng(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-0.9..0.9)).collect();
        store.insert(name, Tensor::new(rows, cols, data).unwrap());
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let x = tape.param("x", store.get("x").clone());
        let y = tape.mul(x, x);
        let grads = tape.backward(y).unwrap();
        assert!((grads["x"].scalar_value() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_gradient_symmetry() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::row_vec(vec![0.0, 0.0]));
        let mut tape = Tape::new();
        let x = tape.param("x", store.get("x").clone());
        let y = tape.log_sum_exp(x);
        let grads = tape.backward(y).unwrap();
        assert!((grads["x"].at(0, 0) - 0.5).abs() < 1e-12);
        assert!((grads["x"].at(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::row_vec(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn three_layer_composition_matches_finite_differences() {
        let mut store = ParamStore::new();
        rand_param(&mut store, "x", 2, 3, 1);
        rand_param(&mut store, "w1", 3, 4, 2);
        rand_param(&mut store, "b1", 1, 4, 3);
        rand_param(&mut store, "w2", 4, 4, 4);
        rand_param(&mut store, "b2", 1, 4, 5);
        rand_param(&mut store, "w3", 4, 2, 6);
        rand_param(&mut store, "b3", 1, 2, 7);
        finite_diff_check(
            &store,
            |tape, s| {
                let x = tape.param("x", s.get("x").clone());
                let w1 = tape.param("w1", s.get("w1").clone());
                let b1 = tape.param("b1", s.get("b1").clone());
                let w2 = tape.param("w2", s.get("w2").clone());
                let b2 = tape.param("b2", s.get("b2").clone());
                let w3 = tape.param("w3", s.get("w3").clone());
                let b3 = tape.param("b3", s.get("b3").clone());
                let h1 = nn::affine(tape, x, w1, b1);
                let h1 = tape.tanh(h1);
                let h2 = nn::affine(tape, h1, w2, b2);
                let h2 = tape.sigmoid(h2);
                let h3 = nn::affine(tape, h2, w3, b3);
                tape.sum(h3)
            },
            1e-6,
        );
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        // layer norm + softmax + log-softmax + logsigmoid + gather + stack
        let mut store = ParamStore::new();
        rand_param(&mut store, "x", 3, 4, 10);
        rand_param(&mut store, "g", 1, 4, 11);
        rand_param(&mut store, "b", 1, 4, 12);
        rand_param(&mut store, "table", 5, 4, 13);
        finite_diff_check(
            &store,
            |tape, s| {
                let x = tape.param("x", s.get("x").clone());
                let g = tape.param("g", s.get("g").clone());
                let b = tape.param("b", s.get("b").clone());
                let table = tape.param("table", s.get("table").clone());
                let ln = nn::layer_norm(tape, x, g, b);
                let sm = tape.softmax_rows(ln);
                let lsm = tape.log_softmax_rows(sm);
                let emb = tape.gather_rows(table, &[0, 3, 3]);
                let mixed = tape.add(lsm, emb);
                let lsg = tape.log_sigmoid(mixed);
                let e0 = tape.elem(lsg, 0, 1);
                let r = tape.row(lsg, 2);
                let r_sum = tape.sum(r);
                let stacked = tape.stack_scalars(&[e0, r_sum]);
                tape.log_sum_exp(stacked)
            },
            1e-5,
        );
    }

    #[test]
    fn lstm_cell_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        rand_param(&mut store, "x", 2, 3, 20);
        rand_param(&mut store, "h", 2, 4, 21);
        rand_param(&mut store, "c", 2, 4, 22);
        rand_param(&mut store, "wx", 3, 16, 23);
        rand_param(&mut store, "wh", 4, 16, 24);
        rand_param(&mut store, "b", 1, 16, 25);
        finite_diff_check(
            &store,
            |tape, s| {
                let x = tape.param("x", s.get("x").clone());
                let h = tape.param("h", s.get("h").clone());
                let c = tape.param("c", s.get("c").clone());
                let wx = tape.param("wx", s.get("wx").clone());
                let wh = tape.param("wh", s.get("wh").clone());
                let b = tape.param("b", s.get("b").clone());
                let (h2, c2) = nn::lstm_cell(tape, x, h, c, wx, wh, b);
                let both = tape.add(h2, c2);
                tape.sum(both)
            },
            1e-5,
        );
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let dim = 4;
        let mut store = ParamStore::new();
        rand_param(&mut store, "x", 3, dim, 30);
        for (i, name) in ["wq", "wk", "wv", "wo"].iter().enumerate() {
            rand_param(&mut store, name, dim, dim, 31 + i as u64);
        }
        for (i, name) in ["bq", "bk", "bv", "bo"].iter().enumerate() {
            rand_param(&mut store, name, 1, dim, 41 + i as u64);
        }
        finite_diff_check(
            &store,
            |tape, s| {
                let x = tape.param("x", s.get("x").clone());
                let p = |t: &mut Tape, n: &str| t.param(n, s.get(n).clone());
                let wq = p(tape, "wq");
                let bq = p(tape, "bq");
                let wk = p(tape, "wk");
                let bk = p(tape, "bk");
                let wv = p(tape, "wv");
                let bv = p(tape, "bv");
                let wo = p(tape, "wo");
                let bo = p(tape, "bo");
                let (k, v) = nn::project_kv(tape, x, wk, bk, wv, bv);
                let mask = tape.constant(nn::causal_mask(3));
                let out =
                    nn::multi_head_attention(tape, x, k, v, wq, bq, wo, bo, 2, Some(mask));
                let sq = tape.mul(out, out);
                tape.sum(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn log_softmax_rows_normalizes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(2, 3, vec![0.3, -1.0, 2.0, 5.0, 5.0, 5.0]).unwrap());
        let y = tape.log_softmax_rows(x);
        for r in 0..2 {
            let sum: f64 = tape.value(y).row(r).iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_with_single_key_returns_value() {
        let dim = 4;
        let mut tape = Tape::new();
        let mut rng = init_rng(50);
        let x = {
            let data = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            tape.constant(Tensor::new(1, dim, data).unwrap())
        };
        let eye = |t: &mut Tape| {
            let mut m = Tensor::zeros(dim, dim);
            for i in 0..dim {
                m.set(i, i, 1.0);
            }
            t.constant(m)
        };
        let zero_bias = |t: &mut Tape| t.constant(Tensor::zeros(1, dim));
        let wq = eye(&mut tape);
        let wk = eye(&mut tape);
        let wv = eye(&mut tape);
        let wo = eye(&mut tape);
        let bq = zero_bias(&mut tape);
        let bk = zero_bias(&mut tape);
        let bv = zero_bias(&mut tape);
        let bo = zero_bias(&mut tape);
        let (k, v) = nn::project_kv(&mut tape, x, wk, bk, wv, bv);
        let out = nn::multi_head_attention(&mut tape, x, k, v, wq, bq, wo, bo, 2, None);
        // one key: softmax weight is 1, so output = value = x
        for c in 0..dim {
            assert!((tape.value(out).at(0, c) - tape.value(x).at(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let dim = 4;
        let mut rng = init_rng(60);
        let mut mk = |n: usize| -> Tensor {
            let data = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(n, dim, data).unwrap()
        };
        let x1 = mk(3);
        let mut x2 = x1.clone();
        // perturb the last row only
        for c in 0..dim {
            x2.set(2, c, x2.at(2, c) + 0.5);
        }
        let weights: Vec<Tensor> = (0..4).map(|_| mk(dim)).collect();
        let run = |x: &Tensor, weights: &[Tensor]| -> Tensor {
            let mut tape = Tape::new();
            let x = tape.constant(x.clone());
            let wq = tape.constant(weights[0].clone());
            let wk = tape.constant(weights[1].clone());
            let wv = tape.constant(weights[2].clone());
            let wo = tape.constant(weights[3].clone());
            let b = tape.constant(Tensor::zeros(1, dim));
            let (k, v) = nn::project_kv(&mut tape, x, wk, b, wv, b);
            let mask = tape.constant(nn::causal_mask(3));
            let out = nn::multi_head_attention(&mut tape, x, k, v, wq, b, wo, b, 2, Some(mask));
            tape.value(out).clone()
        };
        let o1 = run(&x1, &weights);
        let o2 = run(&x2, &weights);
        for r in 0..2 {
            for c in 0..dim {
                assert!((o1.at(r, c) - o2.at(r, c)).abs() < 1e-12);
            }
        }
    }
}
