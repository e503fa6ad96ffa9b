//! The subword segmental encoder-decoder.
//!
//! A Transformer encoder reads the BPE-segmented source sentence; a causal
//! Transformer decoder reads the raw character history of the target. On top
//! of each decoder state sits the subword scorer: a character LSTM (able to
//! spell any segment up to the maximum length) and a lexicon softmax over the
//! `V` most frequent subwords, interpolated by a context-dependent gate.
//!
//! The character path is normalized over the finite space of segments with
//! length `<= m`: the first LSTM step cannot emit end-of-subword, and at
//! length `m` the end-of-subword factor is forced to probability one. With
//! the lexicon softmax also summing to one, the gated mixture is a proper
//! distribution over candidate segments for every context.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::numerics::checkpoint;
use crate::numerics::nn;
use crate::numerics::{NodeId, ParamStore, Tape, Tensor};
use crate::textproc::{CharId, CharVocab, Lexicon, WordSpanMap, EOS_SUBWORD, PAD, UNK};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub src_vocab_size: usize,
    pub char_vocab_size: usize,
    pub lexicon_size: usize,
    pub max_seg_len: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub lstm_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_seg_len < 1 {
            return Err(Error::InvalidArgument("max segment length must be >= 1".into()));
        }
        for (name, v) in [
            ("src_vocab_size", self.src_vocab_size),
            ("char_vocab_size", self.char_vocab_size),
            ("lexicon_size", self.lexicon_size),
            ("dim", self.dim),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("lstm_dim", self.lstm_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be > 0")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(
                "model dim must be divisible by head count".into(),
            ));
        }
        Ok(())
    }

    /// Desk-scale default: 2+2 layers, dim 64, 2 heads. Vocabulary sizes must
    /// still be filled in from the data artifacts.
    pub fn desk_default(src_vocab_size: usize, char_vocab_size: usize, lexicon_size: usize) -> Self {
        Self {
            src_vocab_size,
            char_vocab_size,
            lexicon_size,
            max_seg_len: 5,
            dim: 64,
            ffn_dim: 128,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            lstm_dim: 64,
        }
    }
}

#[derive(Debug)]
pub struct SsModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

struct AttnNames {
    wq: String,
    bq: String,
    wk: String,
    bk: String,
    wv: String,
    bv: String,
    wo: String,
    bo: String,
}

fn attn_names(prefix: &str) -> AttnNames {
    AttnNames {
        wq: format!("{prefix}.wq"),
        bq: format!("{prefix}.bq"),
        wk: format!("{prefix}.wk"),
        bk: format!("{prefix}.bk"),
        wv: format!("{prefix}.wv"),
        bv: format!("{prefix}.bv"),
        wo: format!("{prefix}.wo"),
        bo: format!("{prefix}.bo"),
    }
}

impl SsModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::numerics::optim::init_rng(seed);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let h = cfg.lstm_dim;

        fn zeros(store: &mut ParamStore, name: &str, rows: usize, cols: usize) {
            store.insert(name, Tensor::zeros(rows, cols));
        }
        fn ones(store: &mut ParamStore, name: &str, cols: usize) {
            store.insert(name, Tensor::full(1, cols, 1.0));
        }
        fn attn(
            store: &mut ParamStore,
            prefix: &str,
            d: usize,
            rng: &mut rand_chacha::ChaCha8Rng,
        ) {
            let names = attn_names(prefix);
            for w in [&names.wq, &names.wk, &names.wv, &names.wo] {
                store.insert_uniform(w, d, d, rng);
            }
            for b in [&names.bq, &names.bk, &names.bv, &names.bo] {
                store.insert(b, Tensor::zeros(1, d));
            }
        }

        store.insert_uniform("src_emb", cfg.src_vocab_size, d, &mut rng);
        store.insert_uniform("char_emb", cfg.char_vocab_size, d, &mut rng);

        for i in 0..cfg.enc_layers {
            attn(&mut store, &format!("enc.{i}.attn"), d, &mut rng);
            ones(&mut store, &format!("enc.{i}.ln1.g"), d);
            zeros(&mut store, &format!("enc.{i}.ln1.b"), 1, d);
            store.insert_uniform(&format!("enc.{i}.ffn.w1"), d, cfg.ffn_dim, &mut rng);
            zeros(&mut store, &format!("enc.{i}.ffn.b1"), 1, cfg.ffn_dim);
            store.insert_uniform(&format!("enc.{i}.ffn.w2"), cfg.ffn_dim, d, &mut rng);
            zeros(&mut store, &format!("enc.{i}.ffn.b2"), 1, d);
            ones(&mut store, &format!("enc.{i}.ln2.g"), d);
            zeros(&mut store, &format!("enc.{i}.ln2.b"), 1, d);
        }
        ones(&mut store, "enc.ln.g", d);
        zeros(&mut store, "enc.ln.b", 1, d);

        for i in 0..cfg.dec_layers {
            attn(&mut store, &format!("dec.{i}.self"), d, &mut rng);
            attn(&mut store, &format!("dec.{i}.cross"), d, &mut rng);
            for ln in ["ln1", "ln2", "ln3"] {
                ones(&mut store, &format!("dec.{i}.{ln}.g"), d);
                zeros(&mut store, &format!("dec.{i}.{ln}.b"), 1, d);
            }
            store.insert_uniform(&format!("dec.{i}.ffn.w1"), d, cfg.ffn_dim, &mut rng);
            zeros(&mut store, &format!("dec.{i}.ffn.b1"), 1, cfg.ffn_dim);
            store.insert_uniform(&format!("dec.{i}.ffn.w2"), cfg.ffn_dim, d, &mut rng);
            zeros(&mut store, &format!("dec.{i}.ffn.b2"), 1, d);
        }
        ones(&mut store, "dec.ln.g", d);
        zeros(&mut store, "dec.ln.b", 1, d);

        store.insert_uniform("gate.w", d, 1, &mut rng);
        zeros(&mut store, "gate.b", 1, 1);
        store.insert_uniform("lex.w", d, cfg.lexicon_size, &mut rng);
        zeros(&mut store, "lex.b", 1, cfg.lexicon_size);
        store.insert_uniform("lstm.init_h.w", d, h, &mut rng);
        zeros(&mut store, "lstm.init_h.b", 1, h);
        store.insert_uniform("lstm.init_c.w", d, h, &mut rng);
        zeros(&mut store, "lstm.init_c.b", 1, h);
        store.insert_uniform("lstm.wx", d, 4 * h, &mut rng);
        store.insert_uniform("lstm.wh", h, 4 * h, &mut rng);
        zeros(&mut store, "lstm.b", 1, 4 * h);
        store.insert_uniform("chout.w", h, cfg.char_vocab_size, &mut rng);
        zeros(&mut store, "chout.b", 1, cfg.char_vocab_size);

        Ok(Self { cfg, store })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let cfg_text = toml::to_string(&self.cfg)
            .map_err(|e| Error::Data(format!("serialize model config: {e}")))?;
        checkpoint::save(&self.store, &cfg_text, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (store, cfg_text) = checkpoint::load(path)?;
        let cfg: ModelConfig = toml::from_str(&cfg_text)
            .map_err(|e| Error::Data(format!("parse model config: {e}")))?;
        cfg.validate()?;
        Ok(Self { cfg, store })
    }
}

/// Per-token source context vectors plus the decoder's projected
/// cross-attention keys/values.
pub struct SourceEncoding {
    pub out: NodeId,
    pub len: usize,
    cross_kv: Vec<(NodeId, NodeId)>,
}

/// Causal hidden states over a target character history. `hidden[j]` encodes
/// the history before character `j` (`hidden[0]` is the start state), so it
/// conditions segments starting at position `j`.
#[derive(Clone)]
pub struct DecoderState {
    pub len: usize,
    pub hidden: Vec<NodeId>,
    self_kv: Vec<(NodeId, NodeId)>,
}

/// Everything needed to score segments starting at one context: the gate,
/// the lexicon log-softmax and the initialized character LSTM.
pub struct SegmentContext {
    pub ln_gate: NodeId,
    pub ln_gate_complement: NodeId,
    pub lex_logprobs: NodeId,
    pub lstm_h: NodeId,
    pub lstm_c: NodeId,
    /// First-step character log-probabilities (end-of-subword masked out).
    pub first_logprobs: NodeId,
}

/// The mixture score of one candidate segment, with both paths exposed.
#[derive(Debug, Clone, Copy)]
pub struct SegmentScore {
    pub total: f64,
    pub char_logprob: f64,
    /// `-inf` for out-of-lexicon segments.
    pub lex_logprob: f64,
    pub gate: f64,
}

/// A scoring/decoding session: one tape, one source sentence.
pub struct Session<'a> {
    model: &'a SsModel,
    pub tape: Tape,
    param_ids: HashMap<String, NodeId>,
    enc: SourceEncoding,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a SsModel, src_tokens: &[usize]) -> Result<Self> {
        if src_tokens.is_empty() {
            return Err(Error::EmptyInput("cannot encode an empty source sentence".into()));
        }
        let mut session = Session {
            model,
            tape: Tape::new(),
            param_ids: HashMap::new(),
            enc: SourceEncoding {
                out: NodeId::default(),
                len: 0,
                cross_kv: Vec::new(),
            },
        };
        session.enc = session.encode_source(src_tokens)?;
        Ok(session)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.cfg
    }

    pub fn encoding_len(&self) -> usize {
        self.enc.len
    }

    pub fn encoding_out(&self) -> NodeId {
        self.enc.out
    }

    fn p(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.param_ids.get(name) {
            return id;
        }
        let id = self
            .tape
            .param(name, self.model.store.get(name).clone());
        self.param_ids.insert(name.to_string(), id);
        id
    }

    fn attn_params(&mut self, prefix: &str) -> (NodeId, NodeId, NodeId, NodeId, NodeId, NodeId, NodeId, NodeId) {
        let n = attn_names(prefix);
        (
            self.p(&n.wq),
            self.p(&n.bq),
            self.p(&n.wk),
            self.p(&n.bk),
            self.p(&n.wv),
            self.p(&n.bv),
            self.p(&n.wo),
            self.p(&n.bo),
        )
    }

    fn encode_source(&mut self, tokens: &[usize]) -> Result<SourceEncoding> {
        let cfg = &self.model.cfg;
        for &t in tokens {
            if t >= cfg.src_vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "source token id {t} out of range"
                )));
            }
        }
        let emb_table = self.p("src_emb");
        let emb = self.tape.gather_rows(emb_table, tokens);
        let pe = self
            .tape
            .constant(nn::positional_encoding(tokens.len(), cfg.dim, 0));
        let mut x = self.tape.add(emb, pe);

        for i in 0..cfg.enc_layers {
            let (wq, bq, wk, bk, wv, bv, wo, bo) = self.attn_params(&format!("enc.{i}.attn"));
            let g1 = self.p(&format!("enc.{i}.ln1.g"));
            let b1 = self.p(&format!("enc.{i}.ln1.b"));
            let h = nn::layer_norm(&mut self.tape, x, g1, b1);
            let (k, v) = nn::project_kv(&mut self.tape, h, wk, bk, wv, bv);
            let attn =
                nn::multi_head_attention(&mut self.tape, h, k, v, wq, bq, wo, bo, cfg.heads, None);
            x = self.tape.add(x, attn);

            let g2 = self.p(&format!("enc.{i}.ln2.g"));
            let b2 = self.p(&format!("enc.{i}.ln2.b"));
            let h = nn::layer_norm(&mut self.tape, x, g2, b2);
            let w1 = self.p(&format!("enc.{i}.ffn.w1"));
            let fb1 = self.p(&format!("enc.{i}.ffn.b1"));
            let w2 = self.p(&format!("enc.{i}.ffn.w2"));
            let fb2 = self.p(&format!("enc.{i}.ffn.b2"));
            let ff = nn::feed_forward(&mut self.tape, h, w1, fb1, w2, fb2);
            x = self.tape.add(x, ff);
        }
        let g = self.p("enc.ln.g");
        let b = self.p("enc.ln.b");
        let out = nn::layer_norm(&mut self.tape, x, g, b);

        let mut cross_kv = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            let n = attn_names(&format!("dec.{i}.cross"));
            let wk = self.p(&n.wk);
            let bk = self.p(&n.bk);
            let wv = self.p(&n.wv);
            let bv = self.p(&n.bv);
            cross_kv.push(nn::project_kv(&mut self.tape, out, wk, bk, wv, bv));
        }
        Ok(SourceEncoding {
            out,
            len: tokens.len(),
            cross_kv,
        })
    }

    /// Full causal pass over `y`. `hidden` has `y.len() + 1` entries:
    /// position 0 is the start state before any character.
    pub fn decode_history(&mut self, y: &[CharId]) -> DecoderState {
        let cfg = &self.model.cfg;
        let mut ids = Vec::with_capacity(y.len() + 1);
        // the start-of-sentence slot reuses the end-of-subword embedding row
        ids.push(EOS_SUBWORD);
        ids.extend_from_slice(y);
        let n = ids.len();

        let emb_table = self.p("char_emb");
        let emb = self.tape.gather_rows(emb_table, &ids);
        let pe = self.tape.constant(nn::positional_encoding(n, cfg.dim, 0));
        let mut x = self.tape.add(emb, pe);
        let mask = self.tape.constant(nn::causal_mask(n));

        let mut self_kv = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            let (wq, bq, wk, bk, wv, bv, wo, bo) = self.attn_params(&format!("dec.{i}.self"));
            let g1 = self.p(&format!("dec.{i}.ln1.g"));
            let b1 = self.p(&format!("dec.{i}.ln1.b"));
            let h = nn::layer_norm(&mut self.tape, x, g1, b1);
            let (k, v) = nn::project_kv(&mut self.tape, h, wk, bk, wv, bv);
            self_kv.push((k, v));
            let attn = nn::multi_head_attention(
                &mut self.tape,
                h,
                k,
                v,
                wq,
                bq,
                wo,
                bo,
                cfg.heads,
                Some(mask),
            );
            x = self.tape.add(x, attn);

            let (cwq, cbq, _, _, _, _, cwo, cbo) = self.attn_params(&format!("dec.{i}.cross"));
            let g2 = self.p(&format!("dec.{i}.ln2.g"));
            let b2 = self.p(&format!("dec.{i}.ln2.b"));
            let h = nn::layer_norm(&mut self.tape, x, g2, b2);
            let (ck, cv) = self.enc.cross_kv[i];
            let attn = nn::multi_head_attention(
                &mut self.tape,
                h,
                ck,
                cv,
                cwq,
                cbq,
                cwo,
                cbo,
                cfg.heads,
                None,
            );
            x = self.tape.add(x, attn);

            let g3 = self.p(&format!("dec.{i}.ln3.g"));
            let b3 = self.p(&format!("dec.{i}.ln3.b"));
            let h = nn::layer_norm(&mut self.tape, x, g3, b3);
            let w1 = self.p(&format!("dec.{i}.ffn.w1"));
            let fb1 = self.p(&format!("dec.{i}.ffn.b1"));
            let w2 = self.p(&format!("dec.{i}.ffn.w2"));
            let fb2 = self.p(&format!("dec.{i}.ffn.b2"));
            let ff = nn::feed_forward(&mut self.tape, h, w1, fb1, w2, fb2);
            x = self.tape.add(x, ff);
        }
        let g = self.p("dec.ln.g");
        let b = self.p("dec.ln.b");
        let out = nn::layer_norm(&mut self.tape, x, g, b);
        let hidden = (0..n).map(|r| self.tape.row(out, r)).collect();
        DecoderState {
            len: y.len(),
            hidden,
            self_kv,
        }
    }

    /// Start state before any character (incremental path).
    pub fn start_state(&mut self) -> DecoderState {
        let mut state = DecoderState {
            len: 0,
            hidden: Vec::new(),
            self_kv: Vec::new(),
        };
        self.extend_inner(&mut state, EOS_SUBWORD, 0);
        state
    }

    /// Extend an incremental state by one character.
    pub fn extend_state(&mut self, state: &DecoderState, ch: CharId) -> DecoderState {
        let mut next = state.clone();
        let pos = next.len + 1;
        self.extend_inner(&mut next, ch, pos);
        next.len += 1;
        next
    }

    fn extend_inner(&mut self, state: &mut DecoderState, ch: CharId, pos: usize) {
        let cfg = &self.model.cfg;
        let emb_table = self.p("char_emb");
        let emb = self.tape.gather_rows(emb_table, &[ch]);
        let pe = self.tape.constant(nn::positional_encoding(1, cfg.dim, pos));
        let mut x = self.tape.add(emb, pe);
        let fresh = state.self_kv.is_empty();
        for i in 0..cfg.dec_layers {
            let (wq, bq, wk, bk, wv, bv, wo, bo) = self.attn_params(&format!("dec.{i}.self"));
            let g1 = self.p(&format!("dec.{i}.ln1.g"));
            let b1 = self.p(&format!("dec.{i}.ln1.b"));
            let h = nn::layer_norm(&mut self.tape, x, g1, b1);
            let (k1, v1) = nn::project_kv(&mut self.tape, h, wk, bk, wv, bv);
            let (k, v) = if fresh {
                (k1, v1)
            } else {
                let (k0, v0) = state.self_kv[i];
                (
                    self.tape.concat_rows(&[k0, k1]),
                    self.tape.concat_rows(&[v0, v1]),
                )
            };
            if fresh {
                state.self_kv.push((k, v));
            } else {
                state.self_kv[i] = (k, v);
            }
            let attn =
                nn::multi_head_attention(&mut self.tape, h, k, v, wq, bq, wo, bo, cfg.heads, None);
            x = self.tape.add(x, attn);

            let (cwq, cbq, _, _, _, _, cwo, cbo) = self.attn_params(&format!("dec.{i}.cross"));
            let g2 = self.p(&format!("dec.{i}.ln2.g"));
            let b2 = self.p(&format!("dec.{i}.ln2.b"));
            let h = nn::layer_norm(&mut self.tape, x, g2, b2);
            let (ck, cv) = self.enc.cross_kv[i];
            let attn = nn::multi_head_attention(
                &mut self.tape,
                h,
                ck,
                cv,
                cwq,
                cbq,
                cwo,
                cbo,
                cfg.heads,
                None,
            );
            x = self.tape.add(x, attn);

            let g3 = self.p(&format!("dec.{i}.ln3.g"));
            let b3 = self.p(&format!("dec.{i}.ln3.b"));
            let h = nn::layer_norm(&mut self.tape, x, g3, b3);
            let w1 = self.p(&format!("dec.{i}.ffn.w1"));
            let fb1 = self.p(&format!("dec.{i}.ffn.b1"));
            let w2 = self.p(&format!("dec.{i}.ffn.w2"));
            let fb2 = self.p(&format!("dec.{i}.ffn.b2"));
            let ff = nn::feed_forward(&mut self.tape, h, w1, fb1, w2, fb2);
            x = self.tape.add(x, ff);
        }
        let g = self.p("dec.ln.g");
        let b = self.p("dec.ln.b");
        let out = nn::layer_norm(&mut self.tape, x, g, b);
        state.hidden.push(out);
    }

    fn char_mask(&mut self, mask_eos: bool) -> NodeId {
        let n = self.model.cfg.char_vocab_size;
        let mut mask = Tensor::zeros(1, n);
        mask.set(0, PAD, -1e30);
        mask.set(0, UNK, -1e30);
        if mask_eos {
            mask.set(0, EOS_SUBWORD, -1e30);
        }
        self.tape.constant(mask)
    }

    /// Build the segment-scoring context at the hidden state `h`.
    pub fn segment_context(&mut self, h: NodeId) -> SegmentContext {
        let gw = self.p("gate.w");
        let gb = self.p("gate.b");
        let z = nn::affine(&mut self.tape, h, gw, gb);
        let ln_gate = self.tape.log_sigmoid(z);
        let neg_z = self.tape.scale(z, -1.0);
        let ln_gate_complement = self.tape.log_sigmoid(neg_z);

        let lw = self.p("lex.w");
        let lb = self.p("lex.b");
        let lex_logits = nn::affine(&mut self.tape, h, lw, lb);
        let lex_logprobs = self.tape.log_softmax_rows(lex_logits);

        let whi = self.p("lstm.init_h.w");
        let bhi = self.p("lstm.init_h.b");
        let wci = self.p("lstm.init_c.w");
        let bci = self.p("lstm.init_c.b");
        let lstm_h = nn::affine(&mut self.tape, h, whi, bhi);
        let lstm_h = self.tape.tanh(lstm_h);
        let lstm_c = nn::affine(&mut self.tape, h, wci, bci);
        let lstm_c = self.tape.tanh(lstm_c);

        let ow = self.p("chout.w");
        let ob = self.p("chout.b");
        let logits = nn::affine(&mut self.tape, lstm_h, ow, ob);
        let mask = self.char_mask(true);
        let masked = self.tape.add(logits, mask);
        let first_logprobs = self.tape.log_softmax_rows(masked);

        SegmentContext {
            ln_gate,
            ln_gate_complement,
            lex_logprobs,
            lstm_h,
            lstm_c,
            first_logprobs,
        }
    }

    /// Advance the character LSTM by consuming `ch`; returns the new state
    /// and the full next-step log-probabilities (end-of-subword included).
    pub fn lstm_advance(
        &mut self,
        h: NodeId,
        c: NodeId,
        ch: CharId,
    ) -> (NodeId, NodeId, NodeId) {
        let emb_table = self.p("char_emb");
        let x = self.tape.gather_rows(emb_table, &[ch]);
        let wx = self.p("lstm.wx");
        let wh = self.p("lstm.wh");
        let b = self.p("lstm.b");
        let (h2, c2) = nn::lstm_cell(&mut self.tape, x, h, c, wx, wh, b);
        let ow = self.p("chout.w");
        let ob = self.p("chout.b");
        let logits = nn::affine(&mut self.tape, h2, ow, ob);
        let mask = self.char_mask(false);
        let masked = self.tape.add(logits, mask);
        let logprobs = self.tape.log_softmax_rows(masked);
        (h2, c2, logprobs)
    }

    /// Character-path log-probability of a full segment, as a tape node.
    pub fn char_segment_node(&mut self, ctx: &SegmentContext, seg: &[CharId]) -> Result<NodeId> {
        let m = self.model.cfg.max_seg_len;
        if seg.is_empty() || seg.len() > m {
            return Err(Error::InvalidArgument(format!(
                "segment length {} outside [1, {m}]",
                seg.len()
            )));
        }
        let mut acc = self.tape.elem(ctx.first_logprobs, 0, seg[0]);
        let (mut h, mut c) = (ctx.lstm_h, ctx.lstm_c);
        for t in 1..=seg.len() {
            let (h2, c2, logprobs) = self.lstm_advance(h, c, seg[t - 1]);
            h = h2;
            c = c2;
            if t < seg.len() {
                let step = self.tape.elem(logprobs, 0, seg[t]);
                acc = self.tape.add(acc, step);
            } else if t < m {
                let eos = self.tape.elem(logprobs, 0, EOS_SUBWORD);
                acc = self.tape.add(acc, eos);
            }
            // at t == m the end-of-subword factor is forced (probability 1)
        }
        Ok(acc)
    }

    fn lex_id_for(&self, seg: &[CharId], lex: &Lexicon, vocab: &CharVocab) -> Option<usize> {
        let mut s = String::new();
        for &id in seg {
            s.push(vocab.char_of(id)?);
        }
        lex.id_of(&s)
    }

    /// Mixture log-probability of one segment as a tape node.
    pub fn segment_node(
        &mut self,
        ctx: &SegmentContext,
        seg: &[CharId],
        lex: &Lexicon,
        vocab: &CharVocab,
    ) -> Result<NodeId> {
        let char_lp = self.char_segment_node(ctx, seg)?;
        let char_path = self.tape.add(ctx.ln_gate, char_lp);
        match self.lex_id_for(seg, lex, vocab) {
            Some(id) => {
                let lex_lp = self.tape.elem(ctx.lex_logprobs, 0, id);
                let lex_path = self.tape.add(ctx.ln_gate_complement, lex_lp);
                let stacked = self.tape.stack_scalars(&[char_path, lex_path]);
                Ok(self.tape.log_sum_exp(stacked))
            }
            None => Ok(char_path),
        }
    }

    /// Gate value at position `j` of a decoded history (the state preceding
    /// a subword starting at `j`).
    pub fn gate(&mut self, state: &DecoderState, j: usize) -> f64 {
        let ctx = self.segment_context(state.hidden[j]);
        self.tape.scalar_value(ctx.ln_gate).exp()
    }

    pub fn char_segment_logprob(
        &mut self,
        state: &DecoderState,
        j: usize,
        seg: &[CharId],
    ) -> Result<f64> {
        let ctx = self.segment_context(state.hidden[j]);
        let node = self.char_segment_node(&ctx, seg)?;
        Ok(self.tape.scalar_value(node))
    }

    /// Lexicon-path log-probability, `-inf` when the segment is not in the
    /// lexicon.
    pub fn lex_segment_logprob(
        &mut self,
        state: &DecoderState,
        j: usize,
        seg: &[CharId],
        lex: &Lexicon,
        vocab: &CharVocab,
    ) -> f64 {
        let ctx = self.segment_context(state.hidden[j]);
        match self.lex_id_for(seg, lex, vocab) {
            Some(id) => self.tape.value(ctx.lex_logprobs).at(0, id),
            None => f64::NEG_INFINITY,
        }
    }

    /// Full mixture score of one segment with both paths broken out.
    pub fn segment_score(
        &mut self,
        state: &DecoderState,
        j: usize,
        seg: &[CharId],
        lex: &Lexicon,
        vocab: &CharVocab,
    ) -> Result<SegmentScore> {
        let ctx = self.segment_context(state.hidden[j]);
        let char_node = self.char_segment_node(&ctx, seg)?;
        let char_logprob = self.tape.scalar_value(char_node);
        let lex_logprob = match self.lex_id_for(seg, lex, vocab) {
            Some(id) => self.tape.value(ctx.lex_logprobs).at(0, id),
            None => f64::NEG_INFINITY,
        };
        let ln_g = self.tape.scalar_value(ctx.ln_gate);
        let ln_1mg = self.tape.scalar_value(ctx.ln_gate_complement);
        let total = crate::numerics::log_sum_exp(&[
            ln_g + char_logprob,
            ln_1mg + lex_logprob,
        ]);
        Ok(SegmentScore {
            total,
            char_logprob,
            lex_logprob,
            gate: ln_g.exp(),
        })
    }

    /// Score every valid lattice cell of `y` in one shared decode pass.
    /// `grid[k][j]` (end-exclusive `k`, start `j`) is the mixture
    /// log-probability node of segment `y[j..k]`.
    pub fn score_grid(
        &mut self,
        y: &[CharId],
        lex: &Lexicon,
        vocab: &CharVocab,
        spans: &WordSpanMap,
    ) -> Result<(DecoderState, Vec<Vec<Option<NodeId>>>)> {
        let n = y.len();
        let m = self.model.cfg.max_seg_len;
        let state = self.decode_history(y);
        let mut grid: Vec<Vec<Option<NodeId>>> = (0..=n).map(|k| vec![None; k]).collect();

        for j in 0..n {
            let span = spans.span_of(j);
            let seg_cap = if spans.is_separator_pos(j) {
                1
            } else {
                m.min(span.end - j)
            };
            let ctx = self.segment_context(state.hidden[j]);
            let mut acc = self.tape.elem(ctx.first_logprobs, 0, y[j]);
            let (mut h, mut c) = (ctx.lstm_h, ctx.lstm_c);
            for t in 1..=seg_cap {
                let (h2, c2, logprobs) = self.lstm_advance(h, c, y[j + t - 1]);
                h = h2;
                c = c2;
                let char_lp = if t == m {
                    acc
                } else {
                    let eos = self.tape.elem(logprobs, 0, EOS_SUBWORD);
                    self.tape.add(acc, eos)
                };
                let char_path = self.tape.add(ctx.ln_gate, char_lp);
                let cell = match self.lex_id_for(&y[j..j + t], lex, vocab) {
                    Some(id) => {
                        let lex_lp = self.tape.elem(ctx.lex_logprobs, 0, id);
                        let lex_path = self.tape.add(ctx.ln_gate_complement, lex_lp);
                        let stacked = self.tape.stack_scalars(&[char_path, lex_path]);
                        self.tape.log_sum_exp(stacked)
                    }
                    None => char_path,
                };
                grid[j + t][j] = Some(cell);
                if t < seg_cap {
                    let step = self.tape.elem(logprobs, 0, y[j + t]);
                    acc = self.tape.add(acc, step);
                }
            }
        }
        Ok((state, grid))
    }
}
