//! Generation: dynamic character-level decoding and the naive subword-level
//! mixture beam search.
//!
//! Dynamic decoding emits one character at a time while tracking, per beam
//! slot, whether the last character *ends* a subword or *continues* an open
//! one. Four case probabilities drive the search: ending hypotheses can close
//! a fresh 1-character subword or open a longer one; continuing hypotheses
//! can close their open subword or extend it. A continuing hypothesis is
//! scored with the total remaining probability mass of its open subword, so
//! cross-flavor comparisons are coherent and a closed hypothesis's cumulative
//! score always equals the offline chain-rule score of its segmentation.
//!
//! The decoders are generic over a [`MixtureScorer`] so the same search code
//! runs against the neural model and against hand-specified probability
//! tables in tests.

use std::collections::HashMap;
use std::rc::Rc;

use crate::numerics::{ln_one_minus_exp, log_sum_exp, NodeId};
use crate::ssmodel::Session;
use crate::textproc::{CharId, CharVocab, Lexicon, EOS_SUBWORD, EOT};
use crate::{Error, Result};

/// Everything the decoders need from a model: a left-to-right character
/// context, and per-context gate, lexicon and character-path distributions.
/// All distributions are in log space.
pub trait MixtureScorer {
    /// Decoder context over the generated character history.
    type Ctx: Clone;
    /// State of the character path inside one open subword.
    type CharState: Clone;

    /// Context before any character has been generated.
    fn start_ctx(&mut self) -> Self::Ctx;
    fn advance_ctx(&mut self, ctx: &Self::Ctx, ch: CharId) -> Self::Ctx;
    /// Gate, lexicon distribution and character-path start for a subword
    /// beginning after `ctx`.
    fn open_segment(&mut self, ctx: &Self::Ctx) -> SegmentStart<Self::CharState>;
    /// Consume one character inside a subword; returns the new state and the
    /// full next-step log-probabilities (end-of-subword included).
    fn char_step(&mut self, state: &Self::CharState, ch: CharId) -> (Self::CharState, Vec<f64>);
    fn max_seg_len(&self) -> usize;
}

/// Per-context data for scoring a subword that starts here.
pub struct SegmentStart<S> {
    pub ln_gate: f64,
    pub ln_gate_complement: f64,
    /// Log-probabilities over lexicon entry ids.
    pub lex_logprobs: Vec<f64>,
    pub char_state: S,
    /// First-step character log-probabilities; the end-of-subword entry is
    /// `-inf` (subwords are non-empty).
    pub first_logprobs: Vec<f64>,
}

impl<'a> MixtureScorer for Session<'a> {
    type Ctx = crate::ssmodel::DecoderState;
    type CharState = (NodeId, NodeId);

    fn start_ctx(&mut self) -> Self::Ctx {
        self.start_state()
    }

    fn advance_ctx(&mut self, ctx: &Self::Ctx, ch: CharId) -> Self::Ctx {
        self.extend_state(ctx, ch)
    }

    fn open_segment(&mut self, ctx: &Self::Ctx) -> SegmentStart<Self::CharState> {
        let h = *ctx.hidden.last().expect("context has a hidden state");
        let sc = self.segment_context(h);
        SegmentStart {
            ln_gate: self.tape.scalar_value(sc.ln_gate),
            ln_gate_complement: self.tape.scalar_value(sc.ln_gate_complement),
            lex_logprobs: self.tape.value(sc.lex_logprobs).row(0).to_vec(),
            char_state: (sc.lstm_h, sc.lstm_c),
            first_logprobs: self.tape.value(sc.first_logprobs).row(0).to_vec(),
        }
    }

    fn char_step(&mut self, state: &Self::CharState, ch: CharId) -> (Self::CharState, Vec<f64>) {
        let (h, c, lp) = self.lstm_advance(state.0, state.1, ch);
        ((h, c), self.tape.value(lp).row(0).to_vec())
    }

    fn max_seg_len(&self) -> usize {
        self.config().max_seg_len
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_chars: usize,
    /// Marker inserted between subwords when rendering a segmentation.
    pub delimiter: char,
    /// Score the "keep the subword open" cases with the raw next-character
    /// mass instead of the leave-open partition mass. Off by default; kept
    /// for comparison.
    pub verbatim_open_mass: bool,
    /// Rank hypotheses by per-character log-probability. Off by default.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_chars: 512,
            delimiter: '|',
            verbatim_open_mass: false,
            length_normalize: false,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 {
            return Err(Error::InvalidArgument("beam size must be >= 1".into()));
        }
        if self.max_chars < 2 {
            return Err(Error::InvalidArgument("max output length must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    End,
    Con,
}

/// Cached scoring state of the subword currently being decided: for an
/// end-flavored hypothesis the (still empty) next subword, for a con-flavored
/// one the open subword.
struct OpenSeg<S> {
    /// Exact cumulative log-probability at the subword's start.
    cum_base: f64,
    start: usize,
    ln_gate: f64,
    ln_gate_complement: f64,
    lex_logprobs: Rc<Vec<f64>>,
    /// Text of the open prefix (empty for end-flavored hypotheses).
    prefix: String,
    char_state: S,
    /// Character-path log-mass of the open prefix, end factor excluded.
    ln_a: f64,
    /// Distribution over the next character (end-of-subword `-inf` on the
    /// first step).
    next_logprobs: Rc<Vec<f64>>,
}

impl<S: Clone> Clone for OpenSeg<S> {
    fn clone(&self) -> Self {
        Self {
            cum_base: self.cum_base,
            start: self.start,
            ln_gate: self.ln_gate,
            ln_gate_complement: self.ln_gate_complement,
            lex_logprobs: Rc::clone(&self.lex_logprobs),
            prefix: self.prefix.clone(),
            char_state: self.char_state.clone(),
            ln_a: self.ln_a,
            next_logprobs: Rc::clone(&self.next_logprobs),
        }
    }
}

/// A partial translation in the dynamic decoder's beam.
pub struct Hypothesis<C, S> {
    pub chars: Vec<CharId>,
    /// Sorted end positions of closed subwords; for an end-flavored
    /// hypothesis the last entry equals `chars.len()`.
    pub boundaries: Vec<usize>,
    pub flavor: Flavor,
    /// End: exact chain-rule score. Con: exact score at the open subword's
    /// start plus the log remaining mass of the open subword.
    pub cum_logprob: f64,
    ctx: C,
    seg: OpenSeg<S>,
}

impl<C: Clone, S: Clone> Clone for Hypothesis<C, S> {
    fn clone(&self) -> Self {
        Self {
            chars: self.chars.clone(),
            boundaries: self.boundaries.clone(),
            flavor: self.flavor,
            cum_logprob: self.cum_logprob,
            ctx: self.ctx.clone(),
            seg: self.seg.clone(),
        }
    }
}

impl<C, S> Hypothesis<C, S> {
    /// Start position of the open subword (con-flavored only meaningful).
    pub fn cur_start(&self) -> usize {
        self.seg.start
    }

    fn is_terminal(&self) -> bool {
        self.flavor == Flavor::End && self.chars.last() == Some(&EOT)
    }
}

/// Initial end-flavored hypothesis: empty sequence, probability one.
pub fn initial_hypothesis<M: MixtureScorer>(scorer: &mut M) -> Hypothesis<M::Ctx, M::CharState> {
    let ctx = scorer.start_ctx();
    let open = scorer.open_segment(&ctx);
    Hypothesis {
        chars: Vec::new(),
        boundaries: Vec::new(),
        flavor: Flavor::End,
        cum_logprob: 0.0,
        ctx,
        seg: open_from_start(open, 0.0, 0),
    }
}

fn open_from_start<S>(open: SegmentStart<S>, cum_base: f64, start: usize) -> OpenSeg<S> {
    OpenSeg {
        cum_base,
        start,
        ln_gate: open.ln_gate,
        ln_gate_complement: open.ln_gate_complement,
        lex_logprobs: Rc::new(open.lex_logprobs),
        prefix: String::new(),
        char_state: open.char_state,
        ln_a: 0.0,
        next_logprobs: Rc::new(open.first_logprobs),
    }
}

fn lex_prefix_mass_excl(lex: &Lexicon, logprobs: &[f64], prefix: &str) -> f64 {
    if prefix.is_empty() {
        return f64::NEG_INFINITY;
    }
    let ids = lex.prefix_ids(prefix, true);
    log_sum_exp(&ids.iter().map(|&i| logprobs[i]).collect::<Vec<_>>())
}

/// Close/continue probabilities (linear space) for extending the open
/// subword of `seg` with `y`. `(close, cont)` where `close` is the
/// probability that `y` completes the subword and `cont` the remaining mass
/// of subwords extending strictly past `y`.
fn case_probs<M: MixtureScorer>(
    scorer: &mut M,
    seg: &OpenSeg<M::CharState>,
    y: CharId,
    lex: &Lexicon,
    vocab: &CharVocab,
    verbatim: bool,
) -> (f64, f64) {
    let m = scorer.max_seg_len();
    let sep = vocab.is_separator(y);
    let open_len = seg.prefix.chars().count();
    if sep && open_len > 0 {
        // separators are their own 1-character subwords
        return (0.0, 0.0);
    }
    let new_len = open_len + 1;
    debug_assert!(new_len <= m);

    let ln_step = seg.ln_a + seg.next_logprobs[y];
    let ln_eos = if new_len == m {
        0.0 // forced end at the length bound
    } else if ln_step == f64::NEG_INFINITY {
        // the character path cannot produce y; no need to step it
        f64::NEG_INFINITY
    } else {
        let (_, dist) = scorer.char_step(&seg.char_state, y);
        dist[EOS_SUBWORD]
    };

    let mut new_prefix = seg.prefix.clone();
    let known_char = match vocab.char_of(y) {
        Some(c) => {
            new_prefix.push(c);
            true
        }
        None => false,
    };
    let lex_exact = if known_char {
        lex.id_of(&new_prefix)
            .map(|i| seg.lex_logprobs[i])
            .unwrap_or(f64::NEG_INFINITY)
    } else {
        f64::NEG_INFINITY
    };
    let lex_open = if known_char {
        lex_prefix_mass_excl(lex, &seg.lex_logprobs, &new_prefix)
    } else {
        f64::NEG_INFINITY
    };

    let g = seg.ln_gate;
    let g1 = seg.ln_gate_complement;
    let close = (g + ln_step + ln_eos).exp() + (g1 + lex_exact).exp();
    let cont = if sep || new_len >= m {
        0.0
    } else {
        let char_mass = if verbatim {
            ln_step
        } else {
            ln_step + ln_one_minus_exp(ln_eos)
        };
        (g + char_mass).exp() + (g1 + lex_open).exp()
    };
    (close, cont)
}

/// Probability that the next subword is exactly the single character `y`.
pub fn p_end_end<M: MixtureScorer>(
    scorer: &mut M,
    hyp: &Hypothesis<M::Ctx, M::CharState>,
    y: CharId,
    lex: &Lexicon,
    vocab: &CharVocab,
) -> f64 {
    debug_assert_eq!(hyp.flavor, Flavor::End);
    case_probs(scorer, &hyp.seg, y, lex, vocab, false).0
}

/// Probability mass of all subwords that start with `y` and are longer than
/// one character.
pub fn p_end_con<M: MixtureScorer>(
    scorer: &mut M,
    hyp: &Hypothesis<M::Ctx, M::CharState>,
    y: CharId,
    lex: &Lexicon,
    vocab: &CharVocab,
) -> f64 {
    debug_assert_eq!(hyp.flavor, Flavor::End);
    case_probs(scorer, &hyp.seg, y, lex, vocab, false).1
}

/// Probability that `y` completes the open subword.
pub fn p_con_end<M: MixtureScorer>(
    scorer: &mut M,
    hyp: &Hypothesis<M::Ctx, M::CharState>,
    y: CharId,
    lex: &Lexicon,
    vocab: &CharVocab,
) -> f64 {
    debug_assert_eq!(hyp.flavor, Flavor::Con);
    case_probs(scorer, &hyp.seg, y, lex, vocab, false).0
}

/// Probability mass of subwords extending the open subword strictly past `y`.
pub fn p_con_con<M: MixtureScorer>(
    scorer: &mut M,
    hyp: &Hypothesis<M::Ctx, M::CharState>,
    y: CharId,
    lex: &Lexicon,
    vocab: &CharVocab,
) -> f64 {
    debug_assert_eq!(hyp.flavor, Flavor::Con);
    case_probs(scorer, &hyp.seg, y, lex, vocab, false).1
}

#[derive(Debug, Clone, Copy)]
enum CandidateKind {
    /// Keep a finished hypothesis unchanged (it already ends in EOT).
    Carry,
    /// Append `y` and close the subword.
    Close(CharId),
    /// Append `y`, leaving the subword open.
    Continue(CharId),
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    parent_flavor: Flavor,
    parent_idx: usize,
    kind: CandidateKind,
}

fn rank_key(score: f64, len: usize, normalize: bool) -> f64 {
    if normalize {
        score / len.max(1) as f64
    } else {
        score
    }
}

fn top_b(mut cands: Vec<Candidate>, b: usize) -> Vec<Candidate> {
    // ties break toward end-flavored parents, then deterministically
    cands.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| match (a.parent_flavor, b.parent_flavor) {
                (Flavor::End, Flavor::Con) => std::cmp::Ordering::Less,
                (Flavor::Con, Flavor::End) => std::cmp::Ordering::Greater,
                _ => std::cmp::Ordering::Equal,
            })
            .then_with(|| a.parent_idx.cmp(&b.parent_idx))
            .then_with(|| {
                let key = |k: CandidateKind| match k {
                    CandidateKind::Carry => (0usize, 0usize),
                    CandidateKind::Close(y) => (1, y),
                    CandidateKind::Continue(y) => (2, y),
                };
                key(a.kind).cmp(&key(b.kind))
            })
    });
    cands.truncate(b);
    cands
}

/// Result of a decoding run.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub chars: Vec<CharId>,
    /// End positions of the subwords, covering `chars` exactly.
    pub boundaries: Vec<usize>,
    pub logprob: f64,
    /// Set when the length budget ran out before EOT.
    pub truncated: bool,
}

/// Character-by-character beam decoding over the end/continue hypothesis
/// flavors. Returns the best hypothesis whose last character is EOT, or the
/// best available one (flagged truncated) when the length budget runs out.
pub fn dynamic_decode<M: MixtureScorer>(
    scorer: &mut M,
    lex: &Lexicon,
    vocab: &CharVocab,
    cfg: &BeamConfig,
) -> Result<DecodeResult> {
    cfg.validate()?;
    let alphabet = vocab.emittable_ids();
    let b = cfg.beam_size;

    let mut end_beam: Vec<Hypothesis<M::Ctx, M::CharState>> = vec![initial_hypothesis(scorer)];
    let mut con_beam: Vec<Hypothesis<M::Ctx, M::CharState>> = Vec::new();

    for _ in 0..cfg.max_chars {
        let mut end_cands: Vec<Candidate> = Vec::new();
        let mut con_cands: Vec<Candidate> = Vec::new();

        for (flavor, beam) in [(Flavor::End, &end_beam), (Flavor::Con, &con_beam)] {
            for (idx, hyp) in beam.iter().enumerate() {
                if hyp.is_terminal() {
                    end_cands.push(Candidate {
                        score: rank_key(hyp.cum_logprob, hyp.chars.len(), cfg.length_normalize),
                        parent_flavor: flavor,
                        parent_idx: idx,
                        kind: CandidateKind::Carry,
                    });
                    continue;
                }
                let len = hyp.chars.len() + 1;
                for &y in &alphabet {
                    let (close, cont) =
                        case_probs(scorer, &hyp.seg, y, lex, vocab, cfg.verbatim_open_mass);
                    if close > 0.0 {
                        end_cands.push(Candidate {
                            score: rank_key(
                                hyp.seg.cum_base + close.ln(),
                                len,
                                cfg.length_normalize,
                            ),
                            parent_flavor: flavor,
                            parent_idx: idx,
                            kind: CandidateKind::Close(y),
                        });
                    }
                    if cont > 0.0 {
                        con_cands.push(Candidate {
                            score: rank_key(
                                hyp.seg.cum_base + cont.ln(),
                                len,
                                cfg.length_normalize,
                            ),
                            parent_flavor: flavor,
                            parent_idx: idx,
                            kind: CandidateKind::Continue(y),
                        });
                    }
                }
            }
        }

        if end_cands.is_empty() && con_cands.is_empty() {
            break;
        }
        let next_end = top_b(end_cands, b);
        let next_con = top_b(con_cands, b);

        let materialize = |scorer: &mut M,
                           c: &Candidate,
                           end_beam: &[Hypothesis<M::Ctx, M::CharState>],
                           con_beam: &[Hypothesis<M::Ctx, M::CharState>]|
         -> Hypothesis<M::Ctx, M::CharState> {
            let parent = match c.parent_flavor {
                Flavor::End => &end_beam[c.parent_idx],
                Flavor::Con => &con_beam[c.parent_idx],
            };
            match c.kind {
                CandidateKind::Carry => parent.clone(),
                CandidateKind::Close(y) => {
                    let mut chars = parent.chars.clone();
                    chars.push(y);
                    let mut boundaries = parent.boundaries.clone();
                    boundaries.push(chars.len());
                    let (close, _) =
                        case_probs(scorer, &parent.seg, y, lex, vocab, cfg.verbatim_open_mass);
                    let cum = parent.seg.cum_base + close.ln();
                    let ctx = scorer.advance_ctx(&parent.ctx, y);
                    let open = scorer.open_segment(&ctx);
                    let start = chars.len();
                    Hypothesis {
                        chars,
                        boundaries,
                        flavor: Flavor::End,
                        cum_logprob: cum,
                        ctx,
                        seg: open_from_start(open, cum, start),
                    }
                }
                CandidateKind::Continue(y) => {
                    let mut chars = parent.chars.clone();
                    chars.push(y);
                    let boundaries = parent.boundaries.clone();
                    let (_, cont) =
                        case_probs(scorer, &parent.seg, y, lex, vocab, cfg.verbatim_open_mass);
                    let cum = parent.seg.cum_base + cont.ln();
                    let ctx = scorer.advance_ctx(&parent.ctx, y);
                    let (state, dist) = scorer.char_step(&parent.seg.char_state, y);
                    let mut prefix = parent.seg.prefix.clone();
                    prefix.push(vocab.char_of(y).expect("open subwords hold real characters"));
                    let seg = OpenSeg {
                        cum_base: parent.seg.cum_base,
                        start: parent.seg.start,
                        ln_gate: parent.seg.ln_gate,
                        ln_gate_complement: parent.seg.ln_gate_complement,
                        lex_logprobs: Rc::clone(&parent.seg.lex_logprobs),
                        prefix,
                        char_state: state,
                        ln_a: parent.seg.ln_a + parent.seg.next_logprobs[y],
                        next_logprobs: Rc::new(dist),
                    };
                    Hypothesis {
                        chars,
                        boundaries,
                        flavor: Flavor::Con,
                        cum_logprob: cum,
                        ctx,
                        seg,
                    }
                }
            }
        };

        let new_end: Vec<_> = next_end
            .iter()
            .map(|c| materialize(scorer, c, &end_beam, &con_beam))
            .collect();
        let new_con: Vec<_> = next_con
            .iter()
            .map(|c| materialize(scorer, c, &end_beam, &con_beam))
            .collect();
        end_beam = new_end;
        con_beam = new_con;

        // A finished hypothesis is final only once nothing extendable can
        // still overtake it: scores never increase along extensions, and a
        // con hypothesis' open mass upper-bounds all of its completions.
        if let Some(best) = end_beam.first() {
            if best.is_terminal() {
                let best_score =
                    rank_key(best.cum_logprob, best.chars.len(), cfg.length_normalize);
                let con_best = con_beam
                    .first()
                    .map(|h| rank_key(h.cum_logprob, h.chars.len(), cfg.length_normalize));
                if con_best.is_none_or(|c| best_score >= c) {
                    return Ok(DecodeResult {
                        chars: best.chars.clone(),
                        boundaries: best.boundaries.clone(),
                        logprob: best.cum_logprob,
                        truncated: false,
                    });
                }
            }
        }
        debug_assert!(end_beam
            .iter()
            .all(|h| h.boundaries.last() == Some(&h.chars.len())));
        debug_assert!(con_beam
            .iter()
            .all(|h| h.boundaries.last() != Some(&h.chars.len())));
    }

    let best = end_beam
        .first()
        .ok_or_else(|| Error::Data("decoder produced no hypotheses".into()))?;
    Ok(DecodeResult {
        chars: best.chars.clone(),
        boundaries: best.boundaries.clone(),
        logprob: best.cum_logprob,
        truncated: true,
    })
}

/// Mixture log-probability of one complete subword given its start context.
fn segment_logprob_at<M: MixtureScorer>(
    scorer: &mut M,
    open: &SegmentStart<M::CharState>,
    seg_chars: &[CharId],
    seg_text: Option<&str>,
    lex: &Lexicon,
) -> f64 {
    let m = scorer.max_seg_len();
    debug_assert!(!seg_chars.is_empty() && seg_chars.len() <= m);
    let mut state = open.char_state.clone();
    let mut dist: &[f64] = &open.first_logprobs;
    let mut owned;
    let mut ln_a = 0.0;
    for (i, &ch) in seg_chars.iter().enumerate() {
        ln_a += dist[ch];
        if ln_a == f64::NEG_INFINITY {
            break;
        }
        if i + 1 < seg_chars.len() || seg_chars.len() < m {
            let (s2, d2) = scorer.char_step(&state, ch);
            state = s2;
            owned = d2;
            dist = &owned;
        }
    }
    let ln_char = if ln_a == f64::NEG_INFINITY {
        ln_a
    } else if seg_chars.len() < m {
        ln_a + dist[EOS_SUBWORD]
    } else {
        ln_a
    };
    let ln_lex = seg_text
        .and_then(|t| lex.id_of(t))
        .map(|i| open.lex_logprobs[i])
        .unwrap_or(f64::NEG_INFINITY);
    log_sum_exp(&[
        open.ln_gate + ln_char,
        open.ln_gate_complement + ln_lex,
    ])
}

fn segment_text(seg: &[CharId], vocab: &CharVocab) -> Option<String> {
    seg.iter().map(|&c| vocab.char_of(c)).collect()
}

/// Offline chain-rule score of a complete segmentation: the sum of mixture
/// subword log-probabilities along the boundary structure.
pub fn rescore_segmentation<M: MixtureScorer>(
    scorer: &mut M,
    chars: &[CharId],
    boundaries: &[usize],
    lex: &Lexicon,
    vocab: &CharVocab,
) -> Result<f64> {
    if chars.is_empty() {
        return Err(Error::EmptyInput("cannot rescore an empty sequence".into()));
    }
    if boundaries.last() != Some(&chars.len()) {
        return Err(Error::InvalidArgument(
            "segmentation does not cover the sequence".into(),
        ));
    }
    let mut ctx = scorer.start_ctx();
    let mut total = 0.0;
    let mut prev = 0;
    for &b in boundaries {
        if b <= prev || b > chars.len() {
            return Err(Error::InvalidArgument(format!(
                "bad boundary {b} after {prev}"
            )));
        }
        let seg = &chars[prev..b];
        if seg.len() > scorer.max_seg_len() {
            return Err(Error::InvalidArgument(format!(
                "subword of length {} exceeds the bound {}",
                seg.len(),
                scorer.max_seg_len()
            )));
        }
        let open = scorer.open_segment(&ctx);
        let text = segment_text(seg, vocab);
        total += segment_logprob_at(scorer, &open, seg, text.as_deref(), lex);
        for &ch in seg {
            ctx = scorer.advance_ctx(&ctx, ch);
        }
        prev = b;
    }
    Ok(total)
}

struct SubwordHyp<C> {
    chars: Vec<CharId>,
    boundaries: Vec<usize>,
    cum: f64,
    ctx: C,
}

impl<C: Clone> Clone for SubwordHyp<C> {
    fn clone(&self) -> Self {
        Self {
            chars: self.chars.clone(),
            boundaries: self.boundaries.clone(),
            cum: self.cum,
            ctx: self.ctx.clone(),
        }
    }
}

impl<C> SubwordHyp<C> {
    fn is_terminal(&self) -> bool {
        self.chars.last() == Some(&EOT)
    }
}

/// Candidate next subwords at one context: every single emittable character,
/// every multi-character lexicon entry, and the character path's greedy
/// rollout. Returns `(chars, text, logprob)` triples.
fn subword_candidates<M: MixtureScorer>(
    scorer: &mut M,
    open: &SegmentStart<M::CharState>,
    lex: &Lexicon,
    vocab: &CharVocab,
) -> Vec<(Vec<CharId>, f64)> {
    let m = scorer.max_seg_len();
    let mut out = Vec::new();

    for &y in &vocab.emittable_ids() {
        let text = vocab.char_of(y).map(String::from);
        let lp = segment_logprob_at(scorer, open, &[y], text.as_deref(), lex);
        out.push((vec![y], lp));
    }

    // multi-character lexicon entries, sharing character-path state along the
    // trie
    struct Frame<S> {
        node: usize,
        chars: Vec<CharId>,
        state: S,
        dist: Rc<Vec<f64>>,
        ln_a: f64,
    }
    let mut stack = vec![Frame {
        node: lex.trie_root(),
        chars: Vec::new(),
        state: open.char_state.clone(),
        dist: Rc::new(open.first_logprobs.clone()),
        ln_a: 0.0,
    }];
    while let Some(frame) = stack.pop() {
        for (c, child) in lex.trie_children(frame.node).collect::<Vec<_>>() {
            let Some(y) = vocab.id_of(c) else { continue };
            let depth = frame.chars.len() + 1;
            let ln_a = frame.ln_a + frame.dist[y];
            let mut chars = frame.chars.clone();
            chars.push(y);
            let (state, dist) = if depth < m {
                let (s, d) = scorer.char_step(&frame.state, y);
                (s, Rc::new(d))
            } else {
                (frame.state.clone(), Rc::clone(&frame.dist))
            };
            if depth >= 2 {
                if let Some(id) = lex.trie_entry_id(child) {
                    let ln_char = if depth < m {
                        ln_a + dist[EOS_SUBWORD]
                    } else {
                        ln_a
                    };
                    let lp = log_sum_exp(&[
                        open.ln_gate + ln_char,
                        open.ln_gate_complement + open.lex_logprobs[id],
                    ]);
                    out.push((chars.clone(), lp));
                }
            }
            if depth < m {
                stack.push(Frame {
                    node: child,
                    chars,
                    state,
                    dist,
                    ln_a,
                });
            }
        }
    }

    // greedy character-path rollout, so subwords outside the lexicon are
    // reachable
    let mut chars = Vec::new();
    let mut state = open.char_state.clone();
    let mut dist = open.first_logprobs.clone();
    loop {
        let (best, _) = dist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        if best == EOS_SUBWORD || chars.len() == m {
            break;
        }
        chars.push(best);
        if vocab.is_separator(best) || chars.len() == m {
            break;
        }
        let (s, d) = scorer.char_step(&state, best);
        state = s;
        dist = d;
    }
    if chars.len() >= 2 {
        let text = segment_text(&chars, vocab);
        if text.as_deref().map(|t| lex.id_of(t).is_none()).unwrap_or(true) {
            let lp = segment_logprob_at(scorer, open, &chars, text.as_deref(), lex);
            out.push((chars, lp));
        }
    }
    out
}

/// Baseline beam search where every expansion appends one complete subword
/// scored by the gated mixture.
pub fn mixture_beam_search<M: MixtureScorer>(
    scorer: &mut M,
    lex: &Lexicon,
    vocab: &CharVocab,
    cfg: &BeamConfig,
) -> Result<DecodeResult> {
    cfg.validate()?;
    let b = cfg.beam_size;
    let start = scorer.start_ctx();
    let mut beam = vec![SubwordHyp {
        chars: Vec::new(),
        boundaries: Vec::new(),
        cum: 0.0,
        ctx: start,
    }];

    for _ in 0..cfg.max_chars {
        if beam.iter().all(|h| h.is_terminal()) {
            break;
        }
        struct Ext {
            parent: usize,
            seg: Vec<CharId>,
            cum: f64,
        }
        let mut exts: Vec<Ext> = Vec::new();
        for (idx, hyp) in beam.iter().enumerate() {
            if hyp.is_terminal() {
                exts.push(Ext {
                    parent: idx,
                    seg: Vec::new(),
                    cum: hyp.cum,
                });
                continue;
            }
            if hyp.chars.len() >= cfg.max_chars {
                continue;
            }
            let open = scorer.open_segment(&hyp.ctx);
            for (seg, lp) in subword_candidates(scorer, &open, lex, vocab) {
                if hyp.chars.len() + seg.len() > cfg.max_chars {
                    continue;
                }
                exts.push(Ext {
                    parent: idx,
                    seg,
                    cum: hyp.cum + lp,
                });
            }
        }
        if exts.is_empty() {
            break;
        }
        exts.sort_by(|a, b| {
            let ka = rank_key(a.cum, beam[a.parent].chars.len() + a.seg.len(), cfg.length_normalize);
            let kb = rank_key(b.cum, beam[b.parent].chars.len() + b.seg.len(), cfg.length_normalize);
            kb.total_cmp(&ka)
                .then_with(|| a.parent.cmp(&b.parent))
                .then_with(|| a.seg.cmp(&b.seg))
        });
        exts.truncate(b);
        beam = exts
            .into_iter()
            .map(|e| {
                let parent = &beam[e.parent];
                if e.seg.is_empty() {
                    parent.clone()
                } else {
                    let mut chars = parent.chars.clone();
                    let mut ctx = parent.ctx.clone();
                    for &ch in &e.seg {
                        chars.push(ch);
                        ctx = scorer.advance_ctx(&ctx, ch);
                    }
                    let mut boundaries = parent.boundaries.clone();
                    boundaries.push(chars.len());
                    SubwordHyp {
                        chars,
                        boundaries,
                        cum: e.cum,
                        ctx,
                    }
                }
            })
            .collect();
        if beam.first().map(|h| h.is_terminal()).unwrap_or(false) {
            let best = &beam[0];
            return Ok(DecodeResult {
                chars: best.chars.clone(),
                boundaries: best.boundaries.clone(),
                logprob: best.cum,
                truncated: false,
            });
        }
    }

    let best = beam
        .iter()
        .max_by(|a, b| {
            let ka = rank_key(a.cum, a.chars.len(), cfg.length_normalize);
            let kb = rank_key(b.cum, b.chars.len(), cfg.length_normalize);
            ka.total_cmp(&kb)
        })
        .ok_or_else(|| Error::Data("decoder produced no hypotheses".into()))?;
    Ok(DecodeResult {
        chars: best.chars.clone(),
        boundaries: best.boundaries.clone(),
        logprob: best.cum,
        truncated: !best.is_terminal(),
    })
}

/// Render a segmentation with the delimiter between subwords; the EOT
/// subword, if present, is dropped.
pub fn mark_segmentation(
    chars: &[CharId],
    boundaries: &[usize],
    vocab: &CharVocab,
    delimiter: char,
) -> String {
    let mut parts = Vec::new();
    let mut prev = 0;
    for &b in boundaries {
        let text = vocab.decode(&chars[prev..b]);
        if !text.is_empty() {
            parts.push(text);
        }
        prev = b;
    }
    parts.join(&delimiter.to_string())
}

/// Hand-specified position-indexed probability tables implementing
/// [`MixtureScorer`]; the workhorse for decoder unit tests.
pub struct TableScorer {
    pub tables: Vec<PositionTable>,
    pub max_seg_len: usize,
}

/// Distributions in effect for a subword starting after `pos` generated
/// characters. Positions beyond the table list reuse the last entry.
pub struct PositionTable {
    pub ln_gate: f64,
    pub ln_gate_complement: f64,
    pub lex_logprobs: Vec<f64>,
    /// First-step character log-probabilities (end-of-subword `-inf`).
    pub first_logprobs: Vec<f64>,
    /// Within-subword prefix -> full next-step log-probabilities.
    pub cond: HashMap<Vec<CharId>, Vec<f64>>,
}

impl TableScorer {
    fn table(&self, pos: usize) -> &PositionTable {
        let i = pos.min(self.tables.len() - 1);
        &self.tables[i]
    }
}

impl MixtureScorer for TableScorer {
    /// Number of characters generated so far.
    type Ctx = usize;
    /// Subword start position plus the consumed within-subword prefix.
    type CharState = (usize, Vec<CharId>);

    fn start_ctx(&mut self) -> usize {
        0
    }

    fn advance_ctx(&mut self, ctx: &usize, _ch: CharId) -> usize {
        ctx + 1
    }

    fn open_segment(&mut self, ctx: &usize) -> SegmentStart<Self::CharState> {
        let t = self.table(*ctx);
        SegmentStart {
            ln_gate: t.ln_gate,
            ln_gate_complement: t.ln_gate_complement,
            lex_logprobs: t.lex_logprobs.clone(),
            char_state: (*ctx, Vec::new()),
            first_logprobs: t.first_logprobs.clone(),
        }
    }

    fn char_step(&mut self, state: &Self::CharState, ch: CharId) -> (Self::CharState, Vec<f64>) {
        let (pos, prefix) = state;
        let mut prefix = prefix.clone();
        prefix.push(ch);
        let t = self.table(*pos);
        let dist = t
            .cond
            .get(&prefix)
            .unwrap_or_else(|| panic!("no conditional table for prefix {prefix:?}"))
            .clone();
        ((*pos, prefix), dist)
    }

    fn max_seg_len(&self) -> usize {
        self.max_seg_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssmodel::{ModelConfig, SsModel};

    fn tiny_vocab_lex() -> (CharVocab, Lexicon) {
        let corpus = vec!["ab a b".to_string()];
        let vocab = CharVocab::build(&corpus).unwrap();
        let lex = Lexicon::build(&corpus, 3, 2).unwrap();
        (vocab, lex)
    }

    fn tiny_model(vocab: &CharVocab, lex: &Lexicon, m: usize) -> SsModel {
        let cfg = ModelConfig {
            src_vocab_size: 4,
            char_vocab_size: vocab.len(),
            lexicon_size: lex.len(),
            max_seg_len: m,
            dim: 8,
            ffn_dim: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            lstm_dim: 8,
        };
        SsModel::new(cfg, 11).unwrap()
    }

    /// A normalized, leak-free table: separator characters never appear
    /// inside multi-character subwords, so close/continue masses partition
    /// exactly.
    fn make_table(
        vocab: &CharVocab,
        lex: &Lexicon,
        gate: f64,
        lex_probs: &[(&str, f64)],
        first: &[(CharId, f64)],
        cond: &[(&[CharId], &[(CharId, f64)])],
    ) -> PositionTable {
        let n = vocab.len();
        let mut lex_lp = vec![f64::NEG_INFINITY; lex.len()];
        for (entry, p) in lex_probs {
            lex_lp[lex.id_of(entry).unwrap()] = p.ln();
        }
        let mut first_lp = vec![f64::NEG_INFINITY; n];
        for &(c, p) in first {
            first_lp[c] = p.ln();
        }
        let mut cond_map = HashMap::new();
        for &(prefix, dist) in cond {
            let mut lp = vec![f64::NEG_INFINITY; n];
            for &(c, p) in dist {
                lp[c] = p.ln();
            }
            cond_map.insert(prefix.to_vec(), lp);
        }
        PositionTable {
            ln_gate: gate.ln(),
            ln_gate_complement: (1.0 - gate).ln(),
            lex_logprobs: lex_lp,
            first_logprobs: first_lp,
            cond: cond_map,
        }
    }

    fn simple_scorer(vocab: &CharVocab, lex: &Lexicon) -> TableScorer {
        let a = vocab.id_of('a').unwrap();
        let b = vocab.id_of('b').unwrap();
        let e = EOS_SUBWORD;
        let table = make_table(
            vocab,
            lex,
            0.6,
            &[("ab", 0.5), ("a", 0.3), ("b", 0.2)],
            &[(a, 0.5), (b, 0.3), (EOT, 0.2)],
            &[
                (&[a], &[(e, 0.4), (a, 0.25), (b, 0.35)]),
                (&[b], &[(e, 0.7), (a, 0.2), (b, 0.1)]),
                (&[EOT], &[(e, 1.0)]),
            ],
        );
        TableScorer {
            tables: vec![table],
            max_seg_len: 2,
        }
    }

    fn make_con_hyp<M: MixtureScorer>(
        scorer: &mut M,
        y: CharId,
        vocab: &CharVocab,
        lex: &Lexicon,
    ) -> Hypothesis<M::Ctx, M::CharState> {
        let ctx0 = scorer.start_ctx();
        let open = scorer.open_segment(&ctx0);
        let seg0 = open_from_start(open, 0.0, 0);
        let ln_a = seg0.next_logprobs[y];
        let (state, dist) = scorer.char_step(&seg0.char_state, y);
        let ctx = scorer.advance_ctx(&ctx0, y);
        let prefix = vocab.char_of(y).unwrap().to_string();
        let open_mass = log_sum_exp(&[
            seg0.ln_gate + ln_a + ln_one_minus_exp(dist[EOS_SUBWORD]),
            seg0.ln_gate_complement
                + lex_prefix_mass_excl(lex, &seg0.lex_logprobs, &prefix),
        ]);
        let seg = OpenSeg {
            cum_base: 0.0,
            start: 0,
            ln_gate: seg0.ln_gate,
            ln_gate_complement: seg0.ln_gate_complement,
            lex_logprobs: Rc::clone(&seg0.lex_logprobs),
            prefix,
            char_state: state,
            ln_a,
            next_logprobs: Rc::new(dist),
        };
        Hypothesis {
            chars: vec![y],
            boundaries: Vec::new(),
            flavor: Flavor::Con,
            cum_logprob: open_mass,
            ctx,
            seg,
        }
    }

    #[test]
    fn end_cases_partition_unity_on_tables() {
        let (vocab, lex) = tiny_vocab_lex();
        let mut scorer = simple_scorer(&vocab, &lex);
        let hyp = initial_hypothesis(&mut scorer);
        let total: f64 = vocab
            .emittable_ids()
            .iter()
            .map(|&y| {
                p_end_end(&mut scorer, &hyp, y, &lex, &vocab)
                    + p_end_con(&mut scorer, &hyp, y, &lex, &vocab)
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-12, "partition mass {total}");
    }

    #[test]
    fn end_cases_account_for_all_mass_on_neural_model() {
        // the neural character path gives separators continuation mass that
        // the word-structure constraint forbids; the end cases plus that
        // leaked mass must account for exactly 1
        let (vocab, lex) = tiny_vocab_lex();
        let model = tiny_model(&vocab, &lex, 2);
        let mut sess = Session::new(&model, &[1, 2]).unwrap();
        let hyp = initial_hypothesis(&mut sess);
        let mut total = 0.0;
        for &y in &vocab.emittable_ids() {
            total += p_end_end(&mut sess, &hyp, y, &lex, &vocab)
                + p_end_con(&mut sess, &hyp, y, &lex, &vocab);
            if vocab.is_separator(y) {
                let ln_step = hyp.seg.ln_a + hyp.seg.next_logprobs[y];
                let (_, dist) = sess.char_step(&hyp.seg.char_state, y);
                let leak =
                    (hyp.seg.ln_gate + ln_step + ln_one_minus_exp(dist[EOS_SUBWORD])).exp();
                total += leak;
            }
        }
        assert!((total - 1.0).abs() < 1e-9, "mass {total}");
    }

    #[test]
    fn con_cases_sum_to_open_subword_mass() {
        let (vocab, lex) = tiny_vocab_lex();
        let mut scorer = simple_scorer(&vocab, &lex);
        let a = vocab.id_of('a').unwrap();
        let b = vocab.id_of('b').unwrap();
        let hyp = make_con_hyp(&mut scorer, a, &vocab, &lex);

        // by cases
        let by_cases: f64 = vocab
            .emittable_ids()
            .iter()
            .map(|&y| {
                p_con_con(&mut scorer, &hyp, y, &lex, &vocab)
                    + p_con_end(&mut scorer, &hyp, y, &lex, &vocab)
            })
            .sum();

        // by enumeration over complete subwords strictly extending "a"
        // (m = 2, so exactly the two-character extensions)
        let ctx0 = scorer.start_ctx();
        let open = scorer.open_segment(&ctx0);
        let mut by_enum = 0.0;
        for &y in &[a, b] {
            let seg = [a, y];
            let text = segment_text(&seg, &vocab).unwrap();
            by_enum += segment_logprob_at(&mut scorer, &open, &seg, Some(&text), &lex).exp();
        }
        assert!(
            (by_cases - by_enum).abs() < 1e-12,
            "cases {by_cases} vs enumeration {by_enum}"
        );

        // and both equal the hypothesis's stored open mass
        let open_mass = (hyp.cum_logprob - hyp.seg.cum_base).exp();
        assert!((by_cases - open_mass).abs() < 1e-12);
    }

    #[test]
    fn con_end_equals_full_segment_probability() {
        // cross-module identity: closing an open subword scores exactly the
        // model's mixture probability of the whole subword
        let (vocab, lex) = tiny_vocab_lex();
        let model = tiny_model(&vocab, &lex, 2);
        let mut sess = Session::new(&model, &[1]).unwrap();
        let a = vocab.id_of('a').unwrap();
        let b = vocab.id_of('b').unwrap();
        let hyp = make_con_hyp(&mut sess, a, &vocab, &lex);
        let got = p_con_end(&mut sess, &hyp, b, &lex, &vocab);

        let state = sess.decode_history(&[]);
        let want = sess
            .segment_score(&state, 0, &[a, b], &lex, &vocab)
            .unwrap()
            .total
            .exp();
        assert!(
            (got - want).abs() < 1e-6 * want.max(1e-12),
            "{got} vs {want}"
        );
    }

    #[test]
    fn forbidden_cases_are_exactly_zero() {
        let (vocab, lex) = tiny_vocab_lex();
        let mut scorer = simple_scorer(&vocab, &lex);
        let a = vocab.id_of('a').unwrap();
        let end = initial_hypothesis(&mut scorer);
        // separators cannot open a subword
        assert_eq!(p_end_con(&mut scorer, &end, EOT, &lex, &vocab), 0.0);
        let con = make_con_hyp(&mut scorer, a, &vocab, &lex);
        // separators cannot continue or close an open subword
        assert_eq!(p_con_con(&mut scorer, &con, EOT, &lex, &vocab), 0.0);
        assert_eq!(p_con_end(&mut scorer, &con, EOT, &lex, &vocab), 0.0);
        // an open subword at the length bound cannot stay open (m = 2)
        assert_eq!(p_con_con(&mut scorer, &con, a, &lex, &vocab), 0.0);
    }

    /// Enumeration-based probabilities for the hand-trace oracle: every legal
    /// subword's mixture probability computed by direct table products, with
    /// no shared code with `case_probs`.
    struct Enumerated {
        /// subword (as char ids) -> probability
        probs: HashMap<Vec<CharId>, f64>,
    }

    fn enumerate_subwords(
        scorer: &TableScorer,
        pos: usize,
        lex: &Lexicon,
        vocab: &CharVocab,
    ) -> Enumerated {
        let t = scorer.table(pos);
        let g = t.ln_gate.exp();
        let word_chars: Vec<CharId> = vocab
            .emittable_ids()
            .into_iter()
            .filter(|&c| !vocab.is_separator(c))
            .collect();
        let mut probs = HashMap::new();
        // separator singletons
        for &c in &vocab.emittable_ids() {
            if vocab.is_separator(c) && t.first_logprobs[c] > f64::NEG_INFINITY {
                let pc = t.first_logprobs[c].exp()
                    * if scorer.max_seg_len > 1 {
                        t.cond[&vec![c]][EOS_SUBWORD].exp()
                    } else {
                        1.0
                    };
                probs.insert(vec![c], g * pc);
            }
        }
        // word subwords up to length m
        let mut frontier: Vec<(Vec<CharId>, f64)> = vec![(Vec::new(), 1.0)];
        for depth in 1..=scorer.max_seg_len {
            let mut next = Vec::new();
            for (prefix, mass) in &frontier {
                for &c in &word_chars {
                    let step = if prefix.is_empty() {
                        t.first_logprobs[c].exp()
                    } else {
                        t.cond[prefix][c].exp()
                    };
                    let mut s = prefix.clone();
                    s.push(c);
                    let mass = mass * step;
                    let eos = if depth < scorer.max_seg_len {
                        t.cond[&s][EOS_SUBWORD].exp()
                    } else {
                        1.0
                    };
                    let text: String = s.iter().map(|&i| vocab.char_of(i).unwrap()).collect();
                    let p_lex = lex
                        .id_of(&text)
                        .map(|i| t.lex_logprobs[i].exp())
                        .unwrap_or(0.0);
                    probs.insert(s.clone(), g * mass * eos + (1.0 - g) * p_lex);
                    next.push((s, mass));
                }
            }
            frontier = next;
        }
        Enumerated { probs }
    }

    impl Enumerated {
        fn exact(&self, s: &[CharId]) -> f64 {
            self.probs.get(s).copied().unwrap_or(0.0)
        }
        fn open_mass(&self, prefix: &[CharId]) -> f64 {
            self.probs
                .iter()
                .filter(|(s, _)| s.len() > prefix.len() && s.starts_with(prefix))
                .map(|(_, p)| p)
                .sum()
        }
    }

    /// Literal single-beam transcription of the dynamic decoding loop, driven
    /// entirely by enumeration-based probabilities.
    fn hand_trace(
        scorer: &TableScorer,
        lex: &Lexicon,
        vocab: &CharVocab,
        max_chars: usize,
    ) -> (Vec<CharId>, Vec<usize>, f64) {
        #[derive(Clone)]
        struct H {
            chars: Vec<CharId>,
            boundaries: Vec<usize>,
            base: f64,   // log prob at the open subword's start
            start: usize,
            score: f64,
        }
        let mut y_end = Some(H {
            chars: vec![],
            boundaries: vec![],
            base: 0.0,
            start: 0,
            score: 0.0,
        });
        let mut y_con: Option<H> = None;
        let alphabet = vocab.emittable_ids();
        for _ in 0..max_chars {
            let mut best_end: Option<H> = None;
            let mut best_con: Option<H> = None;
            let mut consider = |cand: H, slot: &mut Option<H>| {
                // strictly-better replacement: earlier candidates win ties,
                // and end-flavored parents are considered first
                if slot.as_ref().map(|b| cand.score > b.score).unwrap_or(true) {
                    *slot = Some(cand);
                }
            };
            if let Some(e) = &y_end {
                if e.chars.last() == Some(&EOT) {
                    consider(e.clone(), &mut best_end);
                } else {
                    let en = enumerate_subwords(scorer, e.chars.len(), lex, vocab);
                    for &y in &alphabet {
                        let close = en.exact(&[y]);
                        if close > 0.0 {
                            let mut h = e.clone();
                            h.chars.push(y);
                            h.boundaries.push(h.chars.len());
                            h.score = e.score + close.ln();
                            h.base = h.score;
                            h.start = h.chars.len();
                            consider(h, &mut best_end);
                        }
                        let open = en.open_mass(&[y]);
                        if open > 0.0 {
                            let mut h = e.clone();
                            h.chars.push(y);
                            h.start = e.chars.len();
                            h.score = e.score + open.ln();
                            consider(h, &mut best_con);
                        }
                    }
                }
            }
            if let Some(c) = &y_con {
                let en = enumerate_subwords(scorer, c.start, lex, vocab);
                let prefix = c.chars[c.start..].to_vec();
                for &y in &alphabet {
                    let mut s = prefix.clone();
                    s.push(y);
                    let close = en.exact(&s);
                    if close > 0.0 {
                        let mut h = c.clone();
                        h.chars.push(y);
                        h.boundaries.push(h.chars.len());
                        h.score = c.base + close.ln();
                        h.base = h.score;
                        h.start = h.chars.len();
                        consider(h, &mut best_end);
                    }
                    let open = en.open_mass(&s);
                    if open > 0.0 {
                        let mut h = c.clone();
                        h.chars.push(y);
                        h.score = c.base + open.ln();
                        consider(h, &mut best_con);
                    }
                }
            }
            y_end = best_end;
            y_con = best_con;
            if let Some(e) = &y_end {
                if e.chars.last() == Some(&EOT) {
                    return (e.chars.clone(), e.boundaries.clone(), e.score);
                }
            }
        }
        let e = y_end.expect("trace kept an end hypothesis");
        (e.chars.clone(), e.boundaries.clone(), e.score)
    }

    #[test]
    fn single_beam_decode_matches_enumeration_hand_trace() {
        let (vocab, lex) = tiny_vocab_lex();
        let a = vocab.id_of('a').unwrap();
        let b = vocab.id_of('b').unwrap();
        let e = EOS_SUBWORD;
        // position-dependent tables steering toward "ab" + EOT, with enough
        // probability spread that the trace passes through a con hypothesis
        let t0 = make_table(
            &vocab,
            &lex,
            0.4,
            &[("ab", 0.7), ("a", 0.2), ("b", 0.1)],
            &[(a, 0.6), (b, 0.3), (EOT, 0.1)],
            &[
                (&[a], &[(e, 0.2), (a, 0.3), (b, 0.5)]),
                (&[b], &[(e, 0.6), (a, 0.2), (b, 0.2)]),
                (&[EOT], &[(e, 1.0)]),
            ],
        );
        let t1 = make_table(
            &vocab,
            &lex,
            0.5,
            &[("b", 0.8), ("a", 0.1), ("ab", 0.1)],
            &[(b, 0.7), (a, 0.2), (EOT, 0.1)],
            &[
                (&[a], &[(e, 0.5), (a, 0.25), (b, 0.25)]),
                (&[b], &[(e, 0.8), (a, 0.1), (b, 0.1)]),
                (&[EOT], &[(e, 1.0)]),
            ],
        );
        let t2 = make_table(
            &vocab,
            &lex,
            0.5,
            &[("a", 0.5), ("b", 0.3), ("ab", 0.2)],
            &[(EOT, 0.9), (a, 0.05), (b, 0.05)],
            &[
                (&[a], &[(e, 0.9), (a, 0.05), (b, 0.05)]),
                (&[b], &[(e, 0.9), (a, 0.05), (b, 0.05)]),
                (&[EOT], &[(e, 1.0)]),
            ],
        );
        let mut scorer = TableScorer {
            tables: vec![t0, t1, t2],
            max_seg_len: 2,
        };
        let cfg = BeamConfig {
            beam_size: 1,
            max_chars: 16,
            ..BeamConfig::default()
        };
        let got = dynamic_decode(&mut scorer, &lex, &vocab, &cfg).unwrap();
        let (chars, boundaries, score) = hand_trace(&scorer, &lex, &vocab, 16);
        assert_eq!(got.chars, chars);
        assert_eq!(got.boundaries, boundaries);
        assert!((got.logprob - score).abs() < 1e-9);
        assert!(!got.truncated);
    }

    #[test]
    fn decode_scores_match_offline_rescoring() {
        let (vocab, lex) = tiny_vocab_lex();
        let model = tiny_model(&vocab, &lex, 2);
        let cfg = BeamConfig {
            beam_size: 2,
            max_chars: 12,
            ..BeamConfig::default()
        };
        for src in [vec![1usize, 2], vec![3], vec![2, 2, 1]] {
            let mut sess = Session::new(&model, &src).unwrap();
            let dynr = dynamic_decode(&mut sess, &lex, &vocab, &cfg).unwrap();
            let re = rescore_segmentation(&mut sess, &dynr.chars, &dynr.boundaries, &lex, &vocab)
                .unwrap();
            assert!(
                (dynr.logprob - re).abs() < 1e-6,
                "dynamic {} vs rescore {re}",
                dynr.logprob
            );

            let mut sess = Session::new(&model, &src).unwrap();
            let mixr = mixture_beam_search(&mut sess, &lex, &vocab, &cfg).unwrap();
            let re = rescore_segmentation(&mut sess, &mixr.chars, &mixr.boundaries, &lex, &vocab)
                .unwrap();
            assert!(
                (mixr.logprob - re).abs() < 1e-6,
                "mixture {} vs rescore {re}",
                mixr.logprob
            );
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let (vocab, lex) = tiny_vocab_lex();
        let model = tiny_model(&vocab, &lex, 2);
        let cfg = BeamConfig {
            beam_size: 3,
            max_chars: 12,
            ..BeamConfig::default()
        };
        let run = |cfg: &BeamConfig| {
            let mut sess = Session::new(&model, &[1, 2]).unwrap();
            dynamic_decode(&mut sess, &lex, &vocab, cfg).unwrap()
        };
        assert_eq!(run(&cfg), run(&cfg));
        let verbatim = BeamConfig {
            verbatim_open_mass: true,
            ..cfg.clone()
        };
        // the verbatim open-mass reading still decodes and rescores cleanly
        let v = run(&verbatim);
        let mut sess = Session::new(&model, &[1, 2]).unwrap();
        let re = rescore_segmentation(&mut sess, &v.chars, &v.boundaries, &lex, &vocab).unwrap();
        assert!((v.logprob - re).abs() < 1e-6);
    }

    #[test]
    fn emitted_subwords_are_legal() {
        let (vocab, lex) = tiny_vocab_lex();
        let model = tiny_model(&vocab, &lex, 2);
        let cfg = BeamConfig {
            beam_size: 3,
            max_chars: 20,
            ..BeamConfig::default()
        };
        for decode in [
            dynamic_decode::<Session>,
            mixture_beam_search::<Session>,
        ] {
            let mut sess = Session::new(&model, &[2, 3]).unwrap();
            let r = decode(&mut sess, &lex, &vocab, &cfg).unwrap();
            let mut prev = 0;
            for &b in &r.boundaries {
                let seg = &r.chars[prev..b];
                assert!(!seg.is_empty() && seg.len() <= 2);
                if seg.iter().any(|&c| vocab.is_separator(c)) {
                    assert_eq!(seg.len(), 1, "separator subword must be a singleton");
                }
                prev = b;
            }
            assert_eq!(prev, r.chars.len());
        }
    }

    #[test]
    fn truncation_is_flagged_when_the_budget_runs_out() {
        let (vocab, lex) = tiny_vocab_lex();
        // tables that never want to stop: EOT gets negligible probability
        let a = vocab.id_of('a').unwrap();
        let b = vocab.id_of('b').unwrap();
        let e = EOS_SUBWORD;
        let t = make_table(
            &vocab,
            &lex,
            0.9,
            &[("a", 0.6), ("b", 0.3), ("ab", 0.1)],
            &[(a, 0.7), (b, 0.29), (EOT, 0.01)],
            &[
                (&[a], &[(e, 0.9), (a, 0.05), (b, 0.05)]),
                (&[b], &[(e, 0.9), (a, 0.05), (b, 0.05)]),
                (&[EOT], &[(e, 1.0)]),
            ],
        );
        let mut scorer = TableScorer {
            tables: vec![t],
            max_seg_len: 2,
        };
        let cfg = BeamConfig {
            beam_size: 1,
            max_chars: 6,
            ..BeamConfig::default()
        };
        let r = dynamic_decode(&mut scorer, &lex, &vocab, &cfg).unwrap();
        assert!(r.truncated);
        assert!(r.chars.len() <= 6);
    }

    #[test]
    fn segmentation_markup_uses_the_delimiter() {
        let (vocab, _) = tiny_vocab_lex();
        let a = vocab.id_of('a').unwrap();
        let b = vocab.id_of('b').unwrap();
        let chars = vec![a, b, a, EOT];
        let boundaries = vec![2, 3, 4];
        assert_eq!(mark_segmentation(&chars, &boundaries, &vocab, '|'), "ab|a");
    }

    #[test]
    fn beam_config_is_validated() {
        let bad = BeamConfig {
            beam_size: 0,
            ..BeamConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
