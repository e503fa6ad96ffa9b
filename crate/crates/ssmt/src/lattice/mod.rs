//! The segmentation lattice over a target character sequence.
//!
//! A cell `(j, k)` holds the log-probability of generating `y[j..k]` as one
//! subword given the character history `y[..j]`. Because the model conditions
//! only on preceding characters (not on how they were segmented), the
//! probability of the sequence marginalized over all segmentations is a
//! first-order dynamic program:
//!
//! ```text
//! alpha[0] = 0
//! alpha[k] = logsumexp_j ( alpha[j] + cell(j, k) )
//! ```
//!
//! The same recurrence with `max` in place of `logsumexp` yields the single
//! best segmentation (Viterbi). Both run over the value-level lattice; the
//! training objective re-runs the sum recurrence over tape nodes so the
//! marginal stays differentiable.

use crate::numerics::{log_sum_exp, NodeId, Tape};
use crate::ssmodel::Session;
use crate::textproc::{CharId, CharVocab, Lexicon, WordSpanMap};
use crate::{Error, Result};

/// Value-level lattice: `cells[k][j]` is the log-probability of segment
/// `y[j..k]`, or `None` when that segment is invalid (too long, or crossing
/// a word/separator boundary).
#[derive(Debug, Clone)]
pub struct SegmentLattice {
    n: usize,
    cells: Vec<Vec<Option<f64>>>,
}

/// One segmentation: consecutive `(start, end)` pairs covering `0..n`.
pub type Segmentation = Vec<(usize, usize)>;

impl SegmentLattice {
    /// `cells[k]` must have length `k` for `k in 0..=n`.
    pub fn new(cells: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::EmptyInput("lattice needs at least one row".into()));
        }
        let n = cells.len() - 1;
        for (k, row) in cells.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Shape(format!(
                    "lattice row {k} has {} cells, expected {k}",
                    row.len()
                )));
            }
        }
        Ok(Self { n, cells })
    }

    /// Uniform lattice where every segment of length `<= m` scores `logp`.
    /// Handy for testing path-counting identities.
    pub fn uniform(n: usize, m: usize, logp: f64) -> Self {
        let cells = (0..=n)
            .map(|k| {
                (0..k)
                    .map(|j| if k - j <= m { Some(logp) } else { None })
                    .collect()
            })
            .collect();
        Self { n, cells }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn cell(&self, j: usize, k: usize) -> Option<f64> {
        self.cells[k][j]
    }

    /// Log-probability of the sequence, summed over all segmentations.
    pub fn log_marginal(&self) -> Result<f64> {
        let alpha = self.forward()?;
        Ok(alpha[self.n])
    }

    /// The forward table `alpha[0..=n]`.
    pub fn forward(&self) -> Result<Vec<f64>> {
        let mut alpha = vec![f64::NEG_INFINITY; self.n + 1];
        alpha[0] = 0.0;
        let mut terms = Vec::new();
        for k in 1..=self.n {
            terms.clear();
            for j in 0..k {
                if let Some(lp) = self.cells[k][j] {
                    terms.push(alpha[j] + lp);
                }
            }
            if terms.is_empty() {
                return Err(Error::Data(format!(
                    "lattice position {k} is unreachable"
                )));
            }
            alpha[k] = log_sum_exp(&terms);
        }
        Ok(alpha)
    }

    /// Highest-scoring segmentation and its log-probability. Score ties
    /// resolve toward the longer final segment (the smaller start index).
    pub fn viterbi(&self) -> Result<(Segmentation, f64)> {
        let mut best = vec![f64::NEG_INFINITY; self.n + 1];
        let mut back = vec![0usize; self.n + 1];
        best[0] = 0.0;
        for k in 1..=self.n {
            let mut found = false;
            for j in 0..k {
                let Some(lp) = self.cells[k][j] else { continue };
                let score = best[j] + lp;
                // strict improvement only: the first (smallest) j wins ties,
                // which is the longest candidate final segment
                if !found || score > best[k] {
                    best[k] = score;
                    back[k] = j;
                    found = true;
                }
            }
            if !found {
                return Err(Error::Data(format!(
                    "lattice position {k} is unreachable"
                )));
            }
        }
        let mut segs = Vec::new();
        let mut k = self.n;
        while k > 0 {
            let j = back[k];
            segs.push((j, k));
            k = j;
        }
        segs.reverse();
        Ok((segs, best[self.n]))
    }

    /// All segmentations with their log-probabilities, by explicit recursion.
    /// Exists as an independent cross-check for the dynamic programs; refuses
    /// to enumerate more than `limit` segmentations.
    pub fn enumerate_all(&self, limit: usize) -> Result<Vec<(Segmentation, f64)>> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        self.enumerate_from(0, 0.0, &mut current, &mut out, limit)?;
        Ok(out)
    }

    fn enumerate_from(
        &self,
        j: usize,
        acc: f64,
        current: &mut Segmentation,
        out: &mut Vec<(Segmentation, f64)>,
        limit: usize,
    ) -> Result<()> {
        if j == self.n {
            if out.len() >= limit {
                return Err(Error::InvalidArgument(format!(
                    "more than {limit} segmentations; refusing to enumerate"
                )));
            }
            out.push((current.clone(), acc));
            return Ok(());
        }
        for k in j + 1..=self.n {
            if let Some(lp) = self.cells[k][j] {
                current.push((j, k));
                self.enumerate_from(k, acc + lp, current, out, limit)?;
                current.pop();
            }
        }
        Ok(())
    }
}

/// Extract the value-level lattice from a session's score grid.
pub fn lattice_from_grid(tape: &Tape, grid: &[Vec<Option<NodeId>>]) -> Result<SegmentLattice> {
    let cells = grid
        .iter()
        .map(|row| {
            row.iter()
                .map(|cell| cell.map(|id| tape.scalar_value(id)))
                .collect()
        })
        .collect();
    SegmentLattice::new(cells)
}

/// Differentiable negative log marginal of a target sequence under the
/// session's model: builds the score grid, runs the forward recurrence over
/// tape nodes, and returns `-log p(y | x)` as a scalar node.
pub fn sequence_nll(
    sess: &mut Session,
    y: &[CharId],
    lex: &Lexicon,
    vocab: &CharVocab,
    spans: &WordSpanMap,
) -> Result<NodeId> {
    if y.is_empty() {
        return Err(Error::EmptyInput("cannot score an empty target".into()));
    }
    let (_, grid) = sess.score_grid(y, lex, vocab, spans)?;
    let n = y.len();
    let zero = sess.tape.scalar(0.0);
    let mut alpha: Vec<NodeId> = vec![zero; n + 1];
    let mut terms = Vec::new();
    for k in 1..=n {
        terms.clear();
        for j in 0..k {
            if let Some(cell) = grid[k][j] {
                terms.push(sess.tape.add(alpha[j], cell));
            }
        }
        if terms.is_empty() {
            return Err(Error::Data(format!("lattice position {k} is unreachable")));
        }
        let stacked = sess.tape.stack_scalars(&terms);
        alpha[k] = sess.tape.log_sum_exp(stacked);
    }
    Ok(sess.tape.scale(alpha[n], -1.0))
}

/// Best segmentation of `y` under the session's model.
pub fn viterbi_segmentation(
    sess: &mut Session,
    y: &[CharId],
    lex: &Lexicon,
    vocab: &CharVocab,
    spans: &WordSpanMap,
) -> Result<(Segmentation, f64)> {
    let (_, grid) = sess.score_grid(y, lex, vocab, spans)?;
    let lattice = lattice_from_grid(&sess.tape, &grid)?;
    lattice.viterbi()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamConfig;
    use crate::ssmodel::{ModelConfig, SsModel};
    use crate::textproc::{word_spans, CharVocab, Lexicon, EOT};

    fn tiny_model(vocab: &CharVocab, lex: &Lexicon) -> SsModel {
        let cfg = ModelConfig {
            src_vocab_size: 5,
            char_vocab_size: vocab.len(),
            lexicon_size: lex.len(),
            max_seg_len: 3,
            dim: 8,
            ffn_dim: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            lstm_dim: 8,
        };
        SsModel::new(cfg, 7).unwrap()
    }

    #[test]
    fn uniform_lattice_marginal_matches_hand_computation() {
        // n=3, m=2, every segment has probability p = 0.1. Segmentations:
        // (1,1,1) with p^3, (1,2) and (2,1) with p^2 each, so the marginal
        // is p^3 + 2 p^2.
        let p: f64 = 0.1;
        let lattice = SegmentLattice::uniform(3, 2, p.ln());
        let want = (p.powi(3) + 2.0 * p.powi(2)).ln();
        assert!((lattice.log_marginal().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn path_counts_follow_fibonacci() {
        // with unit segment scores and m=2, the number of segmentations of a
        // length-n sequence is the n-th Fibonacci number, and the marginal of
        // the 0-score lattice is its logarithm
        let fib = [1u64, 1, 2, 3, 5, 8, 13, 21, 34, 55];
        for n in 1..10 {
            let lattice = SegmentLattice::uniform(n, 2, 0.0);
            let count = lattice.enumerate_all(100_000).unwrap().len() as u64;
            assert_eq!(count, fib[n]);
            let lm = lattice.log_marginal().unwrap();
            assert!((lm - (fib[n] as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_matches_enumeration_oracle_on_model_scores() {
        let corpus = vec!["ab ba".to_string(), "aab".to_string()];
        let vocab = CharVocab::build(&corpus).unwrap();
        let lex = Lexicon::build(&corpus, 8, 3).unwrap();
        let model = tiny_model(&vocab, &lex);
        let mut sess = crate::ssmodel::Session::new(&model, &[1, 2]).unwrap();
        let mut y = vocab.encode("aab b");
        y.push(EOT);
        let spans = word_spans(&y, &vocab).unwrap();
        let (_, grid) = sess.score_grid(&y, &lex, &vocab, &spans).unwrap();
        let lattice = lattice_from_grid(&sess.tape, &grid).unwrap();

        let all = lattice.enumerate_all(100_000).unwrap();
        let brute = log_sum_exp(&all.iter().map(|(_, lp)| *lp).collect::<Vec<_>>());
        assert!((lattice.log_marginal().unwrap() - brute).abs() < 1e-9);

        // Viterbi agrees with the enumerated argmax
        let (vit_segs, vit_score) = lattice.viterbi().unwrap();
        let best = all
            .iter()
            .cloned()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert!((vit_score - best.1).abs() < 1e-9);
        let vit_prob: f64 = vit_segs
            .iter()
            .map(|&(j, k)| lattice.cell(j, k).unwrap())
            .sum();
        assert!((vit_prob - vit_score).abs() < 1e-9);
    }

    #[test]
    fn viterbi_ties_prefer_the_longer_final_segment() {
        // two segmentations of "ab": (a)(b) and (ab), equal scores
        let cells = vec![
            vec![],
            vec![Some(-1.0)],
            vec![Some(-2.0), Some(-1.0)],
        ];
        let lattice = SegmentLattice::new(cells).unwrap();
        let (segs, score) = lattice.viterbi().unwrap();
        assert!((score + 2.0).abs() < 1e-12);
        assert_eq!(segs, vec![(0, 2)]);
    }

    #[test]
    fn unreachable_position_is_an_error() {
        let cells = vec![vec![], vec![None]];
        let lattice = SegmentLattice::new(cells).unwrap();
        assert!(lattice.log_marginal().is_err());
        assert!(lattice.viterbi().is_err());
    }

    #[test]
    fn enumeration_respects_the_limit() {
        let lattice = SegmentLattice::uniform(12, 4, 0.0);
        assert!(lattice.enumerate_all(10).is_err());
        assert!(lattice.enumerate_all(100_000).is_ok());
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let corpus = vec!["ab".to_string()];
        let vocab = CharVocab::build(&corpus).unwrap();
        let lex = Lexicon::build(&corpus, 4, 2).unwrap();
        let mut model = {
            let cfg = ModelConfig {
                src_vocab_size: 3,
                char_vocab_size: vocab.len(),
                lexicon_size: lex.len(),
                max_seg_len: 2,
                dim: 4,
                ffn_dim: 8,
                heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                lstm_dim: 4,
            };
            SsModel::new(cfg, 3).unwrap()
        };
        let mut y = vocab.encode("ab");
        y.push(EOT);
        let spans = word_spans(&y, &vocab).unwrap();
        let src = vec![1usize, 2];

        let nll = |m: &SsModel| -> f64 {
            let mut sess = crate::ssmodel::Session::new(m, &src).unwrap();
            let node = sequence_nll(&mut sess, &y, &lex, &vocab, &spans).unwrap();
            sess.tape.scalar_value(node)
        };
        let grads = {
            let mut sess = crate::ssmodel::Session::new(&model, &src).unwrap();
            let node = sequence_nll(&mut sess, &y, &lex, &vocab, &spans).unwrap();
            sess.tape.backward(node).unwrap()
        };

        let h = 1e-5;
        let names: Vec<String> = model.store.names().cloned().collect();
        for name in names {
            let len = model.store.get(&name).len();
            // probe a few coordinates per parameter to keep the test fast
            for i in (0..len).step_by(7.max(len / 3)) {
                let orig = model.store.get(&name).data()[i];
                model.store.get_mut(&name).data_mut()[i] = orig + h;
                let f_plus = nll(&model);
                model.store.get_mut(&name).data_mut()[i] = orig - h;
                let f_minus = nll(&model);
                model.store.get_mut(&name).data_mut()[i] = orig;
                let fd = (f_plus - f_minus) / (2.0 * h);
                let g = grads.get(&name).map(|t| t.data()[i]).unwrap_or(0.0);
                let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1.0);
                assert!(
                    err < 1e-4,
                    "gradient mismatch for {name}[{i}]: tape {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn adam_reduces_sequence_nll() {
        let corpus = vec!["ab ba".to_string()];
        let vocab = CharVocab::build(&corpus).unwrap();
        let lex = Lexicon::build(&corpus, 6, 3).unwrap();
        let mut model = tiny_model(&vocab, &lex);
        let mut y = vocab.encode("ab");
        y.push(EOT);
        let spans = word_spans(&y, &vocab).unwrap();
        let src = vec![1usize, 2];
        let adam = AdamConfig::default();

        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for step in 0..50 {
            let mut sess = crate::ssmodel::Session::new(&model, &src).unwrap();
            let node = sequence_nll(&mut sess, &y, &lex, &vocab, &spans).unwrap();
            let loss = sess.tape.scalar_value(node);
            if step == 0 {
                first = loss;
            }
            last = loss;
            let grads = sess.tape.backward(node).unwrap();
            drop(sess);
            model.store.adam_step(&grads, &adam).unwrap();
        }
        assert!(last.is_finite());
        assert!(last < first - 0.5, "nll {first} -> {last}");
    }
}
