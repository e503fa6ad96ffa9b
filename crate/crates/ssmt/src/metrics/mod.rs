//! Evaluation metrics for translation and segmentation quality.
//!
//! Three families of measurements live here:
//!
//! - [`chrf`]: character n-gram F-score over translation output, the main
//!   translation metric for morphologically rich target languages.
//! - [`boundary_prf`] / [`morpheme_prf`]: precision/recall/F1 of predicted
//!   morpheme boundaries and of exactly recovered morpheme spans, computed
//!   against gold surface segmentations of single words.
//! - [`paired_bootstrap`]: paired bootstrap resampling for significance
//!   testing between two systems on a shared reference set.
//!
//! All scores are reported as percentages in `[0, 100]`.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// A single word together with its surface segmentation.
///
/// Boundaries are internal split indices into the character sequence of
/// `word`: boundary `i` separates `word[..i]` from `word[i..]` (indices count
/// characters, not bytes). `ndi|ya|qonda` is stored as the word `ndiyaqonda`
/// with boundaries `{3, 5}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedWord {
    word: Vec<char>,
    boundaries: Vec<usize>,
}

impl SegmentedWord {
    /// Builds a segmented word from its surface form and internal split
    /// indices. Indices may be given in any order; duplicates are rejected.
    pub fn new(word: &str, boundaries: &[usize]) -> Result<Self> {
        let chars: Vec<char> = word.chars().collect();
        let mut sorted = boundaries.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != boundaries.len() {
            return Err(Error::InvalidArgument(format!(
                "duplicate boundary index in segmentation of {word:?}"
            )));
        }
        for &b in &sorted {
            if b == 0 || b >= chars.len() {
                return Err(Error::InvalidArgument(format!(
                    "boundary {b} out of range for word {word:?} ({} chars)",
                    chars.len()
                )));
            }
        }
        Ok(SegmentedWord { word: chars, boundaries: sorted })
    }

    /// Parses a delimiter-marked segmentation such as `ndi-ya-qonda`.
    ///
    /// Empty segments (leading, trailing or doubled delimiters) are rejected.
    pub fn from_marked(marked: &str, delimiter: char) -> Result<Self> {
        let mut word = Vec::new();
        let mut boundaries = Vec::new();
        let mut seg_len = 0usize;
        for c in marked.chars() {
            if c == delimiter {
                if seg_len == 0 {
                    return Err(Error::Data(format!(
                        "empty segment in marked word {marked:?}"
                    )));
                }
                boundaries.push(word.len());
                seg_len = 0;
            } else {
                word.push(c);
                seg_len += 1;
            }
        }
        if seg_len == 0 {
            return Err(Error::Data(format!(
                "empty segment in marked word {marked:?}"
            )));
        }
        Ok(SegmentedWord { word, boundaries })
    }

    /// The surface form without segmentation marks.
    pub fn surface(&self) -> String {
        self.word.iter().collect()
    }

    /// Internal split indices, sorted ascending.
    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// The `(start, end)` character spans of the segments, in order.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut spans = Vec::with_capacity(self.boundaries.len() + 1);
        let mut start = 0;
        for &b in &self.boundaries {
            spans.push((start, b));
            start = b;
        }
        spans.push((start, self.word.len()));
        spans
    }

    /// The segments as strings, in order.
    pub fn segments(&self) -> Vec<String> {
        self.spans()
            .iter()
            .map(|&(s, e)| self.word[s..e].iter().collect())
            .collect()
    }

    /// Renders the word with `delimiter` at each boundary.
    pub fn marked(&self, delimiter: char) -> String {
        self.segments().join(&delimiter.to_string())
    }
}

/// Micro-averaged precision/recall/F1 with the underlying counts.
///
/// `precision`, `recall` and `f1` are percentages. A zero denominator yields
/// a score of zero rather than an error, and `f1` is zero whenever
/// `precision + recall` is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl ScoreReport {
    fn from_counts(tp: usize, pred_total: usize, gold_total: usize) -> Self {
        let precision = if pred_total == 0 { 0.0 } else { 100.0 * tp as f64 / pred_total as f64 };
        let recall = if gold_total == 0 { 0.0 } else { 100.0 * tp as f64 / gold_total as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ScoreReport {
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: pred_total - tp,
            false_negatives: gold_total - tp,
        }
    }
}

fn ngram_counts(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for window in chars.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Character n-gram F-score between a hypothesis and a reference line.
///
/// Whitespace is stripped before n-gram extraction. For each order
/// `1..=n_max`, n-gram precision and recall are computed with clipped
/// (multiset) matching; orders where neither side has any n-grams are
/// skipped. The per-order precisions and recalls are arithmetically averaged
/// and combined into an F-score with recall weighted `beta` times as heavily
/// as precision. The result is a percentage in `[0, 100]`.
pub fn chrf(hyp: &str, reference: &str, n_max: usize, beta: f64) -> f64 {
    let hyp_chars: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let ref_chars: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let mut prec_sum = 0.0;
    let mut rec_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=n_max {
        let hyp_counts = ngram_counts(&hyp_chars, n);
        let ref_counts = ngram_counts(&ref_chars, n);
        let hyp_total: usize = hyp_counts.values().sum();
        let ref_total: usize = ref_counts.values().sum();
        if hyp_total == 0 && ref_total == 0 {
            continue;
        }
        let matched: usize = hyp_counts
            .iter()
            .map(|(gram, &c)| c.min(*ref_counts.get(gram).unwrap_or(&0)))
            .sum();
        prec_sum += if hyp_total == 0 { 0.0 } else { matched as f64 / hyp_total as f64 };
        rec_sum += if ref_total == 0 { 0.0 } else { matched as f64 / ref_total as f64 };
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let p = prec_sum / orders as f64;
    let r = rec_sum / orders as f64;
    let b2 = beta * beta;
    if p + r == 0.0 {
        return 0.0;
    }
    100.0 * (1.0 + b2) * p * r / (b2 * p + r)
}

fn check_aligned(pred: &[SegmentedWord], gold: &[SegmentedWord]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "word list length mismatch: {} predicted vs {} gold",
            pred.len(),
            gold.len()
        )));
    }
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.word != g.word {
            return Err(Error::Data(format!(
                "word {i} differs between predicted ({:?}) and gold ({:?})",
                p.surface(),
                g.surface()
            )));
        }
    }
    Ok(())
}

/// Morpheme boundary identification, micro-averaged over all words.
///
/// A true positive is an internal boundary position predicted for a word
/// that also appears in the gold segmentation of the same word.
pub fn boundary_prf(pred: &[SegmentedWord], gold: &[SegmentedWord]) -> Result<ScoreReport> {
    check_aligned(pred, gold)?;
    let mut tp = 0usize;
    let mut pred_total = 0usize;
    let mut gold_total = 0usize;
    for (p, g) in pred.iter().zip(gold) {
        pred_total += p.boundaries.len();
        gold_total += g.boundaries.len();
        // Both boundary lists are sorted and duplicate-free.
        let gold_set: std::collections::HashSet<usize> = g.boundaries.iter().copied().collect();
        tp += p.boundaries.iter().filter(|b| gold_set.contains(b)).count();
    }
    Ok(ScoreReport::from_counts(tp, pred_total, gold_total))
}

/// Morpheme identification, micro-averaged over all words.
///
/// A predicted subword counts as a true positive iff its exact
/// `(start, end)` character span is one of the gold morpheme spans of the
/// same word. Matching whole spans rather than surface strings means a
/// subword that happens to repeat a morpheme's spelling elsewhere in the
/// word does not get credit for it.
pub fn morpheme_prf(pred: &[SegmentedWord], gold: &[SegmentedWord]) -> Result<ScoreReport> {
    check_aligned(pred, gold)?;
    let mut tp = 0usize;
    let mut pred_total = 0usize;
    let mut gold_total = 0usize;
    for (p, g) in pred.iter().zip(gold) {
        let pred_spans = p.spans();
        let gold_spans: std::collections::HashSet<(usize, usize)> =
            g.spans().into_iter().collect();
        pred_total += pred_spans.len();
        gold_total += gold_spans.len();
        tp += pred_spans.iter().filter(|s| gold_spans.contains(s)).count();
    }
    Ok(ScoreReport::from_counts(tp, pred_total, gold_total))
}

/// Paired bootstrap resampling between two systems.
///
/// `metric` scores one hypothesis against one reference; a system's score on
/// a sample is the mean of its sentence scores. The returned p-value is the
/// fraction of `n_resamples` resamples (sentence indices drawn with
/// replacement) on which the system that scores worse on the full data still
/// scores at least as well as the better one. Results are deterministic for
/// a fixed seed.
pub fn paired_bootstrap<F>(
    hyps_a: &[String],
    hyps_b: &[String],
    refs: &[String],
    metric: F,
    n_resamples: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&str, &str) -> f64,
{
    if hyps_a.len() != refs.len() || hyps_b.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} / {} hypotheses vs {} references",
            hyps_a.len(),
            hyps_b.len(),
            refs.len()
        )));
    }
    if refs.len() < 2 {
        return Err(Error::InvalidArgument(
            "paired bootstrap needs at least 2 sentences".into(),
        ));
    }
    if n_resamples == 0 {
        return Err(Error::InvalidArgument("n_resamples must be positive".into()));
    }
    let n = refs.len();
    let scores_a: Vec<f64> = hyps_a.iter().zip(refs).map(|(h, r)| metric(h, r)).collect();
    let scores_b: Vec<f64> = hyps_b.iter().zip(refs).map(|(h, r)| metric(h, r)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    // Orient so that "a" is the apparently better system on the full data.
    let a_better = mean(&scores_a) >= mean(&scores_b);
    let (better, worse) = if a_better { (&scores_a, &scores_b) } else { (&scores_b, &scores_a) };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n_resamples {
        let mut sum_better = 0.0;
        let mut sum_worse = 0.0;
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            sum_better += better[i];
            sum_worse += worse[i];
        }
        if sum_worse >= sum_better {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_resamples as f64)
}

/// Reads gold segmentations, one word per line.
///
/// Each line is either `surface<TAB>marked` or just `marked`, where `marked`
/// carries the segmentation with `delimiter` between morphemes (for example
/// `ndiyaqonda<TAB>ndi-ya-qonda`). When a surface column is present it must
/// match the marked form with delimiters removed. Blank lines are skipped.
pub fn read_gold_words(text: &str, delimiter: char) -> Result<Vec<SegmentedWord>> {
    let mut words = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (surface, marked) = match line.split_once('\t') {
            Some((s, m)) => (Some(s.trim()), m.trim()),
            None => (None, line),
        };
        let word = SegmentedWord::from_marked(marked, delimiter).map_err(|e| {
            Error::Data(format!("line {}: {e}", lineno + 1))
        })?;
        if let Some(surface) = surface {
            if word.surface() != surface {
                return Err(Error::Data(format!(
                    "line {}: surface {surface:?} does not match marked form {marked:?}",
                    lineno + 1
                )));
            }
        }
        words.push(word);
    }
    Ok(words)
}
