//! Compositional-generalization splits for morphology.
//!
//! Treats morphemes as *atoms* and words as *compounds*: a test set
//! generalizes compositionally over a training set when it combines familiar
//! morphemes into unfamiliar words. The gap is quantified by two divergences
//! between relative-frequency distributions,
//!
//! - compound divergence `D_C = 1 - C_0.1(F_C(train) || F_C(test))`, and
//! - atom divergence `D_A = 1 - C_0.5(F_A(train) || F_A(test))`,
//!
//! where `C_alpha(P||Q) = sum_k p_k^alpha * q_k^(1-alpha)` is the Chernoff
//! coefficient. [`extract_subset`] greedily assembles a test subset whose
//! compound divergence tracks a requested target while keeping atom
//! divergence low, so the subset tests novel words built from known
//! morphemes.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::SegmentedWord;
use crate::{Error, Result};

/// A sentence whose words carry morpheme segmentations.
pub type SegmentedSentence = Vec<SegmentedWord>;

/// A relative-frequency distribution over string-valued units.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqDistribution {
    probs: BTreeMap<String, f64>,
}

impl FreqDistribution {
    /// Normalizes raw counts into relative frequencies.
    pub fn from_counts<I>(counts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, u64)>,
    {
        let mut raw: BTreeMap<String, u64> = BTreeMap::new();
        for (unit, c) in counts {
            *raw.entry(unit).or_insert(0) += c;
        }
        let total: u64 = raw.values().sum();
        if total == 0 {
            return Err(Error::EmptyInput("no counts to normalize".into()));
        }
        let probs = raw
            .into_iter()
            .filter(|&(_, c)| c > 0)
            .map(|(u, c)| (u, c as f64 / total as f64))
            .collect();
        Ok(FreqDistribution { probs })
    }

    /// The relative frequency of `unit`, zero if absent.
    pub fn prob(&self, unit: &str) -> f64 {
        self.probs.get(unit).copied().unwrap_or(0.0)
    }

    /// Number of distinct units with positive frequency.
    pub fn support_size(&self) -> usize {
        self.probs.len()
    }

    /// Iterates `(unit, frequency)` pairs in unit order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.probs.iter().map(|(u, p)| (u.as_str(), *p))
    }
}

/// Parses one whitespace-separated sentence of delimiter-marked words.
pub fn parse_segmented_line(line: &str, delimiter: char) -> Result<SegmentedSentence> {
    line.split_whitespace()
        .map(|w| SegmentedWord::from_marked(w, delimiter))
        .collect()
}

/// Parses a corpus of segmented sentences, one per line (blank lines kept as
/// empty sentences are not meaningful and are skipped).
pub fn parse_segmented_corpus(text: &str, delimiter: char) -> Result<Vec<SegmentedSentence>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_segmented_line(l, delimiter))
        .collect()
}

fn tally(corpus: &[SegmentedSentence]) -> (BTreeMap<String, u64>, BTreeMap<String, u64>) {
    let mut atoms: BTreeMap<String, u64> = BTreeMap::new();
    let mut compounds: BTreeMap<String, u64> = BTreeMap::new();
    for sentence in corpus {
        for word in sentence {
            *compounds.entry(word.surface()).or_insert(0) += 1;
            for m in word.segments() {
                *atoms.entry(m).or_insert(0) += 1;
            }
        }
    }
    (atoms, compounds)
}

/// Relative-frequency distributions of a corpus's atoms (morphemes) and
/// compounds (words).
pub fn distributions(corpus: &[SegmentedSentence]) -> Result<(FreqDistribution, FreqDistribution)> {
    let (atoms, compounds) = tally(corpus);
    if compounds.is_empty() {
        return Err(Error::EmptyInput("corpus has no words".into()));
    }
    Ok((
        FreqDistribution::from_counts(atoms)?,
        FreqDistribution::from_counts(compounds)?,
    ))
}

/// Chernoff coefficient `sum_k p_k^alpha * q_k^(1-alpha)` over the union
/// support. Requires `0 < alpha < 1`.
pub fn chernoff(p: &FreqDistribution, q: &FreqDistribution, alpha: f64) -> f64 {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    // Units absent from q contribute 0 because 1 - alpha > 0, so iterating
    // q's support covers every non-zero term.
    q.iter()
        .map(|(unit, qk)| {
            let pk = p.prob(unit);
            if pk == 0.0 { 0.0 } else { pk.powf(alpha) * qk.powf(1.0 - alpha) }
        })
        .sum()
}

const COMPOUND_ALPHA: f64 = 0.1;
const ATOM_ALPHA: f64 = 0.5;

/// Compound divergence `1 - C_0.1` between the word distributions of two
/// corpora.
pub fn compound_divergence(train: &[SegmentedSentence], test: &[SegmentedSentence]) -> Result<f64> {
    let (_, fc_train) = distributions(train)?;
    let (_, fc_test) = distributions(test)?;
    Ok(1.0 - chernoff(&fc_train, &fc_test, COMPOUND_ALPHA))
}

/// Atom divergence `1 - C_0.5` between the morpheme distributions of two
/// corpora.
pub fn atom_divergence(train: &[SegmentedSentence], test: &[SegmentedSentence]) -> Result<f64> {
    let (fa_train, _) = distributions(train)?;
    let (fa_test, _) = distributions(test)?;
    Ok(1.0 - chernoff(&fa_train, &fa_test, ATOM_ALPHA))
}

/// Parameters for greedy test-subset extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Desired compound divergence of the extracted subset against train.
    pub target_compound_divergence: f64,
    /// Number of sentences to extract.
    pub size: usize,
    /// Candidate sample size per iteration.
    pub k: usize,
    /// RNG seed for candidate sampling.
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.size == 0 {
            return Err(Error::InvalidArgument("subset size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.target_compound_divergence) {
            return Err(Error::InvalidArgument(format!(
                "target compound divergence {} outside [0, 1]",
                self.target_compound_divergence
            )));
        }
        Ok(())
    }
}

/// Outcome of [`extract_subset`].
#[derive(Debug, Clone)]
pub struct Extraction {
    /// Indices into the test corpus, in selection order.
    pub indices: Vec<usize>,
    pub compound_divergence: f64,
    pub atom_divergence: f64,
    /// The candidate pool sampled at each iteration (sorted test indices);
    /// kept so the greedy choice can be audited after the fact.
    pub candidate_pools: Vec<Vec<usize>>,
}

/// Divergences of an explicit test subset (given by index) against train.
pub fn subset_divergences(
    train: &[SegmentedSentence],
    test: &[SegmentedSentence],
    indices: &[usize],
) -> Result<(f64, f64)> {
    let subset: Vec<SegmentedSentence> = indices
        .iter()
        .map(|&i| {
            test.get(i)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("index {i} out of range")))
        })
        .collect::<Result<_>>()?;
    Ok((
        compound_divergence(train, &subset)?,
        atom_divergence(train, &subset)?,
    ))
}

struct SubsetCounts {
    atoms: BTreeMap<String, u64>,
    compounds: BTreeMap<String, u64>,
    atom_total: u64,
    compound_total: u64,
}

impl SubsetCounts {
    fn new() -> Self {
        SubsetCounts {
            atoms: BTreeMap::new(),
            compounds: BTreeMap::new(),
            atom_total: 0,
            compound_total: 0,
        }
    }

    fn add(&mut self, sentence: &SegmentedSentence) {
        for word in sentence {
            *self.compounds.entry(word.surface()).or_insert(0) += 1;
            self.compound_total += 1;
            for m in word.segments() {
                *self.atoms.entry(m).or_insert(0) += 1;
                self.atom_total += 1;
            }
        }
    }
}

fn chernoff_vs_counts(
    train: &FreqDistribution,
    counts: &BTreeMap<String, u64>,
    total: u64,
    alpha: f64,
) -> f64 {
    counts
        .iter()
        .map(|(unit, &c)| {
            let pk = train.prob(unit);
            if pk == 0.0 {
                0.0
            } else {
                let qk = c as f64 / total as f64;
                pk.powf(alpha) * qk.powf(1.0 - alpha)
            }
        })
        .sum()
}

/// Greedily extracts a test subset approaching a target compound divergence.
///
/// Starting from the empty subset, each iteration samples `spec.k` candidate
/// sentences uniformly without replacement from the not-yet-selected test
/// sentences and adds the candidate minimizing
/// `|D_C - target| + D_A`, where both divergences are evaluated on the
/// subset including the candidate. Ties go to the lowest candidate index.
/// Selected sentences leave the pool, so the subset has no duplicates.
pub fn extract_subset(
    train: &[SegmentedSentence],
    test: &[SegmentedSentence],
    spec: &SplitSpec,
) -> Result<Extraction> {
    spec.validate()?;
    if spec.size > test.len() {
        return Err(Error::InvalidArgument(format!(
            "subset size {} exceeds test corpus size {}",
            spec.size,
            test.len()
        )));
    }
    let (fa_train, fc_train) = distributions(train)?;
    for (i, s) in test.iter().enumerate() {
        if s.iter().all(|w| w.surface().is_empty()) || s.is_empty() {
            return Err(Error::EmptyInput(format!("test sentence {i} has no words")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pool: Vec<usize> = (0..test.len()).collect();
    let mut subset = SubsetCounts::new();
    let mut indices = Vec::with_capacity(spec.size);
    let mut pools = Vec::with_capacity(spec.size);

    while indices.len() < spec.size {
        if pool.is_empty() {
            return Err(Error::Data(
                "test corpus exhausted before reaching requested subset size".into(),
            ));
        }
        let amount = spec.k.min(pool.len());
        let mut sampled: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), amount)
            .into_iter()
            .map(|pos| pool[pos])
            .collect();
        // Ascending candidate order makes strict-improvement selection break
        // ties toward the lowest index.
        sampled.sort_unstable();
        pools.push(sampled.clone());

        let mut best: Option<(f64, usize)> = None;
        for &cand in &sampled {
            let obj = candidate_objective(&fa_train, &fc_train, &subset, &test[cand], spec);
            if best.map_or(true, |(b, _)| obj < b) {
                best = Some((obj, cand));
            }
        }
        let (_, chosen) = best.expect("non-empty candidate pool");
        subset.add(&test[chosen]);
        indices.push(chosen);
        pool.retain(|&i| i != chosen);
    }

    let (dc, da) = subset_divergences(train, test, &indices)?;
    Ok(Extraction {
        indices,
        compound_divergence: dc,
        atom_divergence: da,
        candidate_pools: pools,
    })
}

fn candidate_objective(
    fa_train: &FreqDistribution,
    fc_train: &FreqDistribution,
    subset: &SubsetCounts,
    candidate: &SegmentedSentence,
    spec: &SplitSpec,
) -> f64 {
    let mut atoms = subset.atoms.clone();
    let mut compounds = subset.compounds.clone();
    let mut atom_total = subset.atom_total;
    let mut compound_total = subset.compound_total;
    for word in candidate {
        *compounds.entry(word.surface()).or_insert(0) += 1;
        compound_total += 1;
        for m in word.segments() {
            *atoms.entry(m).or_insert(0) += 1;
            atom_total += 1;
        }
    }
    let dc = 1.0 - chernoff_vs_counts(fc_train, &compounds, compound_total, COMPOUND_ALPHA);
    let da = 1.0 - chernoff_vs_counts(fa_train, &atoms, atom_total, ATOM_ALPHA);
    (dc - spec.target_compound_divergence).abs() + da
}

/// The objective value `|D_C - target| + D_A` of an explicit subset, for
/// auditing extraction decisions.
pub fn subset_objective(
    train: &[SegmentedSentence],
    test: &[SegmentedSentence],
    indices: &[usize],
    target_compound_divergence: f64,
) -> Result<f64> {
    let (dc, da) = subset_divergences(train, test, indices)?;
    Ok((dc - target_compound_divergence).abs() + da)
}

/// Structured, serializable summary of an extraction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub spec: SplitSpec,
    pub train_sentences: usize,
    pub test_sentences: usize,
    pub subset_size: usize,
    pub compound_divergence: f64,
    pub atom_divergence: f64,
    /// `|D_C - target| + D_A` of the final subset.
    pub objective: f64,
    pub indices: Vec<usize>,
}

/// Packages an [`Extraction`] into a [`DivergenceReport`].
pub fn genbench_report(
    spec: &SplitSpec,
    train_sentences: usize,
    test_sentences: usize,
    extraction: &Extraction,
) -> DivergenceReport {
    DivergenceReport {
        spec: spec.clone(),
        train_sentences,
        test_sentences,
        subset_size: extraction.indices.len(),
        compound_divergence: extraction.compound_divergence,
        atom_divergence: extraction.atom_divergence,
        objective: (extraction.compound_divergence - spec.target_compound_divergence).abs()
            + extraction.atom_divergence,
        indices: extraction.indices.clone(),
    }
}
