//! Deterministic synthetic agglutinative parallel corpora.
//!
//! The language has a fixed inventory of 20 target morphemes. Words are
//! concatenations of 2-3 morphemes drawn from a shared, Zipf-weighted pool
//! of word types, and the source side is a deterministic transliteration
//! (uppercase) of the target, so source tokens map one-to-one onto target
//! morphemes and the reference translation of any source line is exact.
//!
//! Because sentences re-combine a limited pool of word types, independently
//! seeded corpora share atoms (morphemes) heavily while differing in
//! compound (word) frequencies - the regime that both the learning smoke
//! tests and compositional-split extraction need.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// The 20 target-side morphemes of the synthetic language.
pub const MORPHEMES: [&str; 20] = [
    "ka", "le", "mi", "no", "pu", "ra", "se", "ti", "vo", "zu",
    "kal", "lem", "min", "nor", "pus", "rat", "sev", "tin", "vok", "zur",
];

/// Generation parameters. Corpora meant to overlap (train vs test) should
/// share `pool_seed` and differ in `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_sentences: usize,
    /// Seed for sentence sampling.
    pub seed: u64,
    /// Seed for the shared word-type pool.
    pub pool_seed: u64,
    /// Number of distinct word types available to sentences.
    pub word_pool_size: usize,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sentences: 1000,
            seed: 1,
            pool_seed: 99,
            word_pool_size: 60,
            min_words: 2,
            max_words: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sentences == 0 {
            return Err(Error::InvalidArgument("n_sentences must be positive".into()));
        }
        if self.word_pool_size == 0 {
            return Err(Error::InvalidArgument("word_pool_size must be positive".into()));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::InvalidArgument(format!(
                "bad sentence length range {}..={}",
                self.min_words, self.max_words
            )));
        }
        Ok(())
    }
}

/// A generated parallel corpus with gold morpheme segmentations.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    /// Source lines (uppercase transliteration of the target).
    pub source: Vec<String>,
    /// Target lines.
    pub target: Vec<String>,
    /// Target lines with `-` between morphemes inside each word.
    pub segmented: Vec<String>,
}

/// The shared pool of word types, each a list of morpheme indices.
fn word_pool(cfg: &SynthConfig) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pool_seed);
    let mut pool: Vec<Vec<usize>> = Vec::with_capacity(cfg.word_pool_size);
    while pool.len() < cfg.word_pool_size {
        let n_morphemes = rng.gen_range(2..=3usize);
        let word: Vec<usize> = (0..n_morphemes)
            .map(|_| rng.gen_range(0..MORPHEMES.len()))
            .collect();
        if !pool.contains(&word) {
            pool.push(word);
        }
    }
    pool
}

/// Generates a corpus. Deterministic: identical configs produce identical
/// corpora.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let pool = word_pool(cfg);
    // Zipf-like weights so word frequencies are skewed, as in natural text.
    let weights: Vec<f64> = (0..pool.len()).map(|i| 1.0 / (i + 1) as f64).collect();
    let by_weight = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidArgument(format!("bad pool weights: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut source = Vec::with_capacity(cfg.n_sentences);
    let mut target = Vec::with_capacity(cfg.n_sentences);
    let mut segmented = Vec::with_capacity(cfg.n_sentences);
    for _ in 0..cfg.n_sentences {
        let n_words = rng.gen_range(cfg.min_words..=cfg.max_words);
        let mut tgt_words = Vec::with_capacity(n_words);
        let mut seg_words = Vec::with_capacity(n_words);
        for _ in 0..n_words {
            let word = &pool[by_weight.sample(&mut rng)];
            let morphs: Vec<&str> = word.iter().map(|&i| MORPHEMES[i]).collect();
            tgt_words.push(morphs.concat());
            seg_words.push(morphs.join("-"));
        }
        let tgt = tgt_words.join(" ");
        source.push(tgt.to_uppercase());
        target.push(tgt);
        segmented.push(seg_words.join(" "));
    }
    Ok(SynthCorpus { source, target, segmented })
}
