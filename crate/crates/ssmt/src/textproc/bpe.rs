//! Source-side byte-pair encoding: merge learning over whitespace-delimited
//! words with an end-of-word marker, and greedy application of the learned
//! merges in order.

use std::collections::{BTreeSet, HashMap};

use crate::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    vocab: BTreeSet<String>,
    charset: BTreeSet<char>,
}

impl BpeModel {
    /// Learn `n_merges` merge operations. At each step the most frequent
    /// adjacent symbol pair wins; ties break by first occurrence order in the
    /// corpus.
    pub fn train(corpus: &[String], n_merges: usize) -> Result<Self> {
        let mut word_counts: HashMap<Vec<String>, u64> = HashMap::new();
        let mut word_order: Vec<Vec<String>> = Vec::new();
        let mut charset = BTreeSet::new();
        for line in corpus {
            for word in line.split_whitespace() {
                let mut symbols: Vec<String> =
                    word.chars().map(|c| c.to_string()).collect();
                for c in word.chars() {
                    charset.insert(c);
                }
                if let Some(last) = symbols.last_mut() {
                    last.push_str(END_OF_WORD);
                }
                if !word_counts.contains_key(&symbols) {
                    word_order.push(symbols.clone());
                }
                *word_counts.entry(symbols).or_insert(0) += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(Error::EmptyInput("cannot train BPE on an empty corpus".into()));
        }

        let mut vocab: BTreeSet<String> = BTreeSet::new();
        for word in &word_order {
            for s in word {
                vocab.insert(s.clone());
            }
        }

        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            // Count pairs, remembering first-seen order for tie-breaks.
            let mut pair_counts: HashMap<(String, String), (u64, usize)> = HashMap::new();
            let mut next_seen = 0usize;
            for word in &word_order {
                let count = word_counts[word];
                for pair in word.windows(2) {
                    let key = (pair[0].clone(), pair[1].clone());
                    let entry = pair_counts.entry(key).or_insert_with(|| {
                        let e = (0, next_seen);
                        next_seen += 1;
                        e
                    });
                    entry.0 += count;
                }
            }
            let Some((best, _)) = pair_counts
                .into_iter()
                .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
            else {
                break;
            };

            let merged = format!("{}{}", best.0, best.1);
            vocab.insert(merged.clone());
            let mut new_counts = HashMap::with_capacity(word_counts.len());
            let mut new_order = Vec::with_capacity(word_order.len());
            for word in &word_order {
                let count = word_counts[word];
                let new_word = apply_merge(word, &best, &merged);
                if !new_counts.contains_key(&new_word) {
                    new_order.push(new_word.clone());
                }
                *new_counts.entry(new_word).or_insert(0) += count;
            }
            word_counts = new_counts;
            word_order = new_order;
            merges.push(best);
        }

        Ok(Self {
            merges,
            vocab,
            charset,
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &BTreeSet<String> {
        &self.vocab
    }

    /// Segment a sentence by replaying the merges in learned order. Unknown
    /// characters become [`UNK_TOKEN`].
    pub fn apply(&self, sentence: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in sentence.split_whitespace() {
            let mut symbols: Vec<String> = word
                .chars()
                .map(|c| {
                    if self.charset.contains(&c) {
                        c.to_string()
                    } else {
                        UNK_TOKEN.to_string()
                    }
                })
                .collect();
            if let Some(last) = symbols.last_mut() {
                if last != UNK_TOKEN {
                    last.push_str(END_OF_WORD);
                } else {
                    symbols.push(END_OF_WORD.to_string());
                }
            }
            for (left, right) in &self.merges {
                let merged = format!("{left}{right}");
                symbols = apply_merge(&symbols, &(left.clone(), right.clone()), &merged);
            }
            out.extend(symbols);
        }
        out
    }

    /// Invert [`BpeModel::apply`]: join tokens and restore spaces at
    /// end-of-word markers.
    pub fn detokenize(tokens: &[String]) -> String {
        let joined: String = tokens.concat();
        joined
            .split(END_OF_WORD)
            .collect::<Vec<_>>()
            .join(" ")
            .trim()
            .to_string()
    }

    pub fn to_lines(&self) -> Vec<String> {
        let mut lines = vec![format!(
            "SSMT-BPE v1 merges={} vocab={}",
            self.merges.len(),
            self.vocab.len()
        )];
        lines.push(self.charset.iter().collect::<String>());
        lines.extend(self.vocab.iter().cloned());
        for (a, b) in &self.merges {
            lines.push(format!("{a} {b}"));
        }
        lines
    }

    pub fn from_lines(lines: &[String]) -> Result<Self> {
        let header = lines
            .first()
            .ok_or_else(|| Error::Data("empty BPE file".into()))?;
        if !header.starts_with("SSMT-BPE v1") {
            return Err(Error::Data(format!("bad BPE header: {header}")));
        }
        let vocab_size = header
            .split_whitespace()
            .find_map(|f| f.strip_prefix("vocab="))
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| Error::Data(format!("bad BPE header: {header}")))?;
        let charset: BTreeSet<char> = lines
            .get(1)
            .ok_or_else(|| Error::Data("BPE file missing character set".into()))?
            .chars()
            .collect();
        if lines.len() < 2 + vocab_size {
            return Err(Error::Data("BPE file truncated in vocabulary section".into()));
        }
        let vocab: BTreeSet<String> = lines[2..2 + vocab_size].iter().cloned().collect();
        let mut merges = Vec::new();
        for line in lines[2 + vocab_size..].iter().filter(|l| !l.is_empty()) {
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Data(format!("bad BPE merge line: {line}")))?;
            merges.push((a.to_string(), b.to_string()));
        }
        Ok(Self {
            merges,
            vocab,
            charset,
        })
    }
}

fn apply_merge(word: &[String], pair: &(String, String), merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == pair.0 && word[i + 1] == pair.1 {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(word[i].clone());
            i += 1;
        }
    }
    out
}

/// Token vocabulary for the encoder, derived from a BPE model. Index 0 is
/// the unknown token.
#[derive(Debug, Clone)]
pub struct SrcVocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl SrcVocab {
    pub fn from_bpe(model: &BpeModel) -> Self {
        let mut tokens = vec![UNK_TOKEN.to_string()];
        tokens.extend(
            model
                .vocab()
                .iter()
                .filter(|t| t.as_str() != UNK_TOKEN)
                .cloned(),
        );
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.ids.get(t).copied().unwrap_or(0))
            .collect()
    }
}
