//! The subword lexicon: the `V` most frequent within-word character n-grams
//! up to length `m`, with a trie answering prefix-mass queries.

use std::collections::{BTreeMap, HashMap};

use super::is_separator_char;
use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<char, usize>,
    entry: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: Vec<String>,
    freqs: Vec<u64>,
    ids: HashMap<String, usize>,
    nodes: Vec<TrieNode>,
    max_len: usize,
}

impl Lexicon {
    /// Count all within-word character n-grams of length `1..=m` and keep the
    /// top `max_size` by frequency, ties broken lexicographically. All single
    /// characters occurring in words are always kept, so every word admits at
    /// least one segmentation; `max_size` must leave room for them.
    pub fn build(corpus: &[String], max_size: usize, max_len: usize) -> Result<Self> {
        if max_len < 1 {
            return Err(Error::InvalidArgument("max segment length must be >= 1".into()));
        }
        if corpus.is_empty() {
            return Err(Error::EmptyInput("cannot build a lexicon from an empty corpus".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut singletons: std::collections::BTreeSet<String> = Default::default();
        for line in corpus {
            for word in split_words(line) {
                let chars: Vec<char> = word.chars().collect();
                for i in 0..chars.len() {
                    singletons.insert(chars[i].to_string());
                    for len in 1..=max_len.min(chars.len() - i) {
                        let gram: String = chars[i..i + len].iter().collect();
                        *counts.entry(gram).or_insert(0) += 1;
                    }
                }
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyInput("corpus contains no word characters".into()));
        }
        if max_size < singletons.len() {
            return Err(Error::InvalidArgument(format!(
                "lexicon size {} cannot cover the {} distinct word characters",
                max_size,
                singletons.len()
            )));
        }

        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        // Singletons are mandatory; fill the remaining slots in rank order.
        let mut chosen: Vec<(String, u64)> = Vec::with_capacity(max_size);
        let mut taken: std::collections::HashSet<&str> = Default::default();
        for (gram, freq) in &ranked {
            if gram.chars().count() == 1 {
                chosen.push((gram.clone(), *freq));
                taken.insert(gram);
            }
        }
        for (gram, freq) in &ranked {
            if chosen.len() >= max_size {
                break;
            }
            if !taken.contains(gram.as_str()) {
                chosen.push((gram.clone(), *freq));
            }
        }
        chosen.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_entries(chosen, max_len)
    }

    fn from_entries(entries: Vec<(String, u64)>, max_len: usize) -> Result<Self> {
        let mut lex = Lexicon {
            entries: Vec::with_capacity(entries.len()),
            freqs: Vec::with_capacity(entries.len()),
            ids: HashMap::new(),
            nodes: vec![TrieNode::default()],
            max_len,
        };
        for (entry, freq) in entries {
            let n = entry.chars().count();
            if n == 0 || n > max_len {
                return Err(Error::Data(format!(
                    "lexicon entry {entry:?} violates length bound {max_len}"
                )));
            }
            let id = lex.entries.len();
            let mut node = 0usize;
            for c in entry.chars() {
                let next = match lex.nodes[node].children.get(&c) {
                    Some(&n) => n,
                    None => {
                        lex.nodes.push(TrieNode::default());
                        let n = lex.nodes.len() - 1;
                        lex.nodes[node].children.insert(c, n);
                        n
                    }
                };
                node = next;
            }
            if lex.nodes[node].entry.is_some() {
                return Err(Error::Data(format!("duplicate lexicon entry {entry:?}")));
            }
            lex.nodes[node].entry = Some(id);
            lex.ids.insert(entry.clone(), id);
            lex.entries.push(entry);
            lex.freqs.push(freq);
        }
        Ok(lex)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn entry(&self, id: usize) -> &str {
        &self.entries[id]
    }

    pub fn id_of(&self, subword: &str) -> Option<usize> {
        self.ids.get(subword).copied()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    /// Root of the entry trie, for incremental walks.
    pub fn trie_root(&self) -> usize {
        0
    }

    pub fn trie_child(&self, node: usize, c: char) -> Option<usize> {
        self.nodes[node].children.get(&c).copied()
    }

    /// Children of a trie node in character order.
    pub fn trie_children(&self, node: usize) -> impl Iterator<Item = (char, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&c, &n)| (c, n))
    }

    /// Entry id stored at a trie node, if the path to it spells an entry.
    pub fn trie_entry_id(&self, node: usize) -> Option<usize> {
        self.nodes[node].entry
    }

    /// Ids of all entries with the given prefix, optionally excluding an
    /// entry equal to the prefix itself. The empty set is allowed.
    pub fn prefix_ids(&self, prefix: &str, exclude_exact: bool) -> Vec<usize> {
        debug_assert!(!prefix.is_empty(), "prefix_ids requires a non-empty prefix");
        let mut node = 0usize;
        for c in prefix.chars() {
            match self.nodes[node].children.get(&c) {
                Some(&n) => node = n,
                None => return Vec::new(),
            }
        }
        let mut out = Vec::new();
        let mut stack = vec![(node, true)];
        while let Some((n, is_root)) = stack.pop() {
            if let Some(id) = self.nodes[n].entry {
                if !(is_root && exclude_exact) {
                    out.push(id);
                }
            }
            for &child in self.nodes[n].children.values() {
                stack.push((child, false));
            }
        }
        out.sort_unstable();
        out
    }

    /// Versioned text serialization: header, then one `entry<TAB>freq` line
    /// per entry in rank order.
    pub fn to_lines(&self) -> Vec<String> {
        let mut lines = vec![format!(
            "SSMT-LEXICON v1 V={} m={}",
            self.entries.len(),
            self.max_len
        )];
        for (e, f) in self.entries.iter().zip(&self.freqs) {
            lines.push(format!("{e}\t{f}"));
        }
        lines
    }

    pub fn from_lines(lines: &[String]) -> Result<Self> {
        let header = lines
            .first()
            .ok_or_else(|| Error::Data("empty lexicon file".into()))?;
        let rest = header
            .strip_prefix("SSMT-LEXICON v1 ")
            .ok_or_else(|| Error::Data(format!("bad lexicon header: {header}")))?;
        let mut v = None;
        let mut m = None;
        for field in rest.split_whitespace() {
            if let Some(x) = field.strip_prefix("V=") {
                v = x.parse::<usize>().ok();
            } else if let Some(x) = field.strip_prefix("m=") {
                m = x.parse::<usize>().ok();
            }
        }
        let (v, m) = match (v, m) {
            (Some(v), Some(m)) => (v, m),
            _ => return Err(Error::Data(format!("bad lexicon header: {header}"))),
        };
        let mut entries = Vec::with_capacity(v);
        for line in lines[1..].iter().filter(|l| !l.is_empty()) {
            let (entry, freq) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("bad lexicon line: {line}")))?;
            let freq: u64 = freq
                .parse()
                .map_err(|e| Error::Data(format!("bad lexicon frequency {freq:?}: {e}")))?;
            entries.push((entry.to_string(), freq));
        }
        if entries.len() != v {
            return Err(Error::Data(format!(
                "lexicon header promises {v} entries, found {}",
                entries.len()
            )));
        }
        Self::from_entries(entries, m)
    }
}

fn split_words(line: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in line.chars() {
        if is_separator_char(c) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}
