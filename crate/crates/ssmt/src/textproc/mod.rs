//! Corpus ingestion: character vocabulary, word-boundary spans, source-side
//! BPE and the target-side subword lexicon.
//!
//! Separators (whitespace and punctuation, by Unicode general category) are
//! always their own 1-character segments; they delimit the words inside which
//! subword segments may live.

mod bpe;
mod lexicon;

pub use bpe::{BpeModel, SrcVocab};
pub use lexicon::Lexicon;

use unicode_general_category::{get_general_category, GeneralCategory};

use crate::{Error, Result};

/// Index into a [`CharVocab`].
pub type CharId = usize;

pub const EOS_SUBWORD: CharId = 0;
pub const EOT: CharId = 1;
pub const PAD: CharId = 2;
pub const UNK: CharId = 3;
pub const NUM_SPECIALS: usize = 4;

/// Whitespace or punctuation, which always forms its own 1-char segment.
pub fn is_separator_char(c: char) -> bool {
    if c.is_whitespace() {
        return true;
    }
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Character vocabulary with reserved special indices `0..4`
/// (end-of-subword, end-of-translation, padding, unknown) followed by the
/// corpus characters in codepoint order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
}

impl CharVocab {
    /// Build from a corpus of text lines. Membership only: character
    /// frequencies do not affect the result.
    pub fn build(corpus: &[String]) -> Result<Self> {
        if corpus.is_empty() || corpus.iter().all(|l| l.is_empty()) {
            return Err(Error::EmptyInput(
                "cannot build a character vocabulary from an empty corpus".into(),
            ));
        }
        let mut chars: Vec<char> = corpus
            .iter()
            .flat_map(|line| line.chars())
            .collect::<std::collections::BTreeSet<char>>()
            .into_iter()
            .collect();
        chars.sort_unstable();
        Ok(Self { chars })
    }

    pub fn from_chars(mut chars: Vec<char>) -> Self {
        chars.sort_unstable();
        chars.dedup();
        Self { chars }
    }

    /// Total number of indices, specials included.
    pub fn len(&self) -> usize {
        NUM_SPECIALS + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id_of(&self, c: char) -> Option<CharId> {
        self.chars
            .binary_search(&c)
            .ok()
            .map(|i| NUM_SPECIALS + i)
    }

    pub fn char_of(&self, id: CharId) -> Option<char> {
        if id >= NUM_SPECIALS {
            self.chars.get(id - NUM_SPECIALS).copied()
        } else {
            None
        }
    }

    /// Encode a line; characters outside the vocabulary become [`UNK`].
    /// [`UNK`] is only ever consumed on input, never generated.
    pub fn encode(&self, line: &str) -> Vec<CharId> {
        line.chars().map(|c| self.id_of(c).unwrap_or(UNK)).collect()
    }

    /// Decode ids back to text. Specials other than [`EOT`] are dropped;
    /// [`EOT`] terminates the line.
    pub fn decode(&self, ids: &[CharId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == EOT {
                break;
            }
            if let Some(c) = self.char_of(id) {
                out.push(c);
            }
        }
        out
    }

    pub fn is_separator(&self, id: CharId) -> bool {
        if id == EOT {
            return true;
        }
        match self.char_of(id) {
            Some(c) => is_separator_char(c),
            None => false,
        }
    }

    /// Ids the generator may emit: real characters plus [`EOT`].
    pub fn emittable_ids(&self) -> Vec<CharId> {
        let mut ids = vec![EOT];
        ids.extend(NUM_SPECIALS..self.len());
        ids
    }

    pub fn to_lines(&self) -> Vec<String> {
        let mut lines = vec![format!("SSMT-CHARVOCAB v1 n={}", self.chars.len())];
        lines.extend(self.chars.iter().map(|c| format!("U+{:04X}", *c as u32)));
        lines
    }

    pub fn from_lines(lines: &[String]) -> Result<Self> {
        let header = lines
            .first()
            .ok_or_else(|| Error::Data("empty char vocab file".into()))?;
        if !header.starts_with("SSMT-CHARVOCAB v1") {
            return Err(Error::Data(format!("bad char vocab header: {header}")));
        }
        let chars = lines[1..]
            .iter()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let hex = l
                    .strip_prefix("U+")
                    .ok_or_else(|| Error::Data(format!("bad char vocab line: {l}")))?;
                let code = u32::from_str_radix(hex, 16)
                    .map_err(|e| Error::Data(format!("bad codepoint {l}: {e}")))?;
                char::from_u32(code)
                    .ok_or_else(|| Error::Data(format!("invalid codepoint {l}")))
            })
            .collect::<Result<Vec<char>>>()?;
        Ok(Self::from_chars(chars))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanKind {
    Word,
    Separator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
}

/// Contiguous, non-overlapping word/separator spans covering a character
/// sequence exactly. Every separator character is its own length-1 span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpanMap {
    spans: Vec<Span>,
    /// span index per character position
    owner: Vec<usize>,
}

impl WordSpanMap {
    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn span_of(&self, pos: usize) -> &Span {
        &self.spans[self.owner[pos]]
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn is_separator_pos(&self, pos: usize) -> bool {
        self.span_of(pos).kind == SpanKind::Separator
    }
}

/// Compute the word/separator span structure of a target sequence.
pub fn word_spans(y: &[CharId], vocab: &CharVocab) -> Result<WordSpanMap> {
    if y.is_empty() {
        return Err(Error::EmptyInput("word_spans on empty sequence".into()));
    }
    let mut spans = Vec::new();
    let mut owner = vec![0usize; y.len()];
    let mut i = 0;
    while i < y.len() {
        if vocab.is_separator(y[i]) {
            spans.push(Span {
                start: i,
                end: i + 1,
                kind: SpanKind::Separator,
            });
            owner[i] = spans.len() - 1;
            i += 1;
        } else {
            let start = i;
            while i < y.len() && !vocab.is_separator(y[i]) {
                i += 1;
            }
            spans.push(Span {
                start,
                end: i,
                kind: SpanKind::Word,
            });
            for pos in start..i {
                owner[pos] = spans.len() - 1;
            }
        }
    }
    Ok(WordSpanMap { spans, owner })
}

/// Starting index of the longest valid segment ending at character `k`:
/// `max(k - m + 1, start of the span containing k)`. Separator positions are
/// their own 1-character segments.
pub fn longest_segment_start(
    y_len: usize,
    k: usize,
    m: usize,
    spans: &WordSpanMap,
) -> Result<usize> {
    if k >= y_len {
        return Err(Error::InvalidArgument(format!(
            "position {k} out of range for sequence of length {y_len}"
        )));
    }
    let span = spans.span_of(k);
    if span.kind == SpanKind::Separator {
        return Ok(k);
    }
    Ok(span.start.max((k + 1).saturating_sub(m)))
}
