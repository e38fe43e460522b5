//! Tokenize / encode / decode over the unified id space `V ∪ P`.
//!
//! Ids below `|V|` are static tokens; id `|V| + j` is phrase `j` of the
//! active [`PhraseTable`]. Segmentation is greedy left-to-right
//! longest-match at token boundaries.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{normalize_whitespace, StaticVocab, TokenId};

pub const DEFAULT_MIN_PHRASE_TOKENS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    pub surface: String,
    pub subword_ids: Vec<TokenId>,
}

impl Phrase {
    pub fn len(&self) -> usize {
        self.subword_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subword_ids.is_empty()
    }
}

/// The dynamic vocabulary `P` attached to a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseTable {
    phrases: Vec<Phrase>,
    offset: usize,
    by_ids: HashMap<Vec<TokenId>, usize>,
    max_len: usize,
}

impl PhraseTable {
    pub fn empty(vocab: &StaticVocab) -> Self {
        Self {
            phrases: Vec::new(),
            offset: vocab.len(),
            by_ids: HashMap::new(),
            max_len: 0,
        }
    }

    /// Build a table from surfaces, deduplicating by surface (first wins).
    /// Every surface must consist of at least `min_tokens` in-vocabulary,
    /// non-reserved words.
    pub fn new<I, S>(vocab: &StaticVocab, surfaces: I, min_tokens: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut table = Self::empty(vocab);
        for s in surfaces {
            table.push(vocab, s.as_ref(), min_tokens)?;
        }
        Ok(table)
    }

    /// Like [`PhraseTable::new`] but silently drops unrepresentable surfaces.
    pub fn from_candidates<I, S>(vocab: &StaticVocab, surfaces: I, min_tokens: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut table = Self::empty(vocab);
        for s in surfaces {
            let _ = table.push(vocab, s.as_ref(), min_tokens);
        }
        table
    }

    /// Insert a surface, returning its phrase index (existing index for duplicates).
    pub fn push(&mut self, vocab: &StaticVocab, surface: &str, min_tokens: usize) -> Result<usize> {
        let phrase = make_phrase(vocab, surface, min_tokens)?;
        if let Some(&j) = self.by_ids.get(&phrase.subword_ids) {
            return Ok(j);
        }
        let j = self.phrases.len();
        self.max_len = self.max_len.max(phrase.len());
        self.by_ids.insert(phrase.subword_ids.clone(), j);
        self.phrases.push(phrase);
        Ok(j)
    }

    pub fn phrases(&self) -> &[Phrase] {
        &self.phrases
    }

    pub fn phrase(&self, j: usize) -> Option<&Phrase> {
        self.phrases.get(j)
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    /// Number of phrases `m`.
    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// `|V| + m`.
    pub fn total_size(&self) -> usize {
        self.offset + self.phrases.len()
    }

    pub fn global_id(&self, j: usize) -> TokenId {
        (self.offset + j) as TokenId
    }

    pub fn kind_of(&self, id: TokenId) -> SegmentKind {
        if (id as usize) < self.offset {
            SegmentKind::Token
        } else {
            SegmentKind::Phrase
        }
    }

    pub fn index_of_surface(&self, surface: &str) -> Option<usize> {
        self.phrases.iter().position(|p| p.surface == surface)
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.phrases.iter().map(|p| p.surface.as_str())
    }

    /// Longest phrase matching at the start of `ids`, as `(index, length)`.
    fn longest_match(&self, ids: &[TokenId]) -> Option<(usize, usize)> {
        let upper = self.max_len.min(ids.len());
        (1..=upper)
            .rev()
            .find_map(|len| self.by_ids.get(&ids[..len]).map(|&j| (j, len)))
    }
}

fn make_phrase(vocab: &StaticVocab, surface: &str, min_tokens: usize) -> Result<Phrase> {
    let surface = normalize_whitespace(surface);
    let invalid = |reason: &str| Error::InvalidPhrase {
        surface: surface.clone(),
        reason: reason.to_string(),
    };
    let mut ids = Vec::new();
    for w in surface.split_whitespace() {
        match vocab.id(w) {
            Some(id) if !vocab.is_reserved(id) => ids.push(id),
            Some(_) => return Err(invalid("contains a reserved token")),
            None => return Err(invalid("contains an out-of-vocabulary word")),
        }
    }
    if ids.len() < min_tokens.max(1) {
        return Err(invalid(&format!("fewer than {} tokens", min_tokens.max(1))));
    }
    Ok(Phrase {
        surface,
        subword_ids: ids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Token,
    Phrase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub kind: SegmentKind,
    pub id: TokenId,
    /// Byte range in the source text.
    pub span: Range<usize>,
}

/// Ids over `V ∪ P` plus the source range each id covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MixedSequence {
    pub ids: Vec<TokenId>,
    pub spans: Vec<Range<usize>>,
}

impl MixedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Debug serialization: `{"ids":[...], "segments":[{"text":..., "kind":...}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationRecord {
    pub ids: Vec<TokenId>,
    pub segments: Vec<SegmentRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub text: String,
    pub kind: SegmentKind,
}

/// Mixed tokenizer bound to one static vocabulary and one phrase table.
#[derive(Debug, Clone, Copy)]
pub struct DvaTokenizer<'a> {
    vocab: &'a StaticVocab,
    table: &'a PhraseTable,
}

impl<'a> DvaTokenizer<'a> {
    pub fn new(vocab: &'a StaticVocab, table: &'a PhraseTable) -> Result<Self> {
        if table.offset() != vocab.len() {
            return Err(Error::ShapeMismatch(format!(
                "phrase table offset {} != vocabulary size {}",
                table.offset(),
                vocab.len()
            )));
        }
        Ok(Self { vocab, table })
    }

    pub fn vocab(&self) -> &'a StaticVocab {
        self.vocab
    }

    pub fn table(&self) -> &'a PhraseTable {
        self.table
    }

    /// Split `text` into phrase and token segments.
    pub fn tokenize(&self, text: &str) -> Vec<Segment> {
        let words: Vec<(usize, &str)> = word_offsets(text);
        let ids: Vec<TokenId> = words
            .iter()
            .map(|(_, w)| self.vocab.id(w).unwrap_or(self.vocab.unk_id()))
            .collect();
        let mut out = Vec::with_capacity(words.len());
        let mut i = 0;
        while i < ids.len() {
            let (id, kind, len) = match self.table.longest_match(&ids[i..]) {
                Some((j, len)) => (self.table.global_id(j), SegmentKind::Phrase, len),
                None => (ids[i], SegmentKind::Token, 1),
            };
            let start = words[i].0;
            let (last_start, last_word) = words[i + len - 1];
            let end = last_start + last_word.len();
            out.push(Segment {
                text: text[start..end].to_string(),
                kind,
                id,
                span: start..end,
            });
            i += len;
        }
        out
    }

    pub fn encode(&self, text: &str) -> MixedSequence {
        let segments = self.tokenize(text);
        MixedSequence {
            ids: segments.iter().map(|s| s.id).collect(),
            spans: segments.into_iter().map(|s| s.span).collect(),
        }
    }

    pub fn surface(&self, id: TokenId) -> Result<&'a str> {
        let idx = id as usize;
        if idx < self.vocab.len() {
            return Ok(self.vocab.surface(id).expect("bounds checked"));
        }
        self.table
            .phrase(idx - self.table.offset())
            .map(|p| p.surface.as_str())
            .ok_or(Error::IdOutOfRange {
                id,
                size: self.table.total_size(),
            })
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        Ok(self
            .decode_segments(ids)?
            .into_iter()
            .map(|s| s.text)
            .collect::<Vec<_>>()
            .join(" "))
    }

    /// Decode into segments with spans over the decoded string.
    pub fn decode_segments(&self, ids: &[TokenId]) -> Result<Vec<Segment>> {
        let mut out = Vec::with_capacity(ids.len());
        let mut pos = 0;
        for &id in ids {
            let text = self.surface(id)?.to_string();
            if !out.is_empty() {
                pos += 1;
            }
            let span = pos..pos + text.len();
            pos = span.end;
            out.push(Segment {
                text,
                kind: self.table.kind_of(id),
                id,
                span,
            });
        }
        Ok(out)
    }

    pub fn record(&self, text: &str) -> SegmentationRecord {
        let segments = self.tokenize(text);
        SegmentationRecord {
            ids: segments.iter().map(|s| s.id).collect(),
            segments: segments
                .into_iter()
                .map(|s| SegmentRecord {
                    text: s.text,
                    kind: s.kind,
                })
                .collect(),
        }
    }
}

fn word_offsets(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, &text[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &text[s..]));
    }
    out
}
