//! Corpus ingestion and the static word-level vocabulary.
//!
//! Text is whitespace-normalized on the way in (runs of whitespace collapse
//! to a single space), so a static encode followed by a decode reproduces
//! any in-vocabulary text exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Token id over the static vocabulary or the unified token/phrase space.
pub type TokenId = u32;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

const RESERVED: [&str; 4] = [UNK, BOS, EOS, PAD];
const VOCAB_MAGIC: &str = "dva-vocab v1";

/// Collapse whitespace runs and trim both ends.
pub fn normalize_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// The fixed token inventory `V`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticVocab {
    entries: Vec<String>,
    id_of: HashMap<String, TokenId>,
    unk_id: TokenId,
    bos_id: TokenId,
    eos_id: TokenId,
    pad_id: TokenId,
}

impl StaticVocab {
    /// Build a vocabulary from surfaces in id order. All four reserved
    /// surfaces must be present; surfaces must be unique and whitespace-free.
    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entries: Vec<String> = entries.into_iter().map(Into::into).collect();
        let mut id_of = HashMap::with_capacity(entries.len());
        for (i, surface) in entries.iter().enumerate() {
            if surface.is_empty() || surface.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary surface {surface:?} is empty or contains whitespace"
                )));
            }
            if id_of.insert(surface.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary surface {surface:?}"
                )));
            }
        }
        let lookup = |s: &str| {
            id_of
                .get(s)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("vocabulary lacks reserved {s}")))
        };
        let unk_id = lookup(UNK)?;
        let bos_id = lookup(BOS)?;
        let eos_id = lookup(EOS)?;
        let pad_id = lookup(PAD)?;
        Ok(Self {
            entries,
            id_of,
            unk_id,
            bos_id,
            eos_id,
            pad_id,
        })
    }

    /// Reserved ids first, then the most frequent whitespace-delimited
    /// words; ties keep first-occurrence order.
    pub fn train(corpus: &DocumentSet, target_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if target_size < RESERVED.len() {
            return Err(Error::InvalidArgument(format!(
                "target_size {target_size} leaves no room for {} reserved ids",
                RESERVED.len()
            )));
        }
        let mut counts: IndexMap<&str, usize> = IndexMap::new();
        for doc in corpus.documents() {
            for word in doc.text.split_whitespace() {
                if RESERVED.contains(&word) {
                    continue;
                }
                *counts.entry(word).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(usize, &str, usize)> = counts
            .iter()
            .enumerate()
            .map(|(first_seen, (w, c))| (first_seen, *w, *c))
            .collect();
        // stable: equal counts keep first-occurrence order
        ranked.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)));
        let keep = target_size - RESERVED.len();
        let entries = RESERVED
            .iter()
            .copied()
            .chain(ranked.into_iter().take(keep).map(|(_, w, _)| w));
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn unk_id(&self) -> TokenId {
        self.unk_id
    }

    pub fn bos_id(&self) -> TokenId {
        self.bos_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id == self.unk_id || id == self.bos_id || id == self.eos_id || id == self.pad_id
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.id_of.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    /// Whitespace-split words to ids; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(self.unk_id))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let surface = self.surface(id).ok_or(Error::IdOutOfRange {
                id,
                size: self.len(),
            })?;
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(surface);
        }
        Ok(out)
    }

    /// Stable content hash, used to tie checkpoints to their vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            hasher.update(e.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(&hasher.finalize()[..8])
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{VOCAB_MAGIC} {}", self.len());
        for e in &self.entries {
            out.push_str(e);
            out.push('\n');
        }
        out
    }

    pub fn parse_file_string(content: &str) -> Result<Self> {
        let mut lines = content.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty vocabulary file".into()))?;
        let size: usize = header
            .strip_prefix(VOCAB_MAGIC)
            .map(str::trim)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad vocabulary header {header:?}")))?;
        let entries: Vec<&str> = lines.collect();
        if entries.len() != size {
            return Err(Error::Format(format!(
                "vocabulary header declares {size} entries, found {}",
                entries.len()
            )));
        }
        Self::from_entries(entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_file_string(&content)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: usize,
    pub text: String,
}

/// Ordered, immutable document collection with dense ids from 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocumentSet {
    documents: Vec<Document>,
    source_path: String,
}

impl DocumentSet {
    /// Build from in-memory texts. Each text is whitespace-normalized;
    /// texts that normalize to nothing are dropped.
    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = DocumentSet::default();
        for t in texts {
            set.push(t.as_ref());
        }
        set
    }

    fn push(&mut self, text: &str) {
        let text = normalize_whitespace(text);
        if text.is_empty() {
            return;
        }
        let id = self.documents.len();
        self.documents.push(Document { id, text });
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn get(&self, id: usize) -> Option<&Document> {
        self.documents.get(id)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().map(|d| d.text.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    #[default]
    PlainLines,
    JsonLines,
}

/// Read a corpus file: one document per line, or one json record per line
/// with a required string field `"text"`. Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<DocumentSet> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut set = DocumentSet {
        documents: Vec::new(),
        source_path: path.display().to_string(),
    };
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match format {
            CorpusFormat::PlainLines => set.push(line),
            CorpusFormat::JsonLines => {
                let text = parse_json_record(line)
                    .map_err(|message| malformed(path, lineno + 1, message))?;
                set.push(&text);
            }
        }
    }
    Ok(set)
}

fn parse_json_record(line: &str) -> std::result::Result<String, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    match value.get("text") {
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(_) => Err("field \"text\" is not a string".into()),
        None => Err("missing field \"text\"".into()),
    }
}

fn malformed(path: &Path, line: usize, message: String) -> Error {
    Error::MalformedRecord {
        path: PathBuf::from(path),
        line,
        message,
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn toy_vocab() -> StaticVocab {
        StaticVocab::from_entries(["the", "cat", "sat", "on", "mat", UNK, BOS, EOS, PAD]).unwrap()
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn plain_lines_preserve_order() {
        let f = write_tmp("a b\nc  d\n\ne\n");
        let set = load_corpus(f.path(), CorpusFormat::PlainLines).unwrap();
        let ids: Vec<usize> = set.documents().iter().map(|d| d.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(set.get(1).unwrap().text, "c d");
    }

    #[test]
    fn json_lines_extracts_text() {
        let f = write_tmp("{\"text\":\"the cat\"}\n");
        let set = load_corpus(f.path(), CorpusFormat::JsonLines).unwrap();
        assert_eq!(set.get(0).unwrap().text, "the cat");
    }

    #[test]
    fn json_lines_missing_field_reports_line() {
        let f = write_tmp("{\"text\":\"ok\"}\n{\"body\":\"x\"}\n");
        match load_corpus(f.path(), CorpusFormat::JsonLines) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed record, got {other:?}"),
        }
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = load_corpus("/nonexistent/corpus.txt", CorpusFormat::PlainLines).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    // frequency oracle: count words by hand, rank by (count desc, first seen asc)
    fn oracle_ranking(texts: &[&str]) -> Vec<String> {
        let mut order: Vec<String> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for t in texts {
            for w in t.split_whitespace() {
                match order.iter().position(|o| o == w) {
                    Some(i) => counts[i] += 1,
                    None => {
                        order.push(w.to_string());
                        counts.push(1);
                    }
                }
            }
        }
        let mut idx: Vec<usize> = (0..order.len()).collect();
        idx.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        idx.into_iter().map(|i| order[i].clone()).collect()
    }

    #[test]
    fn train_single_sentence() {
        let corpus = DocumentSet::from_texts(["the cat sat on mat"]);
        let vocab = StaticVocab::train(&corpus, 9).unwrap();
        assert_eq!(vocab.len(), 9);
        assert_eq!(&vocab.entries()[..4], &[UNK, BOS, EOS, PAD]);
        assert_eq!(
            &vocab.entries()[4..],
            oracle_ranking(&["the cat sat on mat"]).as_slice()
        );
    }

    #[test]
    fn train_truncates_to_most_frequent() {
        let texts = ["a b c a", "b a d e", "e e e"];
        let corpus = DocumentSet::from_texts(texts);
        let vocab = StaticVocab::train(&corpus, 6).unwrap();
        let expected = oracle_ranking(&texts);
        assert_eq!(&vocab.entries()[4..], &expected[..2]);
        assert_eq!(&vocab.entries()[4..], &["e", "a"]);
    }

    #[test]
    fn train_rejects_bad_input() {
        assert!(matches!(
            StaticVocab::train(&DocumentSet::default(), 9),
            Err(Error::EmptyCorpus)
        ));
        let corpus = DocumentSet::from_texts(["x"]);
        assert!(StaticVocab::train(&corpus, 3).is_err());
    }

    #[test]
    fn encode_decode_toy() {
        let v = toy_vocab();
        assert_eq!(v.encode("the cat"), vec![0, 1]);
        assert_eq!(v.encode("dog"), vec![v.unk_id()]);
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[0, 1]).unwrap(), "the cat");
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert!(matches!(
            v.decode(&[v.len() as TokenId]),
            Err(Error::IdOutOfRange { .. })
        ));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = toy_vocab();
        let s = v.to_file_string();
        assert!(s.starts_with("dva-vocab v1 9\n"));
        assert_eq!(StaticVocab::parse_file_string(&s).unwrap(), v);
        assert!(StaticVocab::parse_file_string("dva-vocab v1 3\na\n").is_err());
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #[test]
            fn round_trip_in_vocab(words in prop::collection::vec(0usize..5, 0..20)) {
                let v = toy_vocab();
                let text = words.iter().map(|&i| v.entries()[i].as_str()).collect::<Vec<_>>().join(" ");
                prop_assert_eq!(v.decode(&v.encode(&text)).unwrap(), text);
            }

            #[test]
            fn training_is_deterministic_and_frequency_ordered(
                docs in prop::collection::vec(prop::collection::vec(0usize..12, 1..15), 1..6),
                size in 4usize..14,
            ) {
                let texts: Vec<String> = docs.iter()
                    .map(|d| d.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" "))
                    .collect();
                let corpus = DocumentSet::from_texts(&texts);
                let a = StaticVocab::train(&corpus, size).unwrap();
                let b = StaticVocab::train(&corpus, size).unwrap();
                prop_assert_eq!(&a, &b);
                let freq = |w: &str| texts.iter().flat_map(|t| t.split_whitespace()).filter(|x| *x == w).count();
                for pair in a.entries()[4..].windows(2) {
                    prop_assert!(freq(&pair[0]) >= freq(&pair[1]));
                }
                for (i, e) in a.entries().iter().enumerate() {
                    prop_assert_eq!(a.id(e), Some(i as TokenId));
                }
            }
        }
    }
}
