//! Phrase candidate extraction.
//!
//! Three built-in strategies sit behind [`PhraseSampler`]: random token
//! n-grams (`ntoken`), random word n-grams (`nword`), and forward maximum
//! matching against a reference corpus (`fmm`). Custom strategies register
//! by name in a [`SamplerRegistry`].

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use indexmap::IndexSet;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::{DocumentSet, StaticVocab, TokenId};

pub const NTOKEN: &str = "ntoken";
pub const NWORD: &str = "nword";
pub const FMM: &str = "fmm";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub strategy: String,
    /// Span length for `ntoken` and `nword`.
    pub n: usize,
    pub max_phrases: usize,
    pub min_phrase_tokens: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: NTOKEN.to_string(),
            n: 4,
            max_phrases: 16,
            min_phrase_tokens: 2,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::InvalidArgument("sampler n must be >= 1".into()));
        }
        if self.min_phrase_tokens < 2 {
            return Err(Error::InvalidArgument(
                "sampler min_phrase_tokens must be >= 2".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Exact membership over every contiguous token span of every corpus
/// sentence, stored as a generalized suffix automaton.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    states: Vec<SamState>,
    fingerprint: String,
}

#[derive(Debug, Clone, Default)]
struct SamState {
    len: usize,
    link: Option<usize>,
    next: HashMap<TokenId, usize>,
}

impl CorpusIndex {
    pub fn build(corpus: &DocumentSet, vocab: &StaticVocab) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let sentences: Vec<Vec<TokenId>> = corpus.texts().map(|t| vocab.encode(t)).collect();
        Ok(Self::from_token_sentences(&sentences))
    }

    pub fn from_token_sentences(sentences: &[Vec<TokenId>]) -> Self {
        let mut index = CorpusIndex {
            states: vec![SamState::default()],
            fingerprint: String::new(),
        };
        let mut hasher = Sha256::new();
        for sentence in sentences {
            let mut last = 0;
            for &tok in sentence {
                last = index.extend(last, tok);
                hasher.update(tok.to_le_bytes());
            }
            hasher.update(u32::MAX.to_le_bytes());
        }
        index.fingerprint = hex::encode(&hasher.finalize()[..8]);
        index
    }

    fn clone_state(&mut self, from: usize, len: usize) -> usize {
        let mut cloned = self.states[from].clone();
        cloned.len = len;
        self.states.push(cloned);
        self.states.len() - 1
    }

    fn redirect(&mut self, mut p: Option<usize>, tok: TokenId, from: usize, to: usize) {
        while let Some(s) = p {
            if self.states[s].next.get(&tok) != Some(&from) {
                break;
            }
            self.states[s].next.insert(tok, to);
            p = self.states[s].link;
        }
    }

    fn extend(&mut self, last: usize, tok: TokenId) -> usize {
        if let Some(&q) = self.states[last].next.get(&tok) {
            if self.states[last].len + 1 == self.states[q].len {
                return q;
            }
            let clone = self.clone_state(q, self.states[last].len + 1);
            self.states[q].link = Some(clone);
            self.redirect(Some(last), tok, q, clone);
            return clone;
        }
        let cur = self.states.len();
        self.states.push(SamState {
            len: self.states[last].len + 1,
            link: None,
            next: HashMap::new(),
        });
        let mut p = Some(last);
        while let Some(s) = p {
            if self.states[s].next.contains_key(&tok) {
                break;
            }
            self.states[s].next.insert(tok, cur);
            p = self.states[s].link;
        }
        match p {
            None => self.states[cur].link = Some(0),
            Some(s) => {
                let q = self.states[s].next[&tok];
                if self.states[s].len + 1 == self.states[q].len {
                    self.states[cur].link = Some(q);
                } else {
                    let clone = self.clone_state(q, self.states[s].len + 1);
                    self.redirect(Some(s), tok, q, clone);
                    self.states[q].link = Some(clone);
                    self.states[cur].link = Some(clone);
                }
            }
        }
        cur
    }

    /// True iff `span` occurs contiguously in at least one corpus sentence.
    pub fn contains(&self, span: &[TokenId]) -> bool {
        let mut state = 0;
        for tok in span {
            match self.states[state].next.get(tok) {
                Some(&s) => state = s,
                None => return false,
            }
        }
        true
    }

    /// Length of the longest prefix of `tokens` present in the corpus.
    pub fn longest_prefix_match(&self, tokens: &[TokenId]) -> usize {
        let mut state = 0;
        for (i, tok) in tokens.iter().enumerate() {
            match self.states[state].next.get(tok) {
                Some(&s) => state = s,
                None => return i,
            }
        }
        tokens.len()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

fn usable(vocab: &StaticVocab, id: TokenId) -> bool {
    !vocab.is_reserved(id)
}

/// Seeded draw of `max_phrases` window starts without replacement, returned
/// in ascending position order.
fn draw_positions(valid: &[usize], max_phrases: usize, seed: u64) -> Vec<usize> {
    if max_phrases == 0 || valid.is_empty() {
        return Vec::new();
    }
    let amount = max_phrases.min(valid.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, valid.len(), amount)
        .into_iter()
        .map(|i| valid[i])
        .collect();
    picked.sort_unstable();
    picked
}

fn dedup_capped(surfaces: impl IntoIterator<Item = String>, cap: usize) -> Vec<String> {
    let mut seen = IndexSet::new();
    for s in surfaces {
        if seen.len() >= cap {
            break;
        }
        seen.insert(s);
    }
    seen.into_iter().collect()
}

/// Random contiguous `n`-token windows. Windows touching reserved ids are
/// never drawn.
pub fn sample_ntoken(
    token_ids: &[TokenId],
    vocab: &StaticVocab,
    config: &SamplerConfig,
) -> Vec<String> {
    let n = config.n;
    if n < config.min_phrase_tokens || n > token_ids.len() {
        return Vec::new();
    }
    let valid: Vec<usize> = (0..=token_ids.len() - n)
        .filter(|&i| token_ids[i..i + n].iter().all(|&t| usable(vocab, t)))
        .collect();
    let surfaces = draw_positions(&valid, config.max_phrases, config.seed)
        .into_iter()
        .map(|i| {
            vocab
                .decode(&token_ids[i..i + n])
                .expect("ids come from the vocabulary")
        });
    dedup_capped(surfaces, config.max_phrases)
}

/// All word n-grams of `text` in order; the raw windows `sample_nword` draws from.
pub fn word_ngrams(text: &str, n: usize) -> Vec<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if n == 0 || n > words.len() {
        return Vec::new();
    }
    words.windows(n).map(|w| w.join(" ")).collect()
}

/// Random word n-grams. Each word is one static token, so `n` below
/// `min_phrase_tokens` yields nothing; windows with out-of-vocabulary words
/// are skipped because they cannot be represented exactly.
pub fn sample_nword(text: &str, vocab: &StaticVocab, config: &SamplerConfig) -> Vec<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let n = config.n;
    if n < config.min_phrase_tokens || n > words.len() {
        return Vec::new();
    }
    let valid: Vec<usize> = (0..=words.len() - n)
        .filter(|&i| {
            words[i..i + n]
                .iter()
                .all(|w| vocab.id(w).is_some_and(|id| usable(vocab, id)))
        })
        .collect();
    let surfaces = draw_positions(&valid, config.max_phrases, config.seed)
        .into_iter()
        .map(|i| words[i..i + n].join(" "));
    dedup_capped(surfaces, config.max_phrases)
}

/// Forward maximum matching against `index`. At each position the longest
/// corpus-attested span is taken; spans shorter than `min_phrase_tokens`
/// advance by one token without emitting. Matches never cross reserved ids.
pub fn sample_fmm(
    text: &str,
    index: &CorpusIndex,
    vocab: &StaticVocab,
    config: &SamplerConfig,
) -> Vec<String> {
    let ids = vocab.encode(text);
    let spans = fmm_spans(&ids, index, vocab, config.min_phrase_tokens);
    let surfaces = spans.into_iter().map(|(i, m)| {
        vocab
            .decode(&ids[i..i + m])
            .expect("ids come from the vocabulary")
    });
    dedup_capped(surfaces, config.max_phrases)
}

/// `(start, length)` of each emitted FMM phrase, in scan order.
pub fn fmm_spans(
    ids: &[TokenId],
    index: &CorpusIndex,
    vocab: &StaticVocab,
    min_phrase_tokens: usize,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < ids.len() {
        let end = ids[i..]
            .iter()
            .position(|&t| !usable(vocab, t))
            .map_or(ids.len(), |p| i + p);
        let m = index.longest_prefix_match(&ids[i..end]);
        if m >= min_phrase_tokens.max(1) {
            out.push((i, m));
            i += m;
        } else {
            i += 1;
        }
    }
    out
}

/// The pluggable `P <- S(D, config)` interface, applied to one document.
pub trait PhraseSampler: Send + Sync {
    fn name(&self) -> &str;

    fn sample(&self, document: &str, config: &SamplerConfig) -> Vec<String>;
}

/// Apply a sampler across documents: per-document seeds derive from
/// `config.seed` and the document's position, results are deduplicated in
/// order and capped at `cap`.
pub fn sample_documents(
    sampler: &dyn PhraseSampler,
    documents: &[&str],
    config: &SamplerConfig,
    cap: usize,
) -> Vec<String> {
    let all = documents.iter().enumerate().flat_map(|(i, doc)| {
        let cfg = config.with_seed(mix_seed(config.seed, i as u64));
        sampler.sample(doc, &cfg)
    });
    dedup_capped(all, cap)
}

/// SplitMix64-style seed mixing.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct NTokenSampler {
    vocab: Arc<StaticVocab>,
}

impl NTokenSampler {
    pub fn new(vocab: Arc<StaticVocab>) -> Self {
        Self { vocab }
    }
}

impl PhraseSampler for NTokenSampler {
    fn name(&self) -> &str {
        NTOKEN
    }

    fn sample(&self, document: &str, config: &SamplerConfig) -> Vec<String> {
        sample_ntoken(&self.vocab.encode(document), &self.vocab, config)
    }
}

pub struct NWordSampler {
    vocab: Arc<StaticVocab>,
}

impl NWordSampler {
    pub fn new(vocab: Arc<StaticVocab>) -> Self {
        Self { vocab }
    }
}

impl PhraseSampler for NWordSampler {
    fn name(&self) -> &str {
        NWORD
    }

    fn sample(&self, document: &str, config: &SamplerConfig) -> Vec<String> {
        sample_nword(document, &self.vocab, config)
    }
}

pub struct FmmSampler {
    vocab: Arc<StaticVocab>,
    index: Arc<CorpusIndex>,
}

impl FmmSampler {
    pub fn new(vocab: Arc<StaticVocab>, index: Arc<CorpusIndex>) -> Self {
        Self { vocab, index }
    }
}

impl PhraseSampler for FmmSampler {
    fn name(&self) -> &str {
        FMM
    }

    fn sample(&self, document: &str, config: &SamplerConfig) -> Vec<String> {
        sample_fmm(document, &self.index, &self.vocab, config)
    }
}

/// What a sampler factory may draw on.
#[derive(Clone)]
pub struct SamplerContext {
    pub vocab: Arc<StaticVocab>,
    pub corpus_index: Option<Arc<CorpusIndex>>,
}

type SamplerFactory = Box<dyn Fn(&SamplerContext) -> Result<Arc<dyn PhraseSampler>> + Send + Sync>;

/// Strategy name to sampler constructor.
pub struct SamplerRegistry {
    factories: HashMap<String, SamplerFactory>,
}

impl Default for SamplerRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl SamplerRegistry {
    pub fn empty() -> Self {
        Self {
            factories: HashMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register(NTOKEN, |ctx| {
            Ok(Arc::new(NTokenSampler::new(ctx.vocab.clone())))
        });
        reg.register(NWORD, |ctx| {
            Ok(Arc::new(NWordSampler::new(ctx.vocab.clone())))
        });
        reg.register(FMM, |ctx| {
            let index = ctx.corpus_index.clone().ok_or_else(|| {
                Error::InvalidArgument("fmm sampler needs a reference corpus index".into())
            })?;
            Ok(Arc::new(FmmSampler::new(ctx.vocab.clone(), index)))
        });
        reg
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&SamplerContext) -> Result<Arc<dyn PhraseSampler>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.factories.keys().map(String::as_str).collect();
        names.sort_unstable();
        names
    }

    pub fn build(
        &self,
        config: &SamplerConfig,
        ctx: &SamplerContext,
    ) -> Result<Arc<dyn PhraseSampler>> {
        config.validate()?;
        let factory = self
            .factories
            .get(&config.strategy)
            .ok_or_else(|| Error::UnknownSampler(config.strategy.clone()))?;
        factory(ctx)
    }
}

/// Set of distinct token spans, convenient for tests and small corpora.
pub fn all_spans(sentences: &[Vec<TokenId>]) -> HashSet<Vec<TokenId>> {
    let mut out = HashSet::new();
    for s in sentences {
        for i in 0..s.len() {
            for j in i + 1..=s.len() {
                out.insert(s[i..j].to_vec());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::text::{BOS, EOS, PAD, UNK};

    fn letters_vocab() -> StaticVocab {
        StaticVocab::from_entries(["a", "b", "c", "d", "e", "f", UNK, BOS, EOS, PAD]).unwrap()
    }

    fn cfg(strategy: &str, n: usize, max_phrases: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            strategy: strategy.into(),
            n,
            max_phrases,
            min_phrase_tokens: 2,
            seed,
        }
    }

    // brute force: does span occur contiguously in any sentence (linear scan)
    fn occurs(sentences: &[Vec<TokenId>], span: &[TokenId]) -> bool {
        span.is_empty()
            || sentences
                .iter()
                .any(|s| s.len() >= span.len() && s.windows(span.len()).any(|w| w == span))
    }

    #[test]
    fn index_membership_simple() {
        let v = letters_vocab();
        let idx = CorpusIndex::build(&DocumentSet::from_texts(["a b"]), &v).unwrap();
        assert!(idx.contains(&v.encode("a b")));
        assert!(!idx.contains(&v.encode("b a")));
        assert!(CorpusIndex::build(&DocumentSet::default(), &v).is_err());
    }

    #[test]
    fn duplicate_sentences_do_not_change_membership() {
        let v = letters_vocab();
        let once = CorpusIndex::build(&DocumentSet::from_texts(["a b c", "c d"]), &v).unwrap();
        let twice = CorpusIndex::build(
            &DocumentSet::from_texts(["a b c", "c d", "a b c", "c d"]),
            &v,
        )
        .unwrap();
        for span in all_spans(&[vec![0, 1, 2, 3, 4], vec![3, 2, 1, 0]]) {
            assert_eq!(once.contains(&span), twice.contains(&span));
        }
    }

    #[test]
    fn ntoken_draws_bigrams() {
        let v = letters_vocab();
        let bigrams: HashSet<String> = word_ngrams("a b c d e", 2).into_iter().collect();
        assert_eq!(bigrams.len(), 4);
        let got = sample_ntoken(&[0, 1, 2, 3, 4], &v, &cfg(NTOKEN, 2, 2, 7));
        assert_eq!(got.len(), 2);
        assert!(got.iter().all(|p| bigrams.contains(p)));
        assert_ne!(got[0], got[1]);
        assert!(sample_ntoken(&[0, 1, 2, 3, 4], &v, &cfg(NTOKEN, 6, 2, 7)).is_empty());
        assert!(sample_ntoken(&[0, 1, 2, 3, 4], &v, &cfg(NTOKEN, 2, 0, 7)).is_empty());
    }

    #[test]
    fn ntoken_skips_reserved_windows() {
        let v = letters_vocab();
        let unk = v.unk_id();
        let got = sample_ntoken(&[0, unk, 1, 2], &v, &cfg(NTOKEN, 2, 10, 1));
        assert_eq!(got, vec!["b c".to_string()]);
    }

    #[test]
    fn nword_bigrams_and_edge_cases() {
        let v = StaticVocab::from_entries(["the", "cat", "sat", UNK, BOS, EOS, PAD]).unwrap();
        let allowed: HashSet<String> = ["the cat", "cat sat"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let got = sample_nword("the cat sat", &v, &cfg(NWORD, 2, 10, 3));
        assert!(!got.is_empty());
        assert!(got.iter().all(|p| allowed.contains(p)));
        assert!(sample_nword("", &v, &cfg(NWORD, 2, 10, 3)).is_empty());
        // unigrams are plain tokens, never phrases
        assert_eq!(word_ngrams("the cat sat", 1), vec!["the", "cat", "sat"]);
        assert!(sample_nword("the cat sat", &v, &cfg(NWORD, 1, 10, 3)).is_empty());
    }

    #[test]
    fn fmm_worked_example() {
        let v = letters_vocab();
        let idx = CorpusIndex::build(&DocumentSet::from_texts(["a b c", "b c d"]), &v).unwrap();
        let got = sample_fmm("a b c d", &idx, &v, &cfg(FMM, 1, 10, 0));
        assert_eq!(got, vec!["a b c".to_string()]);
        assert_eq!(fmm_spans(&v.encode("a b c d"), &idx, &v, 2), vec![(0, 3)]);
    }

    #[test]
    fn fmm_whole_sentence_and_no_match() {
        let v = letters_vocab();
        let idx = CorpusIndex::build(&DocumentSet::from_texts(["a b c d e", "f"]), &v).unwrap();
        assert_eq!(
            sample_fmm("a b c d e", &idx, &v, &cfg(FMM, 1, 10, 0)),
            vec!["a b c d e"]
        );
        assert!(sample_fmm("x y z", &idx, &v, &cfg(FMM, 1, 10, 0)).is_empty());
        assert!(sample_fmm("f f f", &idx, &v, &cfg(FMM, 1, 10, 0)).is_empty());
    }

    #[test]
    fn registry_builds_by_name() {
        let v = Arc::new(letters_vocab());
        let reg = SamplerRegistry::with_builtins();
        let ctx = SamplerContext {
            vocab: v.clone(),
            corpus_index: None,
        };
        assert_eq!(
            reg.build(&cfg(NTOKEN, 2, 4, 0), &ctx).unwrap().name(),
            NTOKEN
        );
        assert!(reg.build(&cfg(FMM, 2, 4, 0), &ctx).is_err());
        assert!(matches!(
            reg.build(&cfg("bogus", 2, 4, 0), &ctx),
            Err(Error::UnknownSampler(_))
        ));
        assert_eq!(reg.names(), vec![FMM, NTOKEN, NWORD]);
    }

    #[test]
    fn sample_documents_dedups_across_docs() {
        let v = Arc::new(letters_vocab());
        let s = NTokenSampler::new(v);
        let got = sample_documents(&s, &["a b", "a b"], &cfg(NTOKEN, 2, 5, 0), 10);
        assert_eq!(got, vec!["a b".to_string()]);
    }

    fn sentence_strategy() -> impl Strategy<Value = Vec<TokenId>> {
        prop::collection::vec(0u32..4, 0..12)
    }

    proptest! {
        #[test]
        fn index_matches_linear_scan(
            sentences in prop::collection::vec(sentence_strategy(), 1..6),
            query in sentence_strategy(),
        ) {
            let idx = CorpusIndex::from_token_sentences(&sentences);
            for i in 0..query.len() {
                for j in i..=query.len() {
                    prop_assert_eq!(idx.contains(&query[i..j]), occurs(&sentences, &query[i..j]));
                }
            }
        }

        #[test]
        fn fmm_is_greedy_and_in_corpus(
            sentences in prop::collection::vec(sentence_strategy(), 1..6),
            query in sentence_strategy(),
        ) {
            let v = letters_vocab();
            let idx = CorpusIndex::from_token_sentences(&sentences);
            for (i, m) in fmm_spans(&query, &idx, &v, 2) {
                prop_assert!(m >= 2);
                prop_assert!(occurs(&sentences, &query[i..i + m]));
                prop_assert!(i + m == query.len() || !occurs(&sentences, &query[i..i + m + 1]));
            }
        }

        #[test]
        fn samplers_are_seeded_capped_and_verbatim(
            words in prop::collection::vec(0usize..6, 0..30),
            n in 1usize..5,
            max_phrases in 0usize..6,
            seed in any::<u64>(),
        ) {
            let v = letters_vocab();
            let text = words.iter().map(|&w| v.entries()[w].as_str()).collect::<Vec<_>>().join(" ");
            let padded = format!(" {text} ");
            for strategy in [NTOKEN, NWORD] {
                let c = cfg(strategy, n, max_phrases, seed);
                let run = || match strategy {
                    NTOKEN => sample_ntoken(&v.encode(&text), &v, &c),
                    _ => sample_nword(&text, &v, &c),
                };
                let a = run();
                prop_assert_eq!(&a, &run());
                prop_assert!(a.len() <= max_phrases);
                for p in &a {
                    let needle = format!(" {} ", p);
                    prop_assert!(padded.contains(&needle));
                    prop_assert!(p.split_whitespace().count() >= 2);
                }
            }
        }
    }
}
