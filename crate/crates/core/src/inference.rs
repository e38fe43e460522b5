//! Generation: per-prefix candidate construction, a batch phrase table with
//! per-sample masks, and lockstep decoding over left-padded prefixes.
//!
//! Each sample's output is expressed against its own phrase table (its
//! candidates in sampling order), so a sample's ids do not depend on what
//! else shares the batch.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{BatchInput, DvaModel};
use crate::retriever::Retriever;
use crate::sampler::{sample_documents, PhraseSampler, SamplerConfig};
use crate::text::{normalize_whitespace, StaticVocab, TokenId};
use crate::tokenizer::{DvaTokenizer, PhraseTable, SegmentKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub strategy: Strategy,
    pub temperature: f64,
    /// Restrict sampling to the `top_k` most likely ids; 0 disables.
    pub top_k: usize,
    pub min_new_ids: usize,
    pub max_new_ids: usize,
    pub seed: u64,
    /// Documents retrieved per prefix; 0 disables retrieval.
    pub k_docs: usize,
    pub candidate_cap: usize,
    /// Candidates retained per step for inspection.
    pub keep_top: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            temperature: 1.0,
            top_k: 0,
            min_new_ids: 1,
            max_new_ids: 32,
            seed: 0,
            k_docs: 4,
            candidate_cap: 32,
            keep_top: 50,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.min_new_ids > self.max_new_ids {
            return Err(Error::InvalidArgument(format!(
                "min_new_ids {} exceeds max_new_ids {}",
                self.min_new_ids, self.max_new_ids
            )));
        }
        if self.keep_top == 0 {
            return Err(Error::InvalidArgument("keep_top must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which phrases of the batch table one sample may emit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateMask {
    pub allowed: Vec<bool>,
}

impl CandidateMask {
    pub fn all(m: usize, value: bool) -> Self {
        Self {
            allowed: vec![value; m],
        }
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }
}

/// Set the logits of phrases outside `mask` to negative infinity. Token
/// logits and allowed phrase logits are untouched.
pub fn process_logits(logits: &mut [f64], vocab_size: usize, mask: &CandidateMask) -> Result<()> {
    if logits.len() != vocab_size + mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {} tokens and {} phrases",
            logits.len(),
            vocab_size,
            mask.len()
        )));
    }
    for (l, &ok) in logits[vocab_size..].iter_mut().zip(&mask.allowed) {
        if !ok {
            *l = f64::NEG_INFINITY;
        }
    }
    Ok(())
}

/// Phrases sampled from each retrieved document, deduplicated, filtered to
/// valid surfaces and truncated to `cap` in sampling order.
pub fn build_phrase_candidates(
    docs: &[&str],
    sampler: &dyn PhraseSampler,
    config: &SamplerConfig,
    vocab: &StaticVocab,
    cap: usize,
) -> Vec<String> {
    let sampled = sample_documents(sampler, docs, config, usize::MAX);
    let table = PhraseTable::from_candidates(vocab, sampled, config.min_phrase_tokens);
    table.surfaces().take(cap).map(str::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: TokenId,
    pub probability: f64,
}

/// One decoding step: the chosen id and the retained distribution head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenStep {
    pub chosen: TokenId,
    pub probability: f64,
    /// Probability-descending, ties by id; always contains `chosen`.
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSegment {
    pub text: String,
    pub kind: SegmentKind,
    pub probability: f64,
}

/// A finished generation for one prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSession {
    pub prefix: String,
    /// Static ids of the prefix (no BOS).
    pub prefix_ids: Vec<TokenId>,
    /// Phrase table snapshot; phrase `j` has id `vocab_size + j`.
    pub phrases: Vec<String>,
    pub vocab_size: usize,
    /// Emitted ids, one per step.
    pub ids: Vec<TokenId>,
    pub steps: Vec<GenStep>,
    pub segments: Vec<SessionSegment>,
    pub text: String,
    pub config: GenerationConfig,
}

impl GenerationSession {
    pub fn table(&self, vocab: &StaticVocab) -> Result<PhraseTable> {
        PhraseTable::new(vocab, self.phrases.iter().map(String::as_str), 1)
    }
}

/// Wall-clock per pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub retrieval: Duration,
    pub sampling: Duration,
    pub generation: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.retrieval + self.sampling + self.generation
    }

    pub fn add(&mut self, other: &StageTimings) {
        self.retrieval += other.retrieval;
        self.sampling += other.sampling;
        self.generation += other.generation;
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub sessions: Vec<GenerationSession>,
    pub timings: StageTimings,
}

/// A decoding job: a static prefix, generated ids to continue from, and the
/// sample's own phrase table.
#[derive(Debug, Clone)]
pub struct DecodeRequest {
    pub prefix: String,
    pub prefix_ids: Vec<TokenId>,
    pub table: PhraseTable,
    /// Already-emitted ids (local to `table`) and their steps.
    pub forced: Vec<TokenId>,
    pub forced_steps: Vec<GenStep>,
}

/// Shared read-only components for generation.
#[derive(Clone)]
pub struct Generator {
    model: Arc<DvaModel>,
    vocab: Arc<StaticVocab>,
    retriever: Option<Arc<Retriever>>,
    sampler: Arc<dyn PhraseSampler>,
    sampler_config: SamplerConfig,
}

impl Generator {
    pub fn new(
        model: Arc<DvaModel>,
        vocab: Arc<StaticVocab>,
        retriever: Option<Arc<Retriever>>,
        sampler: Arc<dyn PhraseSampler>,
        sampler_config: SamplerConfig,
    ) -> Result<Self> {
        if model.vocab_size() != vocab.len() {
            return Err(Error::InvalidArgument(format!(
                "model vocabulary size {} differs from vocabulary {}",
                model.vocab_size(),
                vocab.len()
            )));
        }
        sampler_config.validate()?;
        Ok(Self {
            model,
            vocab,
            retriever,
            sampler,
            sampler_config,
        })
    }

    pub fn model(&self) -> &Arc<DvaModel> {
        &self.model
    }

    pub fn vocab(&self) -> &Arc<StaticVocab> {
        &self.vocab
    }

    pub fn retriever(&self) -> Option<&Arc<Retriever>> {
        self.retriever.as_ref()
    }

    fn prefix_ids(&self, prefix: &str) -> Result<(String, Vec<TokenId>)> {
        let norm = normalize_whitespace(prefix);
        if norm.is_empty() {
            return Err(Error::InvalidArgument("prefix must not be empty".into()));
        }
        let ids = self.vocab.encode(&norm);
        Ok((norm, ids))
    }

    /// Retrieval and phrase sampling for one prefix, each timed.
    pub fn candidates_for(
        &self,
        prefix: &str,
        config: &GenerationConfig,
    ) -> Result<(Vec<String>, StageTimings)> {
        let mut t = StageTimings::default();
        let Some(retriever) = self.retriever.as_ref().filter(|_| config.k_docs > 0) else {
            return Ok((Vec::new(), t));
        };
        let start = Instant::now();
        let docs = retriever.retrieve_documents(prefix, config.k_docs)?;
        t.retrieval = start.elapsed();
        let start = Instant::now();
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let surfaces = build_phrase_candidates(
            &texts,
            self.sampler.as_ref(),
            &self.sampler_config,
            &self.vocab,
            config.candidate_cap,
        );
        t.sampling = start.elapsed();
        Ok((surfaces, t))
    }

    /// Retrieve, sample candidates and decode every prefix in one batch.
    /// Retrieval runs sequentially per sample.
    pub fn generate_batch(
        &self,
        prefixes: &[&str],
        config: &GenerationConfig,
    ) -> Result<BatchOutput> {
        config.validate()?;
        if prefixes.is_empty() {
            return Err(Error::InvalidArgument("no prefixes given".into()));
        }
        let mut timings = StageTimings::default();
        let mut requests = Vec::with_capacity(prefixes.len());
        for p in prefixes {
            let (norm, ids) = self.prefix_ids(p)?;
            let (surfaces, t) = self.candidates_for(&norm, config)?;
            timings.add(&t);
            requests.push(DecodeRequest {
                prefix: norm,
                prefix_ids: ids,
                table: PhraseTable::from_candidates(&self.vocab, surfaces, 1),
                forced: Vec::new(),
                forced_steps: Vec::new(),
            });
        }
        let start = Instant::now();
        let sessions = self.decode(requests, config)?;
        timings.generation = start.elapsed();
        Ok(BatchOutput { sessions, timings })
    }

    /// Single-prefix generation. Explicit phrases, when given, replace the
    /// retrieved candidates.
    pub fn generate_single(
        &self,
        prefix: &str,
        explicit_phrases: Option<&[String]>,
        config: &GenerationConfig,
    ) -> Result<GenerationSession> {
        config.validate()?;
        match explicit_phrases {
            None => Ok(self.generate_batch(&[prefix], config)?.sessions.remove(0)),
            Some(phrases) => {
                let (norm, ids) = self.prefix_ids(prefix)?;
                let table = PhraseTable::new(
                    &self.vocab,
                    phrases.iter().map(String::as_str),
                    self.sampler_config.min_phrase_tokens,
                )?;
                let req = DecodeRequest {
                    prefix: norm,
                    prefix_ids: ids,
                    table,
                    forced: Vec::new(),
                    forced_steps: Vec::new(),
                };
                Ok(self.decode(vec![req], config)?.remove(0))
            }
        }
    }

    /// Replace the id at `position` of `session` with `replacement` (which
    /// must be among the stored candidates there) and regenerate the rest.
    pub fn steer(
        &self,
        session: &GenerationSession,
        position: usize,
        replacement: TokenId,
    ) -> Result<GenerationSession> {
        let step = session.steps.get(position).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "position {position} out of range for {} steps",
                session.steps.len()
            ))
        })?;
        let cand = step
            .candidates
            .iter()
            .find(|c| c.id == replacement)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "id {replacement} is not a stored candidate at position {position}"
                ))
            })?;
        let mut forced = session.ids[..position].to_vec();
        forced.push(replacement);
        let mut forced_steps = session.steps[..position].to_vec();
        forced_steps.push(GenStep {
            chosen: replacement,
            probability: cand.probability,
            candidates: step.candidates.clone(),
        });
        let req = DecodeRequest {
            prefix: session.prefix.clone(),
            prefix_ids: session.prefix_ids.clone(),
            table: session.table(&self.vocab)?,
            forced,
            forced_steps,
        };
        Ok(self.decode(vec![req], &session.config)?.remove(0))
    }

    /// Decode all requests in lockstep over the union of their tables.
    pub fn decode(
        &self,
        requests: Vec<DecodeRequest>,
        config: &GenerationConfig,
    ) -> Result<Vec<GenerationSession>> {
        config.validate()?;
        let v = self.vocab.len();
        let mut union = PhraseTable::empty(&self.vocab);
        let mut to_union: Vec<Vec<usize>> = Vec::with_capacity(requests.len());
        for req in &requests {
            if req.table.offset() != v {
                return Err(Error::ShapeMismatch(
                    "phrase table built for another vocabulary".into(),
                ));
            }
            let map = req
                .table
                .phrases()
                .iter()
                .map(|p| match union.index_of_surface(&p.surface) {
                    Some(u) => Ok(u),
                    None => union.push(&self.vocab, &p.surface, 1),
                })
                .collect::<Result<Vec<_>>>()?;
            to_union.push(map);
        }
        let m = union.len();
        let masks: Vec<CandidateMask> = to_union
            .iter()
            .map(|map| {
                let mut mask = CandidateMask::all(m, false);
                map.iter().for_each(|&u| mask.allowed[u] = true);
                mask
            })
            .collect();
        let mut to_local: Vec<Vec<Option<usize>>> = vec![vec![None; m]; requests.len()];
        for (b, map) in to_union.iter().enumerate() {
            for (j, &u) in map.iter().enumerate() {
                to_local[b][u] = Some(j);
            }
        }
        let global = |b: usize, id: TokenId| -> Result<TokenId> {
            let i = id as usize;
            if i < v {
                return Ok(id);
            }
            to_union[b]
                .get(i - v)
                .map(|&u| (v + u) as TokenId)
                .ok_or(Error::IdOutOfRange {
                    id,
                    size: v + to_union[b].len(),
                })
        };

        let max_len = self.model.config().max_seq_len;
        let mut rows = Vec::with_capacity(requests.len());
        for (b, req) in requests.iter().enumerate() {
            let mut row = vec![self.vocab.bos_id()];
            row.extend_from_slice(&req.prefix_ids);
            for &id in &req.forced {
                row.push(global(b, id)?);
            }
            let remaining = config.max_new_ids.saturating_sub(req.forced.len());
            if row.len() + remaining > max_len {
                return Err(Error::SequenceTooLong {
                    len: row.len() + remaining,
                    max: max_len,
                });
            }
            rows.push(row);
        }

        let exp = self.model.expand(&union)?;
        let n = exp.total();
        let batch = requests.len();
        let input = BatchInput::left_padded(&rows, self.vocab.pad_id());
        let mut state = self.model.start(batch);
        self.model
            .advance(&mut state, &exp, &input.ids, &input.valid)?;

        let mut emitted: Vec<Vec<TokenId>> = requests.iter().map(|r| r.forced.clone()).collect();
        let mut steps: Vec<Vec<GenStep>> =
            requests.iter().map(|r| r.forced_steps.clone()).collect();
        let mut active: Vec<bool> = emitted
            .iter()
            .map(|e| e.len() < config.max_new_ids)
            .collect();
        let (eos, pad, bos) = (
            self.vocab.eos_id(),
            self.vocab.pad_id(),
            self.vocab.bos_id(),
        );
        let mut row = vec![0.0; n];
        let mut next_ids = vec![pad; batch];
        let mut next_valid = vec![false; batch];
        while active.iter().any(|&a| a) {
            let logits = self.model.logits(state.hidden(), &exp);
            for b in 0..batch {
                next_ids[b] = pad;
                next_valid[b] = false;
                if !active[b] {
                    continue;
                }
                row.copy_from_slice(logits.row(b).as_slice().expect("standard layout"));
                process_logits(&mut row, v, &masks[b])?;
                row[pad as usize] = f64::NEG_INFINITY;
                row[bos as usize] = f64::NEG_INFINITY;
                if emitted[b].len() < config.min_new_ids {
                    row[eos as usize] = f64::NEG_INFINITY;
                }
                let step_index = emitted[b].len();
                let (chosen, probs) = choose(&row, config, step_index);
                if chosen == eos as usize {
                    active[b] = false;
                    continue;
                }
                let local = |u: usize| -> TokenId {
                    if u < v {
                        u as TokenId
                    } else {
                        let j = to_local[b][u - v].expect("masked phrases have zero probability");
                        (v + j) as TokenId
                    }
                };
                let candidates = top_candidates(&probs, config.keep_top, chosen)
                    .into_iter()
                    .map(|(u, p)| Candidate {
                        id: local(u),
                        probability: p,
                    })
                    .collect();
                let id = local(chosen);
                steps[b].push(GenStep {
                    chosen: id,
                    probability: probs[chosen],
                    candidates,
                });
                emitted[b].push(id);
                next_ids[b] = chosen as TokenId;
                next_valid[b] = true;
                if emitted[b].len() >= config.max_new_ids {
                    active[b] = false;
                }
            }
            if !next_valid.iter().any(|&x| x) {
                break;
            }
            self.model
                .advance(&mut state, &exp, &next_ids, &next_valid)?;
        }

        requests
            .into_iter()
            .zip(emitted)
            .zip(steps)
            .map(|((req, ids), steps)| self.finish(req, ids, steps, config))
            .collect()
    }

    fn finish(
        &self,
        req: DecodeRequest,
        ids: Vec<TokenId>,
        steps: Vec<GenStep>,
        config: &GenerationConfig,
    ) -> Result<GenerationSession> {
        let tok = DvaTokenizer::new(&self.vocab, &req.table)?;
        let segs = tok.decode_segments(&ids)?;
        let text = segs
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let segments = segs
            .into_iter()
            .zip(&steps)
            .map(|(s, st)| SessionSegment {
                text: s.text,
                kind: s.kind,
                probability: st.probability,
            })
            .collect();
        Ok(GenerationSession {
            prefix: req.prefix,
            prefix_ids: req.prefix_ids,
            phrases: req.table.surfaces().map(str::to_string).collect(),
            vocab_size: self.vocab.len(),
            ids,
            steps,
            segments,
            text,
            config: config.clone(),
        })
    }
}

/// Step RNG: one stream per absolute output position, so a sample's draws
/// do not depend on its batch slot or on how decoding was resumed.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Returns the chosen id and the full tempered distribution.
fn choose(logits: &[f64], config: &GenerationConfig, step: usize) -> (usize, Vec<f64>) {
    let scaled: Vec<f64> = if config.temperature == 1.0 {
        logits.to_vec()
    } else {
        logits.iter().map(|l| l / config.temperature).collect()
    };
    let probs = kernels::softmax(&scaled);
    let chosen = match config.strategy {
        Strategy::Greedy => argmax(logits),
        Strategy::Sample => {
            let pool: Vec<(usize, f64)> = if config.top_k > 0 {
                top_candidates(&probs, config.top_k, usize::MAX)
            } else {
                probs
                    .iter()
                    .copied()
                    .enumerate()
                    .filter(|&(_, p)| p > 0.0)
                    .collect()
            };
            let total: f64 = pool.iter().map(|x| x.1).sum();
            let r = step_rng(config.seed, step).gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = pool.last().expect("some id is always allowed").0;
            for &(i, p) in &pool {
                acc += p;
                if r < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    (chosen, probs)
}

/// Index of the largest value; lowest index on ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate() {
        if x > values[best] {
            best = i;
        }
    }
    best
}

/// The `k` most probable entries with nonzero probability, descending, ties
/// by id; `must` (if in range) is appended when not already present.
fn top_candidates(probs: &[f64], k: usize, must: usize) -> Vec<(usize, f64)> {
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let mut live: Vec<(usize, f64)> = probs
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, p)| p > 0.0)
        .collect();
    if live.len() > k {
        live.select_nth_unstable_by(k - 1, order);
        live.truncate(k);
    }
    live.sort_unstable_by(order);
    if must < probs.len() && !live.iter().any(|&(i, _)| i == must) {
        live.push((must, probs[must]));
    }
    live
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::Rng;

    use super::*;
    use crate::model::{ModelConfig, StackConfig};
    use crate::retriever::Embedder;
    use crate::sampler::{mix_seed, NTokenSampler, NWORD};
    use crate::text::{DocumentSet, BOS, EOS, PAD, UNK};

    const WORDS: [&str; 12] = [
        "the", "cat", "sat", "on", "mat", "a", "dog", "ran", "to", "park", "big", "red",
    ];

    fn vocab() -> Arc<StaticVocab> {
        let mut e: Vec<&str> = WORDS.to_vec();
        e.extend([UNK, BOS, EOS, PAD]);
        Arc::new(StaticVocab::from_entries(e).unwrap())
    }

    fn model(vocab: &StaticVocab, seed: u64) -> DvaModel {
        let cfg = ModelConfig {
            d_model: 8,
            max_seq_len: 48,
            backbone: StackConfig {
                n_layers: 1,
                n_heads: 2,
            },
            phrase_encoder: StackConfig {
                n_layers: 1,
                n_heads: 2,
            },
            ..ModelConfig::default()
        };
        let mut m = DvaModel::new(cfg, vocab, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in m.params_mut() {
            p.value.mapv_inplace(|_| rng.gen_range(-0.8..0.8));
        }
        m
    }

    fn corpus() -> DocumentSet {
        DocumentSet::from_texts([
            "the cat sat on the mat",
            "a dog ran to the park",
            "the big red dog sat on a mat",
            "a cat ran to the big park",
            "red mat red cat red dog",
        ])
    }

    fn sampler_config() -> SamplerConfig {
        SamplerConfig {
            strategy: NWORD.into(),
            n: 2,
            max_phrases: 4,
            ..SamplerConfig::default()
        }
    }

    fn generator(seed: u64, with_retrieval: bool) -> Generator {
        let v = vocab();
        let m = Arc::new(model(&v, seed));
        let retriever = with_retrieval.then(|| {
            let e = Embedder::new(m.clone(), v.clone()).unwrap();
            Arc::new(Retriever::build(e, Arc::new(corpus())).unwrap())
        });
        let sampler = Arc::new(NTokenSampler::new(v.clone()));
        Generator::new(m, v, retriever, sampler, sampler_config()).unwrap()
    }

    fn greedy(n: usize) -> GenerationConfig {
        GenerationConfig {
            min_new_ids: n,
            max_new_ids: n,
            k_docs: 2,
            ..GenerationConfig::default()
        }
    }

    fn random_table(v: &StaticVocab, rng: &mut ChaCha8Rng) -> PhraseTable {
        let k = rng.gen_range(0..5);
        let surfaces: Vec<String> = (0..k)
            .map(|_| {
                let len = rng.gen_range(2..4);
                (0..len)
                    .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        PhraseTable::from_candidates(v, surfaces, 2)
    }

    fn request(g: &Generator, prefix: &str, table: PhraseTable) -> DecodeRequest {
        DecodeRequest {
            prefix: prefix.into(),
            prefix_ids: g.vocab().encode(prefix),
            table,
            forced: Vec::new(),
            forced_steps: Vec::new(),
        }
    }

    fn random_prefix(rng: &mut ChaCha8Rng) -> String {
        let len = rng.gen_range(1..7);
        (0..len)
            .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn process_logits_examples() {
        let mut l = vec![0.3, -1.0, 2.0, 0.5, 0.7];
        let orig = l.clone();
        process_logits(&mut l, 3, &CandidateMask::all(2, true)).unwrap();
        assert_eq!(l, orig);

        process_logits(&mut l, 3, &CandidateMask::all(2, false)).unwrap();
        let p = kernels::softmax(&l);
        let z: f64 = orig[..3].iter().map(|x| x.exp()).sum();
        for i in 0..3 {
            assert!((p[i] - orig[i].exp() / z).abs() < 1e-12);
        }
        assert_eq!(p[3], 0.0);
        assert_eq!(p[4], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        let mut l = orig.clone();
        process_logits(
            &mut l,
            3,
            &CandidateMask {
                allowed: vec![true, false],
            },
        )
        .unwrap();
        assert_eq!(l[3], orig[3]);
        assert_eq!(kernels::softmax(&l)[4], 0.0);
        assert!(process_logits(&mut l, 2, &CandidateMask::all(2, true)).is_err());
    }

    #[test]
    fn tempered_distribution_examples() {
        let cfg = GenerationConfig::default();
        let (_, p) = choose(&[3f64.ln(), 0.0], &cfg, 0);
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        let (c, p) = choose(&[1.0, 1.0], &cfg, 0);
        assert_eq!(c, 0);
        assert_eq!(p, vec![0.5, 0.5]);
        let hot = GenerationConfig {
            temperature: 2.0,
            ..cfg.clone()
        };
        let (_, p) = choose(&[2.0, 0.0], &hot, 0);
        assert!((p[0] - 1f64.exp() / (1f64.exp() + 1.0)).abs() < 1e-12);
        for t in [0.0, -1.0, f64::NAN] {
            assert!(GenerationConfig {
                temperature: t,
                ..cfg.clone()
            }
            .validate()
            .is_err());
        }
        assert!(GenerationConfig {
            min_new_ids: 5,
            max_new_ids: 4,
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn top_candidates_order_and_chosen() {
        let p = [0.1, 0.3, 0.0, 0.3, 0.05, 0.25];
        let top = top_candidates(&p, 3, 1);
        assert_eq!(top, vec![(1, 0.3), (3, 0.3), (5, 0.25)]);
        let top = top_candidates(&p, 2, 4);
        assert_eq!(top, vec![(1, 0.3), (3, 0.3), (4, 0.05)]);
        assert_eq!(top_candidates(&p, 50, 0).len(), 5);
    }

    #[test]
    fn candidate_construction() {
        let v = vocab();
        let s = NTokenSampler::new(v.clone());
        let cfg = sampler_config();
        assert!(build_phrase_candidates(&[], &s, &cfg, &v, 10).is_empty());

        let whole = SamplerConfig {
            n: 3,
            max_phrases: 1,
            ..cfg.clone()
        };
        let got = build_phrase_candidates(&["cat sat on", "cat sat on"], &s, &whole, &v, 10);
        assert_eq!(got, vec!["cat sat on".to_string()]);

        let docs = [
            "the cat sat on the mat a dog ran to the park",
            "the big red dog sat on a mat to the park",
        ];
        let many = SamplerConfig {
            max_phrases: 8,
            ..cfg
        };
        let mut seen = HashSet::new();
        let mut oracle = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            for p in s.sample(d, &many.with_seed(mix_seed(many.seed, i as u64))) {
                if seen.insert(p.clone()) {
                    oracle.push(p);
                }
            }
        }
        assert!(
            oracle.len() >= 12,
            "need 12 sampled surfaces, got {}",
            oracle.len()
        );
        oracle.truncate(5);
        assert_eq!(build_phrase_candidates(&docs, &s, &many, &v, 5), oracle);
    }

    #[test]
    fn batch_matches_single_with_heterogeneous_candidates() {
        let g = generator(11, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = greedy(10);
        for _ in 0..5 {
            let reqs: Vec<DecodeRequest> = (0..4)
                .map(|_| {
                    let p = random_prefix(&mut rng);
                    let t = random_table(g.vocab(), &mut rng);
                    request(&g, &p, t)
                })
                .collect();
            let batch = g.decode(reqs.clone(), &cfg).unwrap();
            for (r, s) in reqs.into_iter().zip(&batch) {
                let single = g.decode(vec![r], &cfg).unwrap().remove(0);
                assert_eq!(single.ids, s.ids);
            }
        }
    }

    #[test]
    fn candidate_isolation() {
        let g = generator(12, false);
        let v = g.vocab().clone();
        let b = request(
            &g,
            "dog ran",
            PhraseTable::from_candidates(&v, ["to the park"], 2),
        );
        let small = request(
            &g,
            "the cat",
            PhraseTable::from_candidates(&v, ["sat on"], 2),
        );
        let large = request(
            &g,
            "the cat",
            PhraseTable::from_candidates(
                &v,
                ["sat on", "the mat", "big red dog", "to the park"],
                2,
            ),
        );
        let cfg = greedy(12);
        let x = g.decode(vec![small, b.clone()], &cfg).unwrap();
        let y = g.decode(vec![large, b], &cfg).unwrap();
        assert_eq!(x[1].ids, y[1].ids);
    }

    #[test]
    fn forced_length_and_session_completeness() {
        let g = generator(13, true);
        let out = g
            .generate_batch(&["the cat", "a dog ran", "red", "park to the"], &greedy(16))
            .unwrap();
        for s in &out.sessions {
            assert_eq!(s.ids.len(), 16);
            assert_eq!(s.steps.len(), 16);
            assert_eq!(s.segments.len(), 16);
            let n = s.vocab_size + s.phrases.len();
            for (id, st) in s.ids.iter().zip(&s.steps) {
                assert!((*id as usize) < n);
                assert_eq!(st.chosen, *id);
                assert!(st
                    .candidates
                    .iter()
                    .any(|c| c.id == *id && c.probability == st.probability));
                assert!(st
                    .candidates
                    .windows(2)
                    .all(|w| w[0].probability >= w[1].probability));
                assert!(st
                    .candidates
                    .iter()
                    .all(|c| (0.0..=1.0).contains(&c.probability)));
            }
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let g = generator(14, true);
        let cfg = GenerationConfig {
            strategy: Strategy::Sample,
            temperature: 1.5,
            seed: 99,
            ..greedy(12)
        };
        let a = g.generate_batch(&["the cat", "a dog"], &cfg).unwrap();
        let b = g.generate_batch(&["the cat", "a dog"], &cfg).unwrap();
        for (x, y) in a.sessions.iter().zip(&b.sessions) {
            assert_eq!(x.ids, y.ids);
        }
        let other = GenerationConfig { seed: 100, ..cfg };
        let c = g.generate_batch(&["the cat", "a dog"], &other).unwrap();
        assert!(a
            .sessions
            .iter()
            .zip(&c.sessions)
            .any(|(x, y)| x.ids != y.ids));
    }

    #[test]
    fn single_equals_batch_of_one() {
        let g = generator(15, true);
        let cfg = greedy(8);
        let one = g.generate_single("the big dog", None, &cfg).unwrap();
        let batch = g
            .generate_batch(&["the big dog"], &cfg)
            .unwrap()
            .sessions
            .remove(0);
        assert_eq!(one, batch);
    }

    #[test]
    fn explicit_phrases_replace_candidates() {
        let g = generator(16, true);
        let cfg = greedy(8);
        let s = g
            .generate_single(
                "the cat",
                Some(&[]),
                &GenerationConfig {
                    k_docs: 0,
                    ..cfg.clone()
                },
            )
            .unwrap();
        assert!(s.phrases.is_empty());
        assert!(s.ids.iter().all(|&i| (i as usize) < s.vocab_size));

        let phrases: Vec<String> = [
            "big red dog",
            "to the park",
            "sat on",
            "the mat",
            "a cat",
            "dog ran",
        ]
        .map(String::from)
        .to_vec();
        let mut emitted = false;
        for (i, prefix) in WORDS.iter().enumerate() {
            let sampled = GenerationConfig {
                strategy: Strategy::Sample,
                seed: i as u64,
                ..cfg.clone()
            };
            let s = g.generate_single(prefix, Some(&phrases), &sampled).unwrap();
            assert_eq!(s.phrases, phrases);
            for seg in s.segments.iter().filter(|x| x.kind == SegmentKind::Phrase) {
                emitted = true;
                assert!(phrases.contains(&seg.text));
                assert!(s.text.contains(&seg.text));
            }
        }
        assert!(emitted);
        assert!(g
            .generate_single("the cat", Some(&["cat".to_string()]), &cfg)
            .is_err());
    }

    #[test]
    fn input_errors() {
        let g = generator(17, false);
        assert!(g.generate_batch(&[], &greedy(4)).is_err());
        assert!(g.generate_batch(&["  "], &greedy(4)).is_err());
        let long = vec!["cat"; 40].join(" ");
        assert!(matches!(
            g.generate_batch(&[long.as_str()], &greedy(8)),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(g.generate_batch(&[long.as_str()], &greedy(7)).is_ok());
    }

    /// Recompute every step from scratch with the uncached forward pass.
    fn full_recompute_greedy(g: &Generator, s: &GenerationSession, from: usize) -> Vec<TokenId> {
        let table = s.table(g.vocab()).unwrap();
        let exp = g.model().expand(&table).unwrap();
        let v = g.vocab().len();
        let mut seq: Vec<TokenId> = vec![g.vocab().bos_id()];
        seq.extend(&s.prefix_ids);
        seq.extend(&s.ids[..from]);
        let mut out = s.ids[..from].to_vec();
        while out.len() < s.config.max_new_ids {
            let input = BatchInput::right_padded(&[seq.clone()], g.vocab().pad_id());
            let logits = g.model().forward(&input, &exp).unwrap();
            let t = seq.len() - 1;
            let mut row: Vec<f64> = (0..exp.total()).map(|i| logits[[0, t, i]]).collect();
            for r in [g.vocab().pad_id(), g.vocab().bos_id()] {
                row[r as usize] = f64::NEG_INFINITY;
            }
            if out.len() < s.config.min_new_ids {
                row[g.vocab().eos_id() as usize] = f64::NEG_INFINITY;
            }
            let best = argmax(&row);
            if best == g.vocab().eos_id() as usize {
                break;
            }
            assert!(best < v + table.len());
            out.push(best as TokenId);
            seq.push(best as TokenId);
        }
        out
    }

    #[test]
    fn steering_fixed_point_and_regeneration() {
        let g = generator(18, true);
        let cfg = greedy(10);
        let s = g.generate_single("the dog", None, &cfg).unwrap();
        assert_eq!(full_recompute_greedy(&g, &s, 0), s.ids);
        for p in [0, 4, 9] {
            let same = g.steer(&s, p, s.ids[p]).unwrap();
            assert_eq!(same.ids, s.ids);
            assert_eq!(same.steps, s.steps);
            let alt = s.steps[p]
                .candidates
                .iter()
                .find(|c| c.id != s.ids[p])
                .unwrap()
                .id;
            let t = g.steer(&s, p, alt).unwrap();
            assert_eq!(t.ids[..p], s.ids[..p]);
            assert_eq!(t.ids[p], alt);
            assert_eq!(t.ids.len(), 10);
            assert_eq!(full_recompute_greedy(&g, &t, p + 1), t.ids);
        }
        assert!(g.steer(&s, 10, s.ids[0]).is_err());
        assert!(g.steer(&s, 0, 9999).is_err());
    }

    #[test]
    fn sampled_steering_fixed_point() {
        let g = generator(19, true);
        let cfg = GenerationConfig {
            strategy: Strategy::Sample,
            top_k: 5,
            seed: 3,
            ..greedy(10)
        };
        let s = g.generate_single("a cat", None, &cfg).unwrap();
        for p in 0..10 {
            assert_eq!(g.steer(&s, p, s.ids[p]).unwrap().ids, s.ids);
        }
    }

    #[test]
    fn session_serde_round_trip() {
        let g = generator(20, true);
        let s = g.generate_single("the cat", None, &greedy(4)).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: GenerationSession = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v["segments"][0]["kind"].is_string());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn masked_phrases_never_emitted(seed in 0u64..1000, temp in 0.3f64..3.0, min in 0usize..6) {
            let g = generator(21, false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reqs: Vec<DecodeRequest> = (0..3)
                .map(|_| {
                    let p = random_prefix(&mut rng);
                    let t = random_table(g.vocab(), &mut rng);
                    request(&g, &p, t)
                })
                .collect();
            let cfg = GenerationConfig {
                strategy: Strategy::Sample,
                temperature: temp,
                seed,
                min_new_ids: min,
                max_new_ids: min + 6,
                ..GenerationConfig::default()
            };
            let tables: Vec<usize> = reqs.iter().map(|r| r.table.len()).collect();
            let out = g.decode(reqs, &cfg).unwrap();
            for (s, m) in out.iter().zip(tables) {
                prop_assert!(s.ids.len() >= min && s.ids.len() <= min + 6);
                for st in &s.steps {
                    prop_assert!((st.chosen as usize) < s.vocab_size + m);
                    prop_assert!(st.candidates.iter().all(|c| (c.id as usize) < s.vocab_size + m));
                }
            }
        }
    }
}
