//! The dynamic-vocabulary language model: a causal transformer backbone, a
//! causal transformer phrase encoder and a two-layer MLP projector.
//!
//! Two execution paths share the same parameters and kernels. The tape path
//! ([`DvaModel::tape_loss`] and friends) is differentiable and used for
//! training. The runtime path ([`DvaModel::advance`]) keeps a per-layer
//! key/value cache for incremental decoding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{AttnLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::text::{StaticVocab, TokenId};
use crate::tokenizer::PhraseTable;

const CKPT_MAGIC: &[u8] = b"dva-ckpt v1\n";
const INIT_STD: f64 = 0.02;

/// Depth and head count of one transformer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Static vocabulary size; taken from the vocabulary when zero.
    pub vocab_size: usize,
    pub d_model: usize,
    pub max_seq_len: usize,
    pub ffn_mult: usize,
    pub backbone: StackConfig,
    pub phrase_encoder: StackConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            max_seq_len: 256,
            ffn_mult: 4,
            backbone: StackConfig::default(),
            phrase_encoder: StackConfig::default(),
            lora: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_model == 0 {
            return bad("d_model must be positive".into());
        }
        if self.max_seq_len < 2 {
            return bad(format!(
                "max_seq_len must be >= 2, got {}",
                self.max_seq_len
            ));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        for (name, stack) in [
            ("backbone", &self.backbone),
            ("phrase_encoder", &self.phrase_encoder),
        ] {
            if stack.n_layers == 0 || stack.n_heads == 0 {
                return bad(format!("{name} needs at least one layer and one head"));
            }
            if !self.d_model.is_multiple_of(stack.n_heads) {
                return bad(format!(
                    "d_model {} not divisible by {name} n_heads {}",
                    self.d_model, stack.n_heads
                ));
            }
        }
        if let Some(lora) = &self.lora {
            if lora.rank == 0 {
                return bad("lora rank must be >= 1".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    LoraAdapter,
    PhraseEncoder,
    Projector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
}

/// The static input and output embedding matrices, each `|V| × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrices {
    pub input: Array2<f64>,
    pub output: Array2<f64>,
}

/// `m × d`; row `j` is the embedding of phrase `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseEmbeddings {
    pub rows: Array2<f64>,
}

impl PhraseEmbeddings {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

/// `(|V| + m) × d` input and output embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedEmbeddings {
    pub input: Array2<f64>,
    pub output: Array2<f64>,
    pub vocab_size: usize,
}

impl ExpandedEmbeddings {
    pub fn total(&self) -> usize {
        self.input.nrows()
    }

    pub fn phrase_count(&self) -> usize {
        self.total() - self.vocab_size
    }
}

/// Stack the phrase rows under both base matrices. The inputs are untouched.
pub fn expand_embeddings(
    base: &EmbeddingMatrices,
    ep: &PhraseEmbeddings,
) -> Result<ExpandedEmbeddings> {
    let d = base.input.ncols();
    if base.output.ncols() != d || ep.rows.ncols() != d {
        return Err(Error::ShapeMismatch(format!(
            "embedding widths differ: input {}, output {}, phrases {}",
            d,
            base.output.ncols(),
            ep.rows.ncols()
        )));
    }
    if base.input.nrows() != base.output.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} rows, output has {}",
            base.input.nrows(),
            base.output.nrows()
        )));
    }
    let cat = |m: &Array2<f64>| {
        ndarray::concatenate(Axis(0), &[m.view(), ep.rows.view()]).expect("widths checked")
    };
    Ok(ExpandedEmbeddings {
        input: cat(&base.input),
        output: cat(&base.output),
        vocab_size: base.input.nrows(),
    })
}

/// A batch of id rows, flattened `batch × time`, with a validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchInput {
    pub batch: usize,
    pub time: usize,
    pub ids: Vec<TokenId>,
    pub valid: Vec<bool>,
}

impl BatchInput {
    /// Right-pad `rows` to a common length.
    pub fn right_padded(rows: &[Vec<TokenId>], pad: TokenId) -> Self {
        let time = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * time);
        let mut valid = Vec::with_capacity(rows.len() * time);
        for row in rows {
            ids.extend_from_slice(row);
            valid.extend(std::iter::repeat_n(true, row.len()));
            ids.extend(std::iter::repeat_n(pad, time - row.len()));
            valid.extend(std::iter::repeat_n(false, time - row.len()));
        }
        Self {
            batch: rows.len(),
            time,
            ids,
            valid,
        }
    }

    /// Left-pad `rows` to a common length.
    pub fn left_padded(rows: &[Vec<TokenId>], pad: TokenId) -> Self {
        let time = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * time);
        let mut valid = Vec::with_capacity(rows.len() * time);
        for row in rows {
            ids.extend(std::iter::repeat_n(pad, time - row.len()));
            valid.extend(std::iter::repeat_n(false, time - row.len()));
            ids.extend_from_slice(row);
            valid.extend(std::iter::repeat_n(true, row.len()));
        }
        Self {
            batch: rows.len(),
            time,
            ids,
            valid,
        }
    }
}

#[derive(Debug, Clone)]
struct LoraIdx {
    qa: usize,
    qb: usize,
    va: usize,
    vb: usize,
}

#[derive(Debug, Clone)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    lora: Option<LoraIdx>,
}

#[derive(Debug, Clone)]
struct StackIdx {
    tok: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    heads: usize,
}

#[derive(Debug, Clone)]
struct ProjIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Builder {
    fn add(&mut self, name: String, group: ParamGroup, shape: (usize, usize), init: Init) -> usize {
        let value = match init {
            Init::Normal => {
                Array2::from_shape_simple_fn(shape, || self.normal.sample(&mut self.rng))
            }
            Init::Zeros => Array2::zeros(shape),
            Init::Ones => Array2::ones(shape),
        };
        self.params.push(Param { name, group, value });
        self.params.len() - 1
    }

    fn stack(
        &mut self,
        prefix: &str,
        group: ParamGroup,
        cfg: &ModelConfig,
        stack: &StackConfig,
    ) -> StackIdx {
        let d = cfg.d_model;
        let f = d * cfg.ffn_mult;
        let tok = self.add(
            format!("{prefix}.tok"),
            group,
            (cfg.vocab_size, d),
            Init::Normal,
        );
        let pos = self.add(
            format!("{prefix}.pos"),
            group,
            (cfg.max_seq_len, d),
            Init::Normal,
        );
        let mut blocks = Vec::with_capacity(stack.n_layers);
        for l in 0..stack.n_layers {
            let p = format!("{prefix}.blocks.{l}");
            let mut add = |n: &str, shape, init| self.add(format!("{p}.{n}"), group, shape, init);
            blocks.push(BlockIdx {
                ln1_g: add("ln1.g", (1, d), Init::Ones),
                ln1_b: add("ln1.b", (1, d), Init::Zeros),
                wq: add("attn.wq", (d, d), Init::Normal),
                bq: add("attn.bq", (1, d), Init::Zeros),
                wk: add("attn.wk", (d, d), Init::Normal),
                bk: add("attn.bk", (1, d), Init::Zeros),
                wv: add("attn.wv", (d, d), Init::Normal),
                bv: add("attn.bv", (1, d), Init::Zeros),
                wo: add("attn.wo", (d, d), Init::Normal),
                bo: add("attn.bo", (1, d), Init::Zeros),
                ln2_g: add("ln2.g", (1, d), Init::Ones),
                ln2_b: add("ln2.b", (1, d), Init::Zeros),
                w1: add("ffn.w1", (d, f), Init::Normal),
                b1: add("ffn.b1", (1, f), Init::Zeros),
                w2: add("ffn.w2", (f, d), Init::Normal),
                b2: add("ffn.b2", (1, d), Init::Zeros),
                lora: None,
            });
        }
        let lnf_g = self.add(format!("{prefix}.ln_f.g"), group, (1, d), Init::Ones);
        let lnf_b = self.add(format!("{prefix}.ln_f.b"), group, (1, d), Init::Zeros);
        StackIdx {
            tok,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            heads: stack.n_heads,
        }
    }
}

/// Backbone, phrase encoder and projector parameters.
#[derive(Debug, Clone)]
pub struct DvaModel {
    config: ModelConfig,
    vocab_fingerprint: String,
    params: Vec<Param>,
    backbone: StackIdx,
    tok_out: usize,
    encoder: StackIdx,
    projector: ProjIdx,
}

/// Per-layer key/value cache of one stack.
#[derive(Debug, Clone)]
struct LayerCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Incremental decoding state: key/value caches for every sample plus the
/// last hidden state of each sample.
#[derive(Debug, Clone)]
pub struct StepState {
    batch: usize,
    d: usize,
    valid: Vec<Vec<bool>>,
    positions: Vec<usize>,
    caches: Vec<LayerCache>,
    hidden: Array2<f64>,
}

impl StepState {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Number of positions consumed (including padding).
    pub fn len(&self) -> usize {
        self.valid.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `batch × d`: hidden state at the most recent position of each sample.
    pub fn hidden(&self) -> ArrayView2<'_, f64> {
        self.hidden.view()
    }

    /// Non-pad positions consumed by sample `b`.
    pub fn valid_len(&self, b: usize) -> usize {
        self.positions[b]
    }
}

impl DvaModel {
    /// Fresh model with seeded normal initialization.
    pub fn new(config: ModelConfig, vocab: &StaticVocab, seed: u64) -> Result<Self> {
        let mut config = config;
        if config.vocab_size == 0 {
            config.vocab_size = vocab.len();
        }
        if config.vocab_size != vocab.len() {
            return Err(Error::InvalidArgument(format!(
                "config vocab_size {} differs from vocabulary size {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        config.validate()?;
        let lora = config.lora.take();
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let d = config.d_model;
        let backbone = b.stack("backbone", ParamGroup::Backbone, &config, &config.backbone);
        let tok_out = b.add(
            "backbone.tok_out".into(),
            ParamGroup::Backbone,
            (config.vocab_size, d),
            Init::Normal,
        );
        let encoder = b.stack(
            "encoder",
            ParamGroup::PhraseEncoder,
            &config,
            &config.phrase_encoder,
        );
        let pg = ParamGroup::Projector;
        let projector = ProjIdx {
            w1: b.add("projector.w1".into(), pg, (d, d), Init::Normal),
            b1: b.add("projector.b1".into(), pg, (1, d), Init::Zeros),
            w2: b.add("projector.w2".into(), pg, (d, d), Init::Normal),
            b2: b.add("projector.b2".into(), pg, (1, d), Init::Zeros),
        };
        let mut model = Self {
            config,
            vocab_fingerprint: vocab.fingerprint(),
            params: b.params,
            backbone,
            tok_out,
            encoder,
            projector,
        };
        if let Some(lora) = lora {
            model.attach_lora(lora.rank, lora.alpha, seed ^ 0x4c6f_5241)?;
        }
        Ok(model)
    }

    /// Add rank-`rank` adapters to the backbone query and value projections.
    /// `A` is drawn from the init distribution and `B` starts at zero, so the
    /// model output is unchanged until training moves `B`.
    pub fn attach_lora(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        if self.config.lora.is_some() {
            return Err(Error::InvalidArgument(
                "lora adapters already attached".into(),
            ));
        }
        if rank == 0 {
            return Err(Error::InvalidArgument("lora rank must be >= 1".into()));
        }
        let d = self.config.d_model;
        let mut b = Builder {
            params: std::mem::take(&mut self.params),
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let g = ParamGroup::LoraAdapter;
        for (l, blk) in self.backbone.blocks.iter_mut().enumerate() {
            let p = format!("backbone.blocks.{l}.attn");
            blk.lora = Some(LoraIdx {
                qa: b.add(format!("{p}.lora_q_a"), g, (d, rank), Init::Normal),
                qb: b.add(format!("{p}.lora_q_b"), g, (rank, d), Init::Zeros),
                va: b.add(format!("{p}.lora_v_a"), g, (d, rank), Init::Normal),
                vb: b.add(format!("{p}.lora_v_b"), g, (rank, d), Init::Zeros),
            });
        }
        self.params = b.params;
        self.config.lora = Some(LoraConfig { rank, alpha });
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Short hash over parameter names and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Round every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.mapv_inplace(|v| v as f32 as f64);
        }
    }

    fn lora_scale(&self) -> f64 {
        self.config.lora.map_or(0.0, |l| l.alpha / l.rank as f64)
    }

    pub fn embeddings(&self) -> EmbeddingMatrices {
        EmbeddingMatrices {
            input: self.params[self.backbone.tok].value.clone(),
            output: self.params[self.tok_out].value.clone(),
        }
    }

    /// Phrase embeddings for `table` followed by expansion of both matrices.
    pub fn expand(&self, table: &PhraseTable) -> Result<ExpandedEmbeddings> {
        let ep = self.encode_phrases(table)?;
        expand_embeddings(&self.embeddings(), &ep)
    }

    // ---- runtime path ----

    fn new_state(&self, stack: &StackIdx, batch: usize) -> StepState {
        StepState {
            batch,
            d: self.config.d_model,
            valid: vec![Vec::new(); batch],
            positions: vec![0; batch],
            caches: stack
                .blocks
                .iter()
                .map(|_| LayerCache {
                    keys: vec![Vec::new(); batch],
                    values: vec![Vec::new(); batch],
                })
                .collect(),
            hidden: Array2::zeros((batch, self.config.d_model)),
        }
    }

    /// Empty backbone decoding state for `batch` samples.
    pub fn start(&self, batch: usize) -> StepState {
        self.new_state(&self.backbone, batch)
    }

    /// Feed a `batch × chunk` block of ids through the backbone, extending
    /// the cache. Returns the final hidden states of all `batch * chunk`
    /// rows; pad rows carry no meaning.
    pub fn advance(
        &self,
        state: &mut StepState,
        exp: &ExpandedEmbeddings,
        ids: &[TokenId],
        valid: &[bool],
    ) -> Result<Array2<f64>> {
        self.advance_stack(&self.backbone, state, exp.input.view(), ids, valid)
    }

    fn advance_stack(
        &self,
        stack: &StackIdx,
        state: &mut StepState,
        table: ArrayView2<f64>,
        ids: &[TokenId],
        valid: &[bool],
    ) -> Result<Array2<f64>> {
        let batch = state.batch;
        if batch == 0 || !ids.len().is_multiple_of(batch) || ids.len() != valid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids and {} flags for batch {}",
                ids.len(),
                valid.len(),
                batch
            )));
        }
        let chunk = ids.len() / batch;
        let d = self.config.d_model;
        if table.ncols() != d {
            return Err(Error::ShapeMismatch(format!(
                "embedding width {} but d_model {}",
                table.ncols(),
                d
            )));
        }
        let rows = table.nrows();
        if let Some(&bad) = ids
            .iter()
            .zip(valid)
            .find(|(&id, &v)| v && id as usize >= rows)
            .map(|(id, _)| id)
        {
            return Err(Error::IdOutOfRange {
                id: bad,
                size: rows,
            });
        }
        let mut positions = state.positions.clone();
        let mut row_pos = vec![0usize; ids.len()];
        for b in 0..batch {
            for i in 0..chunk {
                let r = b * chunk + i;
                if valid[r] {
                    row_pos[r] = positions[b];
                    positions[b] += 1;
                }
            }
            if positions[b] > self.config.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: positions[b],
                    max: self.config.max_seq_len,
                });
            }
        }
        state.positions = positions;
        let prior = state.len();
        for b in 0..batch {
            state.valid[b].extend_from_slice(&valid[b * chunk..(b + 1) * chunk]);
        }

        let pos_table = &self.params[stack.pos].value;
        let mut x = Array2::zeros((ids.len(), d));
        for (r, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            if !valid[r] {
                continue;
            }
            row.assign(&table.row(ids[r] as usize));
            row += &pos_table.row(row_pos[r]);
        }

        let p = &self.params;
        let linear = |x: &Array2<f64>, w: usize, bias: usize| {
            let mut y = x.dot(&p[w].value);
            kernels::add_bias(&mut y, p[bias].value.view());
            y
        };
        let ln = |x: &Array2<f64>, g: usize, b: usize| {
            kernels::layer_norm(x.view(), p[g].value.view(), p[b].value.view()).0
        };
        let scale = self.lora_scale();
        let mut probs = vec![0.0; stack.heads * (prior + chunk)];
        let mut out_row = vec![0.0; d];
        for (blk, cache) in stack.blocks.iter().zip(state.caches.iter_mut()) {
            let h = ln(&x, blk.ln1_g, blk.ln1_b);
            let mut q = linear(&h, blk.wq, blk.bq);
            let k = linear(&h, blk.wk, blk.bk);
            let mut v = linear(&h, blk.wv, blk.bv);
            if let Some(l) = &blk.lora {
                q.scaled_add(scale, &h.dot(&p[l.qa].value).dot(&p[l.qb].value));
                v.scaled_add(scale, &h.dot(&p[l.va].value).dot(&p[l.vb].value));
            }
            for b in 0..batch {
                for i in 0..chunk {
                    let r = b * chunk + i;
                    cache.keys[b].extend(k.row(r).iter());
                    cache.values[b].extend(v.row(r).iter());
                }
            }
            let mut a = Array2::zeros((ids.len(), d));
            for b in 0..batch {
                for i in 0..chunk {
                    let r = b * chunk + i;
                    if !valid[r] {
                        continue;
                    }
                    let n = prior + i + 1;
                    let qr = q.row(r);
                    kernels::attend(
                        qr.as_slice().expect("standard layout"),
                        &cache.keys[b][..n * d],
                        &cache.values[b][..n * d],
                        &state.valid[b][..n],
                        stack.heads,
                        &mut out_row,
                        &mut probs[..stack.heads * n],
                    );
                    a.row_mut(r)
                        .assign(&ndarray::ArrayView1::from(&out_row[..]));
                }
            }
            x += &linear(&a, blk.wo, blk.bo);
            let h2 = ln(&x, blk.ln2_g, blk.ln2_b);
            let mut f = linear(&h2, blk.w1, blk.b1);
            f.mapv_inplace(kernels::gelu);
            x += &linear(&f, blk.w2, blk.b2);
        }
        let out = ln(&x, stack.lnf_g, stack.lnf_b);
        if chunk > 0 {
            for b in 0..batch {
                state
                    .hidden
                    .row_mut(b)
                    .assign(&out.row(b * chunk + chunk - 1));
            }
        }
        debug_assert_eq!(state.d, d);
        Ok(out)
    }

    /// `rows × (|V|+m)` logits `h · E_out'ᵀ`.
    pub fn logits(&self, hidden: ArrayView2<f64>, exp: &ExpandedEmbeddings) -> Array2<f64> {
        hidden.dot(&exp.output.t())
    }

    /// Full forward pass without caching. Returns `batch × time × (|V|+m)`.
    pub fn forward(&self, input: &BatchInput, exp: &ExpandedEmbeddings) -> Result<Array3<f64>> {
        let mut state = self.start(input.batch);
        let hidden = self.advance(&mut state, exp, &input.ids, &input.valid)?;
        let logits = self.logits(hidden.view(), exp);
        let n = exp.total();
        Ok(logits
            .into_shape_with_order((input.batch, input.time, n))
            .expect("row count is batch * time"))
    }

    /// `softmax(h_t · E_out'ᵀ / temperature)` for every sample in `state`.
    pub fn next_distribution(
        &self,
        state: &StepState,
        exp: &ExpandedEmbeddings,
        temperature: f64,
    ) -> Result<Array2<f64>> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let mut logits = self.logits(state.hidden(), exp);
        for mut row in logits.axis_iter_mut(Axis(0)) {
            let scaled: Vec<f64> = row.iter().map(|l| l / temperature).collect();
            let p = kernels::softmax(&scaled);
            row.assign(&ndarray::ArrayView1::from(&p[..]));
        }
        Ok(logits)
    }

    fn phrase_rows(&self, table: &PhraseTable) -> Result<(BatchInput, Vec<usize>)> {
        let rows: Vec<Vec<TokenId>> = table
            .phrases()
            .iter()
            .map(|p| p.subword_ids.clone())
            .collect();
        for r in &rows {
            if r.len() > self.config.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: r.len(),
                    max: self.config.max_seq_len,
                });
            }
            if r.is_empty() {
                return Err(Error::InvalidArgument("phrase with no subword ids".into()));
            }
        }
        let input = BatchInput::right_padded(&rows, 0);
        let last = rows
            .iter()
            .enumerate()
            .map(|(j, r)| j * input.time + r.len() - 1)
            .collect();
        Ok((input, last))
    }

    /// `Projector(PhraseEncoder(w_1..s)_s)` for every phrase, as one padded
    /// batch.
    pub fn encode_phrases(&self, table: &PhraseTable) -> Result<PhraseEmbeddings> {
        let d = self.config.d_model;
        if table.is_empty() {
            return Ok(PhraseEmbeddings {
                rows: Array2::zeros((0, d)),
            });
        }
        let (input, last) = self.phrase_rows(table)?;
        let mut state = self.new_state(&self.encoder, input.batch);
        let tok = self.params[self.encoder.tok].value.view();
        let hidden =
            self.advance_stack(&self.encoder, &mut state, tok, &input.ids, &input.valid)?;
        let h = hidden.select(Axis(0), &last);
        Ok(PhraseEmbeddings {
            rows: self.project(&h),
        })
    }

    fn project(&self, h: &Array2<f64>) -> Array2<f64> {
        let p = &self.params;
        let pj = &self.projector;
        let mut a = h.dot(&p[pj.w1].value);
        kernels::add_bias(&mut a, p[pj.b1].value.view());
        a.mapv_inplace(kernels::gelu);
        let mut out = a.dot(&p[pj.w2].value);
        kernels::add_bias(&mut out, p[pj.b2].value.view());
        out
    }

    // ---- differentiable path ----

    /// One leaf per parameter, aligned with [`DvaModel::params`].
    pub fn tape_leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    fn tape_stack(
        &self,
        tape: &mut Tape,
        v: &[Var],
        stack: &StackIdx,
        x: Var,
        layout: AttnLayout,
    ) -> Var {
        let scale = self.lora_scale();
        let mut h = x;
        for blk in &stack.blocks {
            let ln = tape.layer_norm(h, v[blk.ln1_g], v[blk.ln1_b]);
            let mut q = tape.linear(ln, v[blk.wq], v[blk.bq]);
            let k = tape.linear(ln, v[blk.wk], v[blk.bk]);
            let mut val = tape.linear(ln, v[blk.wv], v[blk.bv]);
            if let Some(l) = &blk.lora {
                let qa = tape.matmul(ln, v[l.qa]);
                let qd = tape.matmul(qa, v[l.qb]);
                let qd = tape.scale(qd, scale);
                q = tape.add(q, qd);
                let va = tape.matmul(ln, v[l.va]);
                let vd = tape.matmul(va, v[l.vb]);
                let vd = tape.scale(vd, scale);
                val = tape.add(val, vd);
            }
            let a = tape.attention(q, k, val, layout.clone());
            let o = tape.linear(a, v[blk.wo], v[blk.bo]);
            h = tape.add(h, o);
            let ln2 = tape.layer_norm(h, v[blk.ln2_g], v[blk.ln2_b]);
            let f = tape.linear(ln2, v[blk.w1], v[blk.b1]);
            let f = tape.gelu(f);
            let f = tape.linear(f, v[blk.w2], v[blk.b2]);
            h = tape.add(h, f);
        }
        tape.layer_norm(h, v[stack.lnf_g], v[stack.lnf_b])
    }

    fn positions(&self, input: &BatchInput) -> Result<Vec<usize>> {
        let mut out = vec![0; input.ids.len()];
        for b in 0..input.batch {
            let mut next = 0;
            for t in 0..input.time {
                let r = b * input.time + t;
                if input.valid[r] {
                    out[r] = next;
                    next += 1;
                }
            }
            if next > self.config.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: next,
                    max: self.config.max_seq_len,
                });
            }
        }
        Ok(out)
    }

    fn tape_embed(&self, tape: &mut Tape, table: Var, pos: Var, input: &BatchInput) -> Result<Var> {
        let rows = tape.value(table).nrows();
        if let Some(&bad) = input.ids.iter().find(|&&id| id as usize >= rows) {
            return Err(Error::IdOutOfRange {
                id: bad,
                size: rows,
            });
        }
        let positions = self.positions(input)?;
        let tok = tape.gather(table, input.ids.iter().map(|&i| i as usize).collect());
        let p = tape.gather(pos, positions);
        Ok(tape.add(tok, p))
    }

    fn layout(input: &BatchInput, heads: usize) -> AttnLayout {
        AttnLayout {
            batch: input.batch,
            time: input.time,
            heads,
            valid: input.valid.clone(),
        }
    }

    /// Phrase embeddings `E_P` on the tape; `None` for an empty table.
    pub fn tape_phrase_embeddings(
        &self,
        tape: &mut Tape,
        v: &[Var],
        table: &PhraseTable,
    ) -> Result<Option<Var>> {
        if table.is_empty() {
            return Ok(None);
        }
        let (input, last) = self.phrase_rows(table)?;
        let x = self.tape_embed(tape, v[self.encoder.tok], v[self.encoder.pos], &input)?;
        let layout = Self::layout(&input, self.encoder.heads);
        let h = self.tape_stack(tape, v, &self.encoder, x, layout);
        let last = tape.gather(h, last);
        let pj = &self.projector;
        let a = tape.linear(last, v[pj.w1], v[pj.b1]);
        let a = tape.gelu(a);
        Ok(Some(tape.linear(a, v[pj.w2], v[pj.b2])))
    }

    /// Backbone logits over `|V| + m` for every row of `input`.
    pub fn tape_logits(
        &self,
        tape: &mut Tape,
        v: &[Var],
        input: &BatchInput,
        ep: Option<Var>,
    ) -> Result<Var> {
        let (e_in, e_out) = match ep {
            Some(ep) => (
                tape.concat_rows(v[self.backbone.tok], ep),
                tape.concat_rows(v[self.tok_out], ep),
            ),
            None => (v[self.backbone.tok], v[self.tok_out]),
        };
        let x = self.tape_embed(tape, e_in, v[self.backbone.pos], input)?;
        let layout = Self::layout(input, self.backbone.heads);
        let h = self.tape_stack(tape, v, &self.backbone, x, layout);
        Ok(tape.matmul_t(h, e_out))
    }

    /// Mean cross-entropy of `targets` (aligned with `input` rows, `None`
    /// for ignored rows) on a fresh tape. Returns the tape, the parameter
    /// leaves and the loss node.
    pub fn tape_loss(
        &self,
        input: &BatchInput,
        table: &PhraseTable,
        targets: &[Option<TokenId>],
    ) -> Result<(Tape, Vec<Var>, Var)> {
        if targets.len() != input.ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for {} input rows",
                targets.len(),
                input.ids.len()
            )));
        }
        let n = self.config.vocab_size + table.len();
        if let Some(bad) = targets.iter().flatten().find(|&&t| t as usize >= n) {
            return Err(Error::IdOutOfRange { id: *bad, size: n });
        }
        let mut tape = Tape::new();
        let v = self.tape_leaves(&mut tape);
        let ep = self.tape_phrase_embeddings(&mut tape, &v, table)?;
        let logits = self.tape_logits(&mut tape, &v, input, ep)?;
        let loss = tape.cross_entropy(
            logits,
            targets.iter().map(|t| t.map(|t| t as usize)).collect(),
        );
        Ok((tape, v, loss))
    }

    // ---- persistence ----

    /// Write the `dva-ckpt v1` container. Values are stored as `f32`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = CkptHeader {
            config: self.config.clone(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            tensors: self
                .params
                .iter()
                .map(|p| TensorHeader {
                    name: p.name.clone(),
                    group: p.group,
                    shape: [p.value.nrows(), p.value.ncols()],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(CKPT_MAGIC)?;
        write(&(json.len() as u64).to_le_bytes())?;
        write(&json)?;
        for p in &self.params {
            for v in p.value.iter() {
                write(&(*v as f32).to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Read a checkpoint written by [`DvaModel::save`], rejecting it if it
    /// was trained against a different vocabulary.
    pub fn load(path: impl AsRef<Path>, vocab: &StaticVocab) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| Error::io(path, e));
        let mut magic = vec![0u8; CKPT_MAGIC.len()];
        read(&mut magic)?;
        if magic != CKPT_MAGIC {
            return Err(Error::Format(format!(
                "{} is not a dva-ckpt v1 file",
                path.display()
            )));
        }
        let mut len = [0u8; 8];
        read(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        read(&mut json)?;
        let header: CkptHeader = serde_json::from_slice(&json)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let found = vocab.fingerprint();
        if header.vocab_fingerprint != found {
            return Err(Error::FingerprintMismatch {
                expected: header.vocab_fingerprint,
                found,
            });
        }
        let mut model = Self::new(header.config, vocab, 0)?;
        if header.tensors.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, configuration implies {}",
                header.tensors.len(),
                model.params.len()
            )));
        }
        for (t, p) in header.tensors.iter().zip(model.params.iter_mut()) {
            if t.name != p.name
                || t.group != p.group
                || t.shape != [p.value.nrows(), p.value.ncols()]
            {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name,
                    t.shape,
                    p.name,
                    p.value.dim()
                )));
            }
            let mut buf = vec![0u8; p.value.len() * 4];
            read(&mut buf)?;
            for (dst, chunk) in p.value.iter_mut().zip(buf.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes in checkpoint",
                rest.len()
            )));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    group: ParamGroup,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: ModelConfig,
    vocab_fingerprint: String,
    tensors: Vec<TensorHeader>,
}
