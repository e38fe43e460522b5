//! Training: batch-level phrase sampling, encoding against the sampled
//! table, cross-entropy over the expanded vocabulary and an Adam update
//! restricted to the parameter groups of the chosen regime.

use std::io::Write;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{BatchInput, DvaModel, ParamGroup};
use crate::sampler::{mix_seed, sample_documents, PhraseSampler, SamplerConfig};
use crate::text::{DocumentSet, StaticVocab, TokenId};
use crate::tokenizer::{DvaTokenizer, MixedSequence, PhraseTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    FrozenBackbone,
    Lora,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::FrozenBackbone => "frozen_backbone",
            TrainMode::Lora => "lora",
        }
    }

    /// Whether parameters of `group` receive updates in this mode.
    pub fn trains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::PhraseEncoder | ParamGroup::Projector => true,
            ParamGroup::Backbone => *self == TrainMode::Full,
            ParamGroup::LoraAdapter => *self == TrainMode::Lora,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub mode: TrainMode,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            mode: TrainMode::Full,
            lora_rank: 8,
            lora_alpha: 16.0,
            learning_rate: 3e-4,
            steps: 200,
            seed: 0,
            grad_clip: 1.0,
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.mode == TrainMode::Lora && self.lora_rank == 0 {
            return bad("lora_rank must be >= 1 in lora mode");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        self.sampler.validate()
    }
}

/// One training batch encoded against its own phrase table.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub sequences: Vec<MixedSequence>,
    pub table: PhraseTable,
    /// `BOS + ids`, right-padded.
    pub input: BatchInput,
    /// `ids + EOS` aligned with `input`; `None` on padding.
    pub targets: Vec<Option<TokenId>>,
}

impl TrainBatch {
    pub fn target_count(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// Sample phrases from the batch's own texts, merge them into one table
/// and encode every sample against it.
pub fn assemble_batch(
    samples: &[&str],
    sampler: &dyn PhraseSampler,
    config: &SamplerConfig,
    vocab: &StaticVocab,
    seed: u64,
) -> Result<TrainBatch> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "a batch needs at least one sample".into(),
        ));
    }
    let cap = config.max_phrases.saturating_mul(samples.len());
    let surfaces = sample_documents(sampler, samples, &config.with_seed(seed), cap);
    let table = PhraseTable::from_candidates(vocab, surfaces, config.min_phrase_tokens);
    encode_batch(samples, table, vocab)
}

/// Encode `samples` against a fixed table.
pub fn encode_batch(
    samples: &[&str],
    table: PhraseTable,
    vocab: &StaticVocab,
) -> Result<TrainBatch> {
    let tok = DvaTokenizer::new(vocab, &table)?;
    let sequences: Vec<MixedSequence> = samples.iter().map(|s| tok.encode(s)).collect();
    let mut inputs = Vec::with_capacity(samples.len());
    let mut target_rows = Vec::with_capacity(samples.len());
    for seq in &sequences {
        let mut row = Vec::with_capacity(seq.ids.len() + 1);
        row.push(vocab.bos_id());
        row.extend_from_slice(&seq.ids);
        let mut tgt = seq.ids.clone();
        tgt.push(vocab.eos_id());
        inputs.push(row);
        target_rows.push(tgt);
    }
    let input = BatchInput::right_padded(&inputs, vocab.pad_id());
    let mut targets = vec![None; input.ids.len()];
    for (b, tgt) in target_rows.iter().enumerate() {
        for (t, &id) in tgt.iter().enumerate() {
            targets[b * input.time + t] = Some(id);
        }
    }
    Ok(TrainBatch {
        sequences,
        table,
        input,
        targets,
    })
}

/// Mean cross-entropy of `logits` (`batch × time × (|V|+m)`) against the
/// batch targets, skipping padding. Token and phrase targets weigh equally.
pub fn compute_loss(logits: &Array3<f64>, batch: &TrainBatch) -> Result<f64> {
    let (b, t, _) = logits.dim();
    if b != batch.input.batch || t != batch.input.time {
        return Err(Error::ShapeMismatch(format!(
            "logits {b}x{t} for batch {}x{}",
            batch.input.batch, batch.input.time
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, target) in batch.targets.iter().enumerate() {
        let Some(target) = *target else { continue };
        let row: Vec<f64> = logits.slice(ndarray::s![r / t, r % t, ..]).to_vec();
        if target as usize >= row.len() {
            return Err(Error::IdOutOfRange {
                id: target,
                size: row.len(),
            });
        }
        total += kernels::log_sum_exp(&row) - row[target as usize];
        count += 1;
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
}

impl Adam {
    pub fn new(learning_rate: f64, n_params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// Start a new step; call before [`Adam::update`] for each tensor.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, index: usize, param: &mut Array2<f64>, grad: &Array2<f64>) {
        let m = self.m[index].get_or_insert_with(|| Array2::zeros(grad.dim()));
        let v = self.v[index].get_or_insert_with(|| Array2::zeros(grad.dim()));
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        ndarray::Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
            });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub mode: TrainMode,
    #[serde(skip)]
    pub grad_norm: f64,
}

/// Owns optimizer state for one model under one training regime.
pub struct Trainer {
    config: TrainConfig,
    adam: Adam,
    step: usize,
}

impl Trainer {
    /// Prepares `model` for the configured mode; in LoRA mode adapters are
    /// attached if absent.
    pub fn new(model: &mut DvaModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.mode == TrainMode::Lora && model.config().lora.is_none() {
            model.attach_lora(
                config.lora_rank,
                config.lora_alpha,
                mix_seed(config.seed, 0x10a),
            )?;
        }
        Ok(Self {
            adam: Adam::new(config.learning_rate, model.params().len()),
            config,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Loss, backward pass, global-norm clipping and an update of the
    /// trainable groups only. Frozen tensors are never written.
    pub fn train_step(&mut self, model: &mut DvaModel, batch: &TrainBatch) -> Result<StepReport> {
        let (tape, leaves, loss_var) =
            model.tape_loss(&batch.input, &batch.table, &batch.targets)?;
        let loss = tape.scalar(loss_var);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                diagnostics: format!(
                    "loss={loss}, batch={}, time={}, phrases={}, targets={}",
                    batch.input.batch,
                    batch.input.time,
                    batch.table.len(),
                    batch.target_count()
                ),
            });
        }
        let mut grads = tape.backward(loss_var);
        let mode = self.config.mode;
        let mut updates: Vec<(usize, Array2<f64>)> = Vec::new();
        for (i, p) in model.params().iter().enumerate() {
            if mode.trains(p.group) {
                let g = grads
                    .take(leaves[i])
                    .unwrap_or_else(|| Array2::zeros(p.value.dim()));
                updates.push((i, g));
            }
        }
        let norm = updates
            .iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                diagnostics: format!("loss={loss}, gradient norm={norm}"),
            });
        }
        let clip = if norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };
        self.adam.tick();
        let params = model.params_mut();
        for (i, mut g) in updates {
            if clip != 1.0 {
                g *= clip;
            }
            self.adam.update(i, &mut params[i].value, &g);
        }
        let report = StepReport {
            step: self.step,
            loss,
            lr: self.config.learning_rate,
            mode,
            grad_norm: norm,
        };
        self.step += 1;
        Ok(report)
    }

    /// Run `config.steps` steps over seeded shuffles of `corpus`, writing
    /// one json line per step to `log` when given.
    pub fn fit(
        &mut self,
        model: &mut DvaModel,
        corpus: &DocumentSet,
        sampler: &dyn PhraseSampler,
        vocab: &StaticVocab,
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<StepReport>> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let texts: Vec<&str> = corpus.texts().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut order: Vec<usize> = Vec::new();
        let mut reports = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let mut picked = Vec::with_capacity(self.config.batch_size);
            while picked.len() < self.config.batch_size.min(texts.len()) {
                if order.is_empty() {
                    order = (0..texts.len()).collect();
                    order.shuffle(&mut rng);
                }
                picked.push(texts[order.pop().expect("refilled")]);
            }
            let seed = mix_seed(
                self.config.sampler.seed ^ self.config.seed,
                self.step as u64,
            );
            let batch = assemble_batch(&picked, sampler, &self.config.sampler, vocab, seed)?;
            let report = self.train_step(model, &batch)?;
            if let Some(w) = log.as_deref_mut() {
                let line =
                    serde_json::to_string(&report).map_err(|e| Error::Format(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| Error::io("<train log>", e))?;
            }
            reports.push(report);
        }
        Ok(reports)
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-tensor relative error, see [`relative_error`].
    pub max_relative_error: f64,
    pub worst_param: String,
    /// Largest elementwise `|a - n|`.
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Gradient norms below this are compared absolutely: central differences
/// in `f64` cannot resolve them.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// `‖a - n‖ / max(‖a‖, ‖n‖, GRAD_CHECK_FLOOR)` over one tensor.
pub fn relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let norm = |m: &Array2<f64>| m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric)).max(GRAD_CHECK_FLOOR);
    norm(&(analytic - numeric)) / scale
}

/// Central-difference check of every parameter element, including the path
/// through the phrase encoder and projector.
pub fn gradient_check(
    model: &DvaModel,
    batch: &TrainBatch,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let (tape, leaves, loss_var) = model.tape_loss(&batch.input, &batch.table, &batch.targets)?;
    let grads = tape.backward(loss_var);
    drop(tape);
    let loss_at = |m: &DvaModel| -> Result<f64> {
        let (t, _, l) = m.tape_loss(&batch.input, &batch.table, &batch.targets)?;
        Ok(t.scalar(l))
    };
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        max_abs_error: 0.0,
        checked: 0,
    };
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(*leaf)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(model.params()[i].value.dim()));
        let mut numeric = Array2::zeros(analytic.dim());
        for k in 0..analytic.len() {
            let idx = (k / analytic.ncols(), k % analytic.ncols());
            let orig = model.params()[i].value[idx];
            probe.params_mut()[i].value[idx] = orig + epsilon;
            let plus = loss_at(&probe)?;
            probe.params_mut()[i].value[idx] = orig - epsilon;
            let minus = loss_at(&probe)?;
            probe.params_mut()[i].value[idx] = orig;
            numeric[idx] = (plus - minus) / (2.0 * epsilon);
            report.max_abs_error = report
                .max_abs_error
                .max((numeric[idx] - analytic[idx]).abs());
            report.checked += 1;
        }
        let err = relative_error(&analytic, &numeric);
        if report.worst_param.is_empty() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_param = model.params()[i].name.clone();
        }
    }
    Ok(report)
}
