//! Generation metrics, throughput benchmarks and stage profiling, with text
//! tables and SVG charts for the reports.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::hash::Hash;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{GenerationConfig, GenerationSession, Generator, StageTimings};
use crate::model::{BatchInput, DvaModel};
use crate::text::StaticVocab;
use crate::tokenizer::{MixedSequence, PhraseTable};

pub const MAUVE_NOTE: &str =
    "MAUVE is not computed: it needs an external reference embedding model";

/// Percentage of repeated n-grams: `100 * (1 - unique / total)`; 0 when the
/// sequence has no n-gram.
pub fn rep_n<T: Hash + Eq>(tokens: &[T], n: usize) -> f64 {
    if n == 0 || tokens.len() < n {
        return 0.0;
    }
    let grams: Vec<&[T]> = tokens.windows(n).collect();
    let unique: HashSet<&[T]> = grams.iter().copied().collect();
    100.0 * (1.0 - unique.len() as f64 / grams.len() as f64)
}

/// `100 * prod_{n=2..4} (1 - rep_n / 100)`.
pub fn diversity<T: Hash + Eq>(tokens: &[T]) -> Result<f64> {
    if tokens.len() < 5 {
        return Err(Error::InvalidArgument(format!(
            "diversity needs at least 5 tokens, got {}",
            tokens.len()
        )));
    }
    Ok(diversity_from_reps([
        rep_n(tokens, 2),
        rep_n(tokens, 3),
        rep_n(tokens, 4),
    ]))
}

/// Combine rep-2, rep-3 and rep-4 percentages into a diversity percentage.
pub fn diversity_from_reps(reps: [f64; 3]) -> f64 {
    100.0 * reps.iter().map(|r| 1.0 - r / 100.0).product::<f64>()
}

/// Emitted ids per static token of the same text.
pub fn nsl(generated: &MixedSequence, baseline_token_count: usize) -> Result<f64> {
    ratio(
        generated.ids.len(),
        baseline_token_count,
        "baseline token count",
    )
}

/// UTF-8 bytes per emitted id.
pub fn bytes_per_token(text: &str, id_count: usize) -> Result<f64> {
    ratio(text.len(), id_count, "id count")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Word-level longest-common-subsequence overlap.
pub fn rouge_l(candidate: &str, reference: &str) -> Result<RougeL> {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if c.is_empty() || r.is_empty() {
        return Err(Error::InvalidArgument(
            "rouge_l needs nonempty texts".into(),
        ));
    }
    let mut prev = vec![0usize; r.len() + 1];
    let mut cur = vec![0usize; r.len() + 1];
    for cw in &c {
        for (j, rw) in r.iter().enumerate() {
            cur[j + 1] = if cw == rw {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let lcs = prev[r.len()] as f64;
    let precision = lcs / c.len() as f64;
    let recall = lcs / r.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(RougeL {
        precision,
        recall,
        f1,
    })
}

/// Sequences longer than the model window are truncated.
fn ppl_rows(vocab: &StaticVocab, texts: &[&str], max_len: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
    texts
        .iter()
        .map(|t| {
            let ids = vocab.encode(t);
            let mut input = vec![vocab.bos_id()];
            input.extend(&ids);
            let mut targets = ids;
            targets.push(vocab.eos_id());
            input.truncate(max_len);
            targets.truncate(max_len);
            (input, targets)
        })
        .collect()
}

/// Exponentiated mean next-token NLL over static targets (each text's ids
/// followed by EOS), scored with an empty phrase table.
///
/// Each NLL is split as `ln S + (max - target)` with `S` the shifted softmax
/// denominator, and the geometric mean of `S` is taken exactly when every
/// position shares one denominator.
pub fn perplexity(model: &DvaModel, vocab: &StaticVocab, texts: &[&str]) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::InvalidArgument(
            "perplexity needs at least one text".into(),
        ));
    }
    let exp = model.expand(&PhraseTable::empty(vocab))?;
    let rows = ppl_rows(vocab, texts, model.config().max_seq_len);
    let mut denominators = Vec::new();
    let mut margins = Vec::new();
    for chunk in rows.chunks(16) {
        let inputs: Vec<Vec<u32>> = chunk.iter().map(|r| r.0.clone()).collect();
        let logits = model.forward(&BatchInput::right_padded(&inputs, vocab.pad_id()), &exp)?;
        for (b, (_, targets)) in chunk.iter().enumerate() {
            for (t, &y) in targets.iter().enumerate() {
                let row = logits.slice(ndarray::s![b, t, ..]);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                denominators.push(row.iter().map(|l| (l - m).exp()).sum::<f64>());
                margins.push(m - row[y as usize]);
            }
        }
    }
    let n = margins.len() as f64;
    let geo = if denominators.iter().all(|&s| s == denominators[0]) {
        denominators[0]
    } else {
        (denominators.iter().map(|s| s.ln()).sum::<f64>() / n).exp()
    };
    Ok(geo * (margins.iter().sum::<f64>() / n).exp())
}

/// Column order follows the usual generation-quality table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mauve: Option<f64>,
    pub mauve_note: String,
    pub rep_2: f64,
    pub rep_3: f64,
    pub rep_4: f64,
    pub diversity: f64,
    pub ppl: f64,
    pub nsl: f64,
    pub bytes_per_token: f64,
    pub rouge_l_p: f64,
    pub rouge_l_r: f64,
    pub rouge_l_f: f64,
}

/// Score generated continuations against references. Repetition and
/// diversity are averaged per sample over the static re-encoding of the
/// generated text; compression metrics pool all samples.
pub fn evaluate(
    model: &DvaModel,
    vocab: &StaticVocab,
    sessions: &[GenerationSession],
    references: &[&str],
) -> Result<MetricsReport> {
    if sessions.is_empty() || sessions.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sessions for {} references",
            sessions.len(),
            references.len()
        )));
    }
    let (mut reps, mut div) = ([0.0; 3], 0.0);
    let (mut div_n, mut ids, mut static_tokens, mut bytes) = (0usize, 0usize, 0usize, 0usize);
    let mut rouge = [0.0; 3];
    for (s, r) in sessions.iter().zip(references) {
        let toks = vocab.encode(&s.text);
        for (k, n) in (2..=4).enumerate() {
            reps[k] += rep_n(&toks, n);
        }
        if let Ok(d) = diversity(&toks) {
            div += d;
            div_n += 1;
        }
        ids += s.ids.len();
        static_tokens += toks.len();
        bytes += s.text.len();
        let rl = if s.text.is_empty() {
            RougeL {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
            }
        } else {
            rouge_l(&s.text, r)?
        };
        rouge[0] += rl.precision;
        rouge[1] += rl.recall;
        rouge[2] += rl.f1;
    }
    let n = sessions.len() as f64;
    let ppl = perplexity(model, vocab, references)?;
    Ok(MetricsReport {
        mauve: None,
        mauve_note: MAUVE_NOTE.into(),
        rep_2: reps[0] / n,
        rep_3: reps[1] / n,
        rep_4: reps[2] / n,
        diversity: if div_n == 0 { 0.0 } else { div / div_n as f64 },
        ppl,
        nsl: ratio(ids, static_tokens, "static token count")?,
        bytes_per_token: ratio(bytes, ids, "id count")?,
        rouge_l_p: rouge[0] / n,
        rouge_l_r: rouge[1] / n,
        rouge_l_f: rouge[2] / n,
    })
}

fn ratio(num: usize, den: usize, what: &str) -> Result<f64> {
    if den == 0 {
        return Err(Error::InvalidArgument(format!("{what} must be >= 1")));
    }
    Ok(num as f64 / den as f64)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

/// Aligned text table, one row per named report.
pub fn format_metrics_table(rows: &[(&str, &MetricsReport)]) -> String {
    let header = [
        "Model",
        "MAUVE",
        "Rep-2",
        "Rep-3",
        "Rep-4",
        "Diversity",
        "PPL",
        "NSL",
        "Bytes/Tok",
        "ROUGE-L F",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r)| {
            vec![
                name.to_string(),
                fmt_opt(r.mauve),
                format!("{:.2}", r.rep_2),
                format!("{:.2}", r.rep_3),
                format!("{:.2}", r.rep_4),
                format!("{:.2}", r.diversity),
                format!("{:.2}", r.ppl),
                format!("{:.3}", r.nsl),
                format!("{:.3}", r.bytes_per_token),
                format!("{:.3}", r.rouge_l_f),
            ]
        })
        .collect();
    align(&header, &body)
}

fn align(header: &[&str], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec(), &mut out);
    for row in body {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageFractions {
    pub retrieval: f64,
    pub sampling: f64,
    pub generation: f64,
}

impl StageFractions {
    pub fn from_timings(t: &StageTimings) -> Self {
        let total = t.total().as_secs_f64();
        if total == 0.0 {
            return Self {
                retrieval: 0.0,
                sampling: 0.0,
                generation: 1.0,
            };
        }
        let retrieval = t.retrieval.as_secs_f64() / total;
        let sampling = t.sampling.as_secs_f64() / total;
        Self {
            retrieval,
            sampling,
            generation: 1.0 - retrieval - sampling,
        }
    }

    pub fn sum(&self) -> f64 {
        self.retrieval + self.sampling + self.generation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub variant: String,
    pub batch_size: usize,
    pub elapsed_seconds: f64,
    pub ids_per_second: f64,
    pub bytes_per_second: f64,
    pub stage_fractions: StageFractions,
}

pub fn ids_per_second(batch_size: usize, forced_length: usize, elapsed: Duration) -> f64 {
    (batch_size * forced_length) as f64 / elapsed.as_secs_f64()
}

fn sorted_sizes(batch_sizes: &[usize]) -> Vec<usize> {
    let mut sizes = batch_sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
}

fn batch_prefixes<'a>(pool: &[&'a str], n: usize) -> Result<Vec<&'a str>> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("no benchmark prefixes".into()));
    }
    Ok((0..n).map(|i| pool[i % pool.len()]).collect())
}

/// Forced-length decoding throughput per batch size, timed over the
/// generation stage only. Repeats cycle through all sizes in turn and the
/// fastest run per size is reported. Rows come back sorted by batch size.
pub fn benchmark_throughput(
    variant: &str,
    generator: &Generator,
    prefixes: &[&str],
    batch_sizes: &[usize],
    config: &GenerationConfig,
    repeats: usize,
) -> Result<Vec<ThroughputRow>> {
    if config.min_new_ids != config.max_new_ids || config.max_new_ids == 0 {
        return Err(Error::InvalidArgument(
            "throughput needs min_new_ids == max_new_ids >= 1".into(),
        ));
    }
    let sizes = sorted_sizes(batch_sizes);
    let batches = sizes
        .iter()
        .map(|&bs| batch_prefixes(prefixes, bs))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Vec<Option<(Duration, usize, StageTimings)>> = vec![None; sizes.len()];
    for _ in 0..repeats.max(1) {
        for (slot, batch) in best.iter_mut().zip(&batches) {
            let out = generator.generate_batch(batch, config)?;
            let bytes = out.sessions.iter().map(|s| s.text.len()).sum();
            if slot.map_or(true, |b| out.timings.generation < b.0) {
                *slot = Some((out.timings.generation, bytes, out.timings));
            }
        }
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for (&bs, slot) in sizes.iter().zip(best) {
        let (elapsed, bytes, timings) = slot.expect("at least one repeat");
        let secs = elapsed.as_secs_f64().max(f64::MIN_POSITIVE);
        rows.push(ThroughputRow {
            variant: variant.into(),
            batch_size: bs,
            elapsed_seconds: secs,
            ids_per_second: ids_per_second(bs, config.max_new_ids, Duration::from_secs_f64(secs)),
            bytes_per_second: bytes as f64 / secs,
            stage_fractions: StageFractions::from_timings(&timings),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub batch_size: usize,
    pub retrieval_seconds: f64,
    pub sampling_seconds: f64,
    pub generation_seconds: f64,
    pub fractions: StageFractions,
}

/// Wall-clock split across retrieval, phrase sampling and generation per
/// batch size. Repeats cycle through all sizes; each stage keeps its
/// fastest time.
pub fn profile_inference(
    generator: &Generator,
    prefixes: &[&str],
    batch_sizes: &[usize],
    config: &GenerationConfig,
    repeats: usize,
) -> Result<Vec<ProfileRow>> {
    let sizes = sorted_sizes(batch_sizes);
    let batches = sizes
        .iter()
        .map(|&bs| batch_prefixes(prefixes, bs))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Vec<Option<StageTimings>> = vec![None; sizes.len()];
    for _ in 0..repeats.max(1) {
        for (slot, batch) in best.iter_mut().zip(&batches) {
            let t = generator.generate_batch(batch, config)?.timings;
            *slot = Some(match *slot {
                None => t,
                Some(b) => StageTimings {
                    retrieval: b.retrieval.min(t.retrieval),
                    sampling: b.sampling.min(t.sampling),
                    generation: b.generation.min(t.generation),
                },
            });
        }
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for (&bs, slot) in sizes.iter().zip(best) {
        let t = slot.expect("at least one repeat");
        rows.push(ProfileRow {
            batch_size: bs,
            retrieval_seconds: t.retrieval.as_secs_f64(),
            sampling_seconds: t.sampling.as_secs_f64(),
            generation_seconds: t.generation.as_secs_f64(),
            fractions: StageFractions::from_timings(&t),
        });
    }
    Ok(rows)
}

pub fn format_throughput_table(rows: &[ThroughputRow]) -> String {
    let header = [
        "Variant",
        "Batch",
        "Seconds",
        "Ids/s",
        "Bytes/s",
        "Retrieval",
        "Sampling",
        "Generation",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                r.batch_size.to_string(),
                format!("{:.4}", r.elapsed_seconds),
                format!("{:.1}", r.ids_per_second),
                format!("{:.1}", r.bytes_per_second),
                format!("{:.3}", r.stage_fractions.retrieval),
                format!("{:.3}", r.stage_fractions.sampling),
                format!("{:.3}", r.stage_fractions.generation),
            ]
        })
        .collect();
    align(&header, &body)
}

pub fn format_profile_table(rows: &[ProfileRow]) -> String {
    let header = ["Batch", "Retrieval", "Sampling", "Generation"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.batch_size.to_string(),
                format!("{:.3}", r.fractions.retrieval),
                format!("{:.3}", r.fractions.sampling),
                format!("{:.3}", r.fractions.generation),
            ]
        })
        .collect();
    align(&header, &body)
}

const PALETTE: [&str; 6] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1",
];
const STAGE_COLORS: [&str; 3] = ["#e15759", "#f28e2b", "#4e79a7"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One grouped bar panel: x groups are batch sizes, one bar per variant.
fn bar_panel(
    out: &mut String,
    rows: &[ThroughputRow],
    value: fn(&ThroughputRow) -> f64,
    title: &str,
    x0: f64,
) {
    let (w, h, top) = (360.0, 220.0, 40.0);
    let mut variants: Vec<&str> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
        if !sizes.contains(&r.batch_size) {
            sizes.push(r.batch_size);
        }
    }
    sizes.sort_unstable();
    let max = rows
        .iter()
        .map(value)
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let _ = writeln!(out, r#"<g class="panel" transform="translate({x0},0)">"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<line x1="40" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + h,
        w,
        top + h
    );
    let group = (w - 50.0) / sizes.len().max(1) as f64;
    let bar = group * 0.8 / variants.len().max(1) as f64;
    for (gi, bs) in sizes.iter().enumerate() {
        let gx = 45.0 + gi as f64 * group;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{bs}</text>"#,
            gx + group * 0.4,
            top + h + 14.0
        );
        for (vi, v) in variants.iter().enumerate() {
            let Some(r) = rows.iter().find(|r| r.batch_size == *bs && r.variant == *v) else {
                continue;
            };
            let bh = value(r) / max * h;
            let _ = writeln!(
                out,
                r#"<rect class="bar" data-variant="{}" data-batch="{bs}" data-value="{:.3}" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                escape(v),
                value(r),
                gx + vi as f64 * bar,
                top + h - bh,
                bar,
                bh,
                PALETTE[vi % PALETTE.len()]
            );
        }
    }
    for (vi, v) in variants.iter().enumerate() {
        let y = top + h + 30.0 + vi as f64 * 14.0;
        let _ = writeln!(
            out,
            r#"<rect x="45" y="{}" width="10" height="10" fill="{}"/><text x="60" y="{}" font-size="11">{}</text>"#,
            y - 9.0,
            PALETTE[vi % PALETTE.len()],
            y,
            escape(v)
        );
    }
    out.push_str("</g>\n");
}

/// Ids/sec and bytes/sec bars per batch size, one color per variant.
pub fn throughput_svg(rows: &[ThroughputRow]) -> String {
    let variants = rows
        .iter()
        .map(|r| &r.variant)
        .collect::<HashSet<_>>()
        .len();
    let height = 300 + 14 * variants;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="760" height="{height}" viewBox="0 0 760 {height}" font-family="sans-serif">"#
    );
    out.push('\n');
    bar_panel(&mut out, rows, |r| r.ids_per_second, "ids / second", 0.0);
    bar_panel(
        &mut out,
        rows,
        |r| r.bytes_per_second,
        "bytes / second",
        390.0,
    );
    out.push_str("</svg>\n");
    out
}

/// Stacked stage fractions per batch size.
pub fn stage_svg(rows: &[ProfileRow]) -> String {
    let (w, h, top) = (420.0, 220.0, 40.0);
    let mut out = String::from(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="560" height="320" viewBox="0 0 560 320" font-family="sans-serif">"#,
    );
    out.push('\n');
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">stage fractions</text>"#,
        w / 2.0
    );
    let slot = (w - 50.0) / rows.len().max(1) as f64;
    for (i, r) in rows.iter().enumerate() {
        let x = 45.0 + i as f64 * slot;
        let mut y = top + h;
        let parts = [
            ("retrieval", r.fractions.retrieval),
            ("sampling", r.fractions.sampling),
            ("generation", r.fractions.generation),
        ];
        for ((name, f), color) in parts.iter().zip(STAGE_COLORS) {
            let bh = f.max(0.0) * h;
            y -= bh;
            let _ = writeln!(
                out,
                r#"<rect class="stage" data-stage="{name}" data-batch="{}" data-value="{f:.6}" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{bh:.2}" fill="{color}"/>"#,
                r.batch_size,
                slot * 0.7
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
            x + slot * 0.35,
            top + h + 14.0,
            r.batch_size
        );
    }
    for (i, (name, color)) in ["retrieval", "sampling", "generation"]
        .iter()
        .zip(STAGE_COLORS)
        .enumerate()
    {
        let y = top + 14.0 + i as f64 * 16.0;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{y}" font-size="11">{name}</text>"#,
            w + 20.0,
            y - 9.0,
            w + 35.0
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;
    use std::sync::Arc;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::inference::Strategy;
    use crate::model::{ModelConfig, StackConfig};
    use crate::retriever::{Embedder, Retriever};
    use crate::sampler::{NTokenSampler, SamplerConfig};
    use crate::text::{DocumentSet, BOS, EOS, PAD, UNK};

    fn rep_oracle(tokens: &[u32], n: usize) -> f64 {
        if tokens.len() < n {
            return 0.0;
        }
        let total = tokens.len() - n + 1;
        let mut unique = 0;
        for i in 0..total {
            if (0..i).all(|j| tokens[j..j + n] != tokens[i..i + n]) {
                unique += 1;
            }
        }
        100.0 - 100.0 * unique as f64 / total as f64
    }

    fn lcs_oracle(a: &[&str], b: &[&str], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() || b.is_empty() {
            return 0;
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let v = if a[0] == b[0] {
            1 + lcs_oracle(&a[1..], &b[1..], memo)
        } else {
            lcs_oracle(&a[1..], b, memo).max(lcs_oracle(a, &b[1..], memo))
        };
        memo.insert((a.len(), b.len()), v);
        v
    }

    #[test]
    fn rep_n_examples() {
        let (a, b, c) = (0u32, 1, 2);
        assert_eq!(rep_n(&[a, b, a, b, c], 2), 25.0);
        assert_eq!(rep_n(&[1u32, 2, 3, 4, 5], 2), 0.0);
        assert!((rep_n(&[a, a, a, a], 2) - 100.0 * (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(rep_n(&[a], 2), 0.0);
    }

    #[test]
    fn diversity_examples() {
        let t = [0u32, 1, 0, 1, 2];
        assert_eq!(rep_n(&t, 3), 0.0);
        assert_eq!(rep_n(&t, 4), 0.0);
        assert!((diversity(&t).unwrap() - 75.0).abs() < 1e-12);
        assert_eq!(diversity(&[1u32, 2, 3, 4, 5, 6]).unwrap(), 100.0);
        assert_eq!(diversity_from_reps([25.0, 0.0, 0.0]), 75.0);
        assert_eq!(diversity_from_reps([100.0, 10.0, 20.0]), 0.0);
        assert!(diversity(&[1u32, 2, 3, 4]).is_err());
    }

    #[test]
    fn compression_examples() {
        let seq = MixedSequence {
            ids: vec![0, 1, 2],
            spans: Vec::new(),
        };
        assert!((nsl(&seq, 5).unwrap() - 0.6).abs() < 1e-15);
        assert!(nsl(&seq, 0).is_err());
        assert_eq!(bytes_per_token("the cat sat on mat", 3).unwrap(), 6.0);
        assert_eq!(bytes_per_token("the cat sat on mat", 5).unwrap(), 3.6);
        assert_eq!(bytes_per_token("é", 1).unwrap(), 2.0);
        assert!(bytes_per_token("x", 0).is_err());
    }

    #[test]
    fn rouge_examples() {
        let r = rouge_l("the cat sat", "the cat").unwrap();
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.recall, 1.0);
        assert!((r.f1 - 0.8).abs() < 1e-12);
        let same = rouge_l("a b c", "a b c").unwrap();
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        let none = rouge_l("a b", "c d").unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        assert!(rouge_l("", "a").is_err());
    }

    proptest! {
        #[test]
        fn metrics_match_oracles(
            tokens in prop::collection::vec(0u32..6, 0..200),
            words_a in prop::collection::vec(0usize..5, 1..40),
            words_b in prop::collection::vec(0usize..5, 1..40),
        ) {
            for n in 1..=4 {
                prop_assert!((rep_n(&tokens, n) - rep_oracle(&tokens, n)).abs() < 1e-9);
            }
            if tokens.len() >= 5 {
                let want = 100.0 * (2..=4).map(|n| 1.0 - rep_oracle(&tokens, n) / 100.0).product::<f64>();
                prop_assert!((diversity(&tokens).unwrap() - want).abs() < 1e-9);
            }
            let lex = ["a", "b", "c", "d", "e"];
            let a: Vec<&str> = words_a.iter().map(|&i| lex[i]).collect();
            let b: Vec<&str> = words_b.iter().map(|&i| lex[i]).collect();
            let l = lcs_oracle(&a, &b, &mut HashMap::new()) as f64;
            let r = rouge_l(&a.join(" "), &b.join(" ")).unwrap();
            let (p, rc) = (l / a.len() as f64, l / b.len() as f64);
            let f = if l == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
            prop_assert!((r.precision - p).abs() < 1e-9);
            prop_assert!((r.recall - rc).abs() < 1e-9);
            prop_assert!((r.f1 - f).abs() < 1e-9);
        }
    }

    fn vocab() -> StaticVocab {
        StaticVocab::from_entries([
            "the", "cat", "sat", "on", "mat", "a", "dog", "ran", UNK, BOS, EOS, PAD,
        ])
        .unwrap()
    }

    fn model(v: &StaticVocab, seed: u64) -> DvaModel {
        let cfg = ModelConfig {
            d_model: 8,
            max_seq_len: 40,
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
        let mut m = DvaModel::new(cfg, v, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in m.params_mut() {
            p.value.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        m
    }

    /// Token-by-token NLL through the cached runtime path, one text at a time.
    fn ppl_oracle(m: &DvaModel, v: &StaticVocab, texts: &[&str]) -> f64 {
        let exp = m.expand(&PhraseTable::empty(v)).unwrap();
        let (mut total, mut count) = (0.0, 0usize);
        for t in texts {
            let ids = v.encode(t);
            let mut st = m.start(1);
            let mut prev = v.bos_id();
            for &y in ids.iter().chain([v.eos_id()].iter()) {
                let h = m.advance(&mut st, &exp, &[prev], &[true]).unwrap();
                let logits = m.logits(h.view(), &exp);
                let z: f64 = logits.row(0).iter().map(|l| l.exp()).sum();
                total += z.ln() - logits[[0, y as usize]];
                count += 1;
                prev = y;
            }
        }
        (total / count as f64).exp()
    }

    #[test]
    fn perplexity_matches_nll_oracle() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed in 0..10 {
            let m = model(&v, seed);
            let texts: Vec<String> = (0..rng.gen_range(1..5))
                .map(|_| {
                    (0..rng.gen_range(0..10))
                        .map(|_| v.entries()[rng.gen_range(0..8)].as_str())
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let got = perplexity(&m, &v, &refs).unwrap();
            let want = ppl_oracle(&m, &v, &refs);
            assert!(((got - want) / want).abs() < 1e-9, "{got} vs {want}");
        }
        assert!(perplexity(&model(&v, 0), &v, &[]).is_err());
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let v = vocab();
        let mut m = model(&v, 3);
        m.param_mut("backbone.tok_out").unwrap().value.fill(0.0);
        let ppl = perplexity(&m, &v, &["the cat sat", "a dog ran on the mat", ""]).unwrap();
        assert_eq!(ppl, v.len() as f64);
    }

    #[test]
    fn throughput_arithmetic() {
        assert_eq!(ids_per_second(2, 16, Duration::from_millis(500)), 64.0);
        let t = StageTimings {
            retrieval: Duration::from_millis(30),
            sampling: Duration::from_millis(10),
            generation: Duration::from_millis(60),
        };
        let f = StageFractions::from_timings(&t);
        assert!((f.sum() - 1.0).abs() < 1e-12);
        assert!((f.retrieval - 0.3).abs() < 1e-12);
    }

    fn generator() -> Generator {
        let v = Arc::new(vocab());
        let m = Arc::new(model(&v, 5));
        let docs = DocumentSet::from_texts([
            "the cat sat on the mat",
            "a dog ran",
            "the dog sat on a cat",
        ]);
        let e = Embedder::new(m.clone(), v.clone()).unwrap();
        let r = Arc::new(Retriever::build(e, Arc::new(docs)).unwrap());
        let cfg = SamplerConfig {
            n: 2,
            ..SamplerConfig::default()
        };
        Generator::new(m, v.clone(), Some(r), Arc::new(NTokenSampler::new(v)), cfg).unwrap()
    }

    #[test]
    fn benchmark_and_profile_reports() {
        let g = generator();
        let cfg = GenerationConfig {
            min_new_ids: 6,
            max_new_ids: 6,
            k_docs: 2,
            ..GenerationConfig::default()
        };
        let rows =
            benchmark_throughput("dva", &g, &["the cat", "a dog"], &[4, 1, 2], &cfg, 2).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.batch_size).collect::<Vec<_>>(),
            vec![1, 2, 4]
        );
        for r in &rows {
            let want = (r.batch_size * 6) as f64 / r.elapsed_seconds;
            assert!((r.ids_per_second - want).abs() <= 1e-9 * want);
            assert!(r.bytes_per_second > 0.0);
            assert!((r.stage_fractions.sum() - 1.0).abs() < 1e-6);
        }
        let unforced = GenerationConfig {
            min_new_ids: 1,
            ..cfg.clone()
        };
        assert!(benchmark_throughput("dva", &g, &["x"], &[1], &unforced, 1).is_err());

        let prof = profile_inference(&g, &["the cat", "a dog"], &[2, 1], &cfg, 1).unwrap();
        assert_eq!(prof[0].batch_size, 1);
        for p in &prof {
            assert!((p.fractions.sum() - 1.0).abs() < 1e-6);
            assert!(
                p.retrieval_seconds >= 0.0
                    && p.sampling_seconds >= 0.0
                    && p.generation_seconds >= 0.0
            );
        }

        let svg = throughput_svg(&rows);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let bars: Vec<_> = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("bar"))
            .collect();
        assert_eq!(bars.len(), 6);
        let svg = stage_svg(&prof);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(
            doc.descendants()
                .filter(|n| n.attribute("class") == Some("stage"))
                .count(),
            6
        );

        let table = format_throughput_table(&rows);
        assert_eq!(table.lines().count(), 4);
        assert!(table.starts_with("Variant"));
    }

    #[test]
    fn evaluate_report() {
        let g = generator();
        let cfg = GenerationConfig {
            strategy: Strategy::Greedy,
            min_new_ids: 8,
            max_new_ids: 8,
            ..GenerationConfig::default()
        };
        let sessions = g
            .generate_batch(&["the cat", "a dog"], &cfg)
            .unwrap()
            .sessions;
        let refs = ["sat on the mat", "ran on the mat"];
        let r = evaluate(g.model(), g.vocab(), &sessions, &refs).unwrap();
        assert!(r.mauve.is_none());
        assert!(r.nsl > 0.0 && r.nsl <= 1.0);
        assert!(r.bytes_per_token > 0.0);
        assert!((0.0..=100.0).contains(&r.rep_2) && (0.0..=100.0).contains(&r.diversity));
        let ids: usize = sessions.iter().map(|s| s.ids.len()).sum();
        let toks: usize = sessions
            .iter()
            .map(|s| g.vocab().encode(&s.text).len())
            .sum();
        assert!((r.nsl - ids as f64 / toks as f64).abs() < 1e-12);
        let table = format_metrics_table(&[("dva", &r)]);
        assert!(table.contains("n/a"));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["mauve"].is_null());
        assert!(evaluate(g.model(), g.vocab(), &sessions, &refs[..1]).is_err());
    }
}
