//! The `train`, `eval`, `chat` and `serve` entry points.

use std::fs::{self, File};
use std::io::{BufRead, BufWriter, Write};
use std::sync::Arc;

use dvagen_core::eval::{
    benchmark_throughput, evaluate, format_metrics_table, format_profile_table,
    format_throughput_table, profile_inference, stage_svg, throughput_svg, MetricsReport,
    ProfileRow, ThroughputRow,
};
use dvagen_core::inference::{GenerationConfig, GenerationSession};
use dvagen_core::model::DvaModel;
use dvagen_core::sampler::{CorpusIndex, SamplerContext, SamplerRegistry};
use dvagen_core::text::{load_corpus, StaticVocab};
use dvagen_core::trainer::{StepReport, Trainer};
use serde::Serialize;

use crate::chat::run_chat;
use crate::config::AppConfig;
use crate::error::{AppError, AppResult};
use crate::pipeline::{ensure_parent, require, Pipeline};
use crate::server::{serve, AppState};

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub checkpoint: String,
}

/// Train a model on the configured corpus and write the checkpoint and a
/// json-lines loss log. A vocabulary is trained and saved when none exists.
pub fn cmd_train(config: &AppConfig, out: &mut dyn Write) -> AppResult<TrainSummary> {
    let paths = &config.paths;
    require(&paths.corpus, "corpus")?;
    let corpus = load_corpus(&paths.corpus, paths.corpus_format)?;
    let vocab = if paths.vocab.exists() {
        StaticVocab::load(&paths.vocab)?
    } else {
        let v = StaticVocab::train(&corpus, config.vocab.size)?;
        ensure_parent(&paths.vocab)?;
        v.save(&paths.vocab)?;
        v
    };
    let vocab = Arc::new(vocab);
    let corpus_index = (config.train.sampler.strategy == "fmm")
        .then(|| CorpusIndex::build(&corpus, &vocab).map(Arc::new))
        .transpose()?;
    let ctx = SamplerContext {
        vocab: vocab.clone(),
        corpus_index,
    };
    let sampler = SamplerRegistry::with_builtins().build(&config.train.sampler, &ctx)?;
    let mut model = DvaModel::new(config.model.clone(), &vocab, config.train.seed)?;
    let mut trainer = Trainer::new(&mut model, config.train.clone())?;
    ensure_parent(&paths.train_log)?;
    let log_file = File::create(&paths.train_log).map_err(|e| AppError::io(&paths.train_log, e))?;
    let mut log = BufWriter::new(log_file);
    let reports: Vec<StepReport> = trainer.fit(
        &mut model,
        &corpus,
        sampler.as_ref(),
        &vocab,
        Some(&mut log),
    )?;
    log.flush().map_err(|e| AppError::io(&paths.train_log, e))?;
    ensure_parent(&paths.checkpoint)?;
    model.save(&paths.checkpoint)?;
    if paths.index.exists() {
        fs::remove_file(&paths.index).map_err(|e| AppError::io(&paths.index, e))?;
    }
    let summary = TrainSummary {
        steps: reports.len(),
        first_loss: reports.first().map_or(f64::NAN, |r| r.loss),
        final_loss: reports.last().map_or(f64::NAN, |r| r.loss),
        checkpoint: paths.checkpoint.display().to_string(),
    };
    writeln!(
        out,
        "trained {} steps ({} mode): loss {:.4} -> {:.4}; checkpoint {}",
        summary.steps,
        config.train.mode.as_str(),
        summary.first_loss,
        summary.final_loss,
        summary.checkpoint
    )
    .map_err(|e| AppError::io("<stdout>", e))?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub metrics: MetricsReport,
    pub samples: usize,
    pub throughput: Vec<ThroughputRow>,
    pub profile: Vec<ProfileRow>,
}

/// Prefixes and reference continuations from held-out texts.
pub fn split_test_texts(
    texts: &[&str],
    prefix_words: usize,
    max_samples: usize,
) -> Vec<(String, String)> {
    texts
        .iter()
        .filter_map(|t| {
            let words: Vec<&str> = t.split_whitespace().collect();
            (words.len() > prefix_words && prefix_words > 0).then(|| {
                (
                    words[..prefix_words].join(" "),
                    words[prefix_words..].join(" "),
                )
            })
        })
        .take(max_samples)
        .collect()
}

/// Generate for every prefix in batches of `batch_size`.
pub fn generate_all(
    pipeline: &Pipeline,
    prefixes: &[&str],
    batch_size: usize,
    config: &GenerationConfig,
) -> AppResult<Vec<GenerationSession>> {
    let mut sessions = Vec::with_capacity(prefixes.len());
    for chunk in prefixes.chunks(batch_size.max(1)) {
        sessions.extend(pipeline.generator.generate_batch(chunk, config)?.sessions);
    }
    Ok(sessions)
}

pub fn cmd_eval(config: &AppConfig, benchmark: bool, out: &mut dyn Write) -> AppResult<EvalOutput> {
    let io = |e| AppError::io("<stdout>", e);
    let pipeline = Pipeline::load(config)?;
    require(&config.paths.test, "test file")?;
    let test = load_corpus(&config.paths.test, config.paths.corpus_format)?;
    let texts: Vec<&str> = test.texts().collect();
    let pairs = split_test_texts(&texts, config.eval.prefix_words, config.eval.max_samples);
    if pairs.is_empty() {
        return Err(AppError::Config(format!(
            "no test text in {} is longer than eval.prefix_words = {}",
            config.paths.test.display(),
            config.eval.prefix_words
        )));
    }
    let prefixes: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
    let references: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
    let sessions = generate_all(
        &pipeline,
        &prefixes,
        config.eval.batch_size,
        &config.generation,
    )?;
    let metrics = evaluate(&pipeline.model, &pipeline.vocab, &sessions, &references)?;

    let (mut throughput, mut profile) = (Vec::new(), Vec::new());
    if benchmark {
        let forced = GenerationConfig {
            min_new_ids: config.eval.benchmark_length,
            max_new_ids: config.eval.benchmark_length,
            ..config.generation.clone()
        };
        let sizes = &config.eval.batch_sizes;
        let reps = config.eval.benchmark_repeats;
        throughput =
            benchmark_throughput("dva", &pipeline.generator, &prefixes, sizes, &forced, reps)?;
        let tokens_only = GenerationConfig {
            k_docs: 0,
            ..forced.clone()
        };
        throughput.extend(benchmark_throughput(
            "tokens",
            &pipeline.generator,
            &prefixes,
            sizes,
            &tokens_only,
            reps,
        )?);
        profile = profile_inference(&pipeline.generator, &prefixes, sizes, &forced, reps)?;
        let dir = &config.paths.report_dir;
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        for (name, svg) in [
            ("throughput.svg", throughput_svg(&throughput)),
            ("stages.svg", stage_svg(&profile)),
        ] {
            let p = dir.join(name);
            fs::write(&p, svg).map_err(|e| AppError::io(&p, e))?;
        }
    }
    let result = EvalOutput {
        metrics,
        samples: sessions.len(),
        throughput,
        profile,
    };
    let json = serde_json::to_string_pretty(&result).expect("report serializes");
    writeln!(out, "{json}").map_err(io)?;
    write!(out, "{}", format_metrics_table(&[("dva", &result.metrics)])).map_err(io)?;
    if benchmark {
        write!(out, "{}", format_throughput_table(&result.throughput)).map_err(io)?;
        write!(out, "{}", format_profile_table(&result.profile)).map_err(io)?;
        let p = config.paths.report_dir.join("report.json");
        fs::write(&p, &json).map_err(|e| AppError::io(&p, e))?;
    }
    Ok(result)
}

pub fn cmd_chat(config: &AppConfig, input: impl BufRead, output: impl Write) -> AppResult<i32> {
    let pipeline = Pipeline::load(config)?;
    run_chat(&pipeline.generator, &config.generation, input, output)
}

pub fn cmd_serve(config: &AppConfig) -> AppResult<()> {
    let pipeline = Pipeline::load(config)?;
    let state = Arc::new(AppState::new(&pipeline)?);
    let runtime = tokio::runtime::Runtime::new()
        .map_err(|e| AppError::Config(format!("tokio runtime: {e}")))?;
    runtime.block_on(serve(state, &config.server.host, config.server.port))
}
