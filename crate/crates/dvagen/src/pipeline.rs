//! Loading the vocabulary, checkpoint, corpus and index into a ready
//! generator.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use dvagen_core::inference::Generator;
use dvagen_core::model::DvaModel;
use dvagen_core::retriever::{build_index, Embedder, RetrievalIndex, Retriever};
use dvagen_core::sampler::{CorpusIndex, SamplerContext, SamplerRegistry};
use dvagen_core::text::{load_corpus, DocumentSet, StaticVocab};

use crate::config::AppConfig;
use crate::error::{AppError, AppResult};

pub struct Pipeline {
    pub config: AppConfig,
    pub vocab: Arc<StaticVocab>,
    pub model: Arc<DvaModel>,
    pub generator: Generator,
}

pub(crate) fn require(path: &Path, what: &'static str) -> AppResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(AppError::MissingPath {
            what,
            path: path.to_path_buf(),
        })
    }
}

pub(crate) fn ensure_parent(path: &Path) -> AppResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
        }
        _ => Ok(()),
    }
}

impl Pipeline {
    /// Load from the configured paths. Retrieval is enabled when
    /// `generation.k_docs > 0`; a missing index file is built and saved.
    pub fn load(config: &AppConfig) -> AppResult<Self> {
        let paths = &config.paths;
        require(&paths.vocab, "vocabulary")?;
        require(&paths.checkpoint, "checkpoint")?;
        let vocab = StaticVocab::load(&paths.vocab)?;
        let model = DvaModel::load(&paths.checkpoint, &vocab)?;
        let documents = if config.generation.k_docs > 0 || config.sampler.strategy == "fmm" {
            require(&paths.corpus, "corpus")?;
            Some(load_corpus(&paths.corpus, paths.corpus_format)?)
        } else {
            None
        };
        let index_path = (config.generation.k_docs > 0).then_some(paths.index.as_path());
        Self::assemble(config, vocab, model, documents, index_path)
    }

    /// Build from in-memory parts; the index is always computed.
    pub fn from_parts(
        config: &AppConfig,
        vocab: StaticVocab,
        model: DvaModel,
        documents: Option<DocumentSet>,
    ) -> AppResult<Self> {
        Self::assemble(config, vocab, model, documents, None)
    }

    fn assemble(
        config: &AppConfig,
        vocab: StaticVocab,
        model: DvaModel,
        documents: Option<DocumentSet>,
        index_path: Option<&Path>,
    ) -> AppResult<Self> {
        let vocab = Arc::new(vocab);
        let model = Arc::new(model);
        let documents = documents.map(Arc::new);
        let corpus_index = documents
            .as_ref()
            .map(|d| CorpusIndex::build(d, &vocab).map(Arc::new))
            .transpose()?;
        let ctx = SamplerContext {
            vocab: vocab.clone(),
            corpus_index,
        };
        let sampler = SamplerRegistry::with_builtins().build(&config.sampler, &ctx)?;
        let retriever = match (&documents, config.generation.k_docs > 0) {
            (Some(docs), true) => {
                let embedder = Embedder::new(model.clone(), vocab.clone())?;
                let r = match index_path {
                    Some(p) if p.exists() => {
                        match Retriever::with_index(
                            embedder.clone(),
                            docs.clone(),
                            RetrievalIndex::load(p)?,
                        ) {
                            Err(dvagen_core::Error::FingerprintMismatch { .. }) => {
                                log::warn!(
                                    "index {} was built for another model; rebuilding",
                                    p.display()
                                );
                                let index = build_index(docs, &embedder)?;
                                index.save(p)?;
                                Retriever::with_index(embedder, docs.clone(), index)?
                            }
                            other => other?,
                        }
                    }
                    Some(p) => {
                        let index = build_index(docs, &embedder)?;
                        ensure_parent(p)?;
                        index.save(p)?;
                        Retriever::with_index(embedder, docs.clone(), index)?
                    }
                    None => Retriever::build(embedder, docs.clone())?,
                };
                Some(Arc::new(r))
            }
            _ => None,
        };
        let generator = Generator::new(
            model.clone(),
            vocab.clone(),
            retriever,
            sampler,
            config.sampler.clone(),
        )?;
        Ok(Self {
            config: config.clone(),
            vocab,
            model,
            generator,
        })
    }
}
