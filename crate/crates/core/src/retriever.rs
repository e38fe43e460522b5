//! Dense document retrieval with exact cosine search. The backbone doubles
//! as the embedder: document vectors are mean-pooled final hidden states.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Axis;

use crate::error::{Error, Result};
use crate::model::{BatchInput, DvaModel, ExpandedEmbeddings};
use crate::text::{normalize_whitespace, Document, DocumentSet, StaticVocab, TokenId};
use crate::tokenizer::PhraseTable;

const INDEX_MAGIC: &[u8] = b"dva-index v1\n";
const EMBED_BATCH: usize = 16;

/// Backbone-based text embedder.
#[derive(Clone)]
pub struct Embedder {
    model: Arc<DvaModel>,
    vocab: Arc<StaticVocab>,
    exp: ExpandedEmbeddings,
}

impl Embedder {
    pub fn new(model: Arc<DvaModel>, vocab: Arc<StaticVocab>) -> Result<Self> {
        let exp = model.expand(&PhraseTable::empty(&vocab))?;
        Ok(Self { model, vocab, exp })
    }

    pub fn model(&self) -> &Arc<DvaModel> {
        &self.model
    }

    pub fn vocab(&self) -> &Arc<StaticVocab> {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.model.d_model()
    }

    /// `BOS` followed by the static encoding, truncated to the model's
    /// maximum length.
    fn ids(&self, text: &str) -> Result<Vec<TokenId>> {
        let norm = normalize_whitespace(text);
        if norm.is_empty() {
            return Err(Error::InvalidArgument("cannot embed empty text".into()));
        }
        let mut ids = vec![self.vocab.bos_id()];
        ids.extend(self.vocab.encode(&norm));
        ids.truncate(self.model.config().max_seq_len);
        Ok(ids)
    }

    /// Unit-norm mean of the final hidden states over the text positions
    /// (BOS excluded).
    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed_many(&[text])?.remove(0))
    }

    pub fn embed_many(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(EMBED_BATCH) {
            let rows = chunk
                .iter()
                .map(|t| self.ids(t))
                .collect::<Result<Vec<_>>>()?;
            let input = BatchInput::right_padded(&rows, self.vocab.pad_id());
            let mut state = self.model.start(input.batch);
            let hidden = self
                .model
                .advance(&mut state, &self.exp, &input.ids, &input.valid)?;
            for (b, row) in rows.iter().enumerate() {
                let text_rows = hidden.slice(ndarray::s![
                    b * input.time + 1..b * input.time + row.len(),
                    ..
                ]);
                let mean = if text_rows.nrows() == 0 {
                    hidden.row(b * input.time).to_owned()
                } else {
                    text_rows.mean_axis(Axis(0)).expect("nonempty")
                };
                out.push(unit(mean.to_vec()));
            }
        }
        Ok(out)
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Unit-norm document vectors (stored as `f32`) aligned with document ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    vectors: Vec<f32>,
    doc_ids: Vec<usize>,
    fingerprint: String,
}

impl RetrievalIndex {
    /// Build from precomputed unit vectors.
    pub fn from_vectors(
        vectors: &[Vec<f64>],
        doc_ids: Vec<usize>,
        fingerprint: String,
    ) -> Result<Self> {
        if vectors.len() != doc_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} vectors for {} doc ids",
                vectors.len(),
                doc_ids.len()
            )));
        }
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::ShapeMismatch(
                "index vectors differ in length".into(),
            ));
        }
        Ok(Self {
            dim,
            vectors: vectors.iter().flatten().map(|&x| x as f32).collect(),
            doc_ids,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn doc_ids(&self) -> &[usize] {
        &self.doc_ids
    }

    /// Fingerprint of the embedder weights the index was built with.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Top-`k` rows by cosine similarity to `query`, descending, ties to
    /// the lower doc id. `k` is clamped to the index size.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("retrieval index is empty".into()));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "query of width {} for index of width {}",
                query.len(),
                self.dim
            )));
        }
        let q = unit(query.to_vec());
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| {
                let s = self.row(i).iter().zip(&q).map(|(&a, b)| a as f64 * b).sum();
                (self.doc_ids[i], s)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Write the `dva-index v1` container.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
        put(INDEX_MAGIC)?;
        put(&(self.len() as u64).to_le_bytes())?;
        put(&(self.dim as u64).to_le_bytes())?;
        put(&(self.fingerprint.len() as u32).to_le_bytes())?;
        put(self.fingerprint.as_bytes())?;
        for v in &self.vectors {
            put(&v.to_le_bytes())?;
        }
        for id in &self.doc_ids {
            put(&(*id as u64).to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut cur = bytes.as_slice();
        let fmt = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(fmt("truncated index file"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(INDEX_MAGIC.len())? != INDEX_MAGIC {
            return Err(fmt("not a dva-index v1 file"));
        }
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
        let n = u64_at(take(8)?);
        let dim = u64_at(take(8)?);
        let fp_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let fingerprint = String::from_utf8(take(fp_len)?.to_vec())
            .map_err(|_| fmt("fingerprint is not utf-8"))?;
        let total = n
            .checked_mul(dim)
            .ok_or_else(|| fmt("index dimensions overflow"))?;
        let vectors = take(total * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let doc_ids = take(n * 8)?.chunks_exact(8).map(u64_at).collect();
        if !cur.is_empty() {
            return Err(fmt("trailing bytes"));
        }
        Ok(Self {
            dim,
            vectors,
            doc_ids,
            fingerprint,
        })
    }
}

/// One vector per document of `corpus`.
pub fn build_index(corpus: &DocumentSet, embedder: &Embedder) -> Result<RetrievalIndex> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let texts: Vec<&str> = corpus.texts().collect();
    let vectors = embedder.embed_many(&texts)?;
    let ids = corpus.documents().iter().map(|d| d.id).collect();
    RetrievalIndex::from_vectors(&vectors, ids, embedder.model().fingerprint())
}

/// Top-`k` documents for `prefix` by cosine similarity.
pub fn retrieve(
    prefix: &str,
    index: &RetrievalIndex,
    embedder: &Embedder,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let q = embedder.embed(prefix)?;
    index.search(&q, k)
}

/// An index together with the documents it covers.
#[derive(Clone)]
pub struct Retriever {
    embedder: Embedder,
    index: Arc<RetrievalIndex>,
    documents: Arc<DocumentSet>,
}

impl Retriever {
    pub fn build(embedder: Embedder, documents: Arc<DocumentSet>) -> Result<Self> {
        let index = Arc::new(build_index(&documents, &embedder)?);
        Ok(Self {
            embedder,
            index,
            documents,
        })
    }

    /// Attach a previously built index, checking it matches the embedder
    /// weights and the document set.
    pub fn with_index(
        embedder: Embedder,
        documents: Arc<DocumentSet>,
        index: RetrievalIndex,
    ) -> Result<Self> {
        let found = embedder.model().fingerprint();
        if index.fingerprint() != found {
            return Err(Error::FingerprintMismatch {
                expected: index.fingerprint().to_string(),
                found,
            });
        }
        if index
            .doc_ids()
            .iter()
            .any(|&id| documents.get(id).is_none())
        {
            return Err(Error::InvalidArgument(
                "index references documents outside the corpus".into(),
            ));
        }
        Ok(Self {
            embedder,
            index: Arc::new(index),
            documents,
        })
    }

    pub fn index(&self) -> &RetrievalIndex {
        &self.index
    }

    pub fn documents(&self) -> &DocumentSet {
        &self.documents
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn retrieve(&self, prefix: &str, k: usize) -> Result<Vec<(usize, f64)>> {
        retrieve(prefix, &self.index, &self.embedder, k)
    }

    /// The retrieved documents themselves, best first.
    pub fn retrieve_documents(&self, prefix: &str, k: usize) -> Result<Vec<&Document>> {
        Ok(self
            .retrieve(prefix, k)?
            .into_iter()
            .filter_map(|(id, _)| self.documents.get(id))
            .collect())
    }
}
