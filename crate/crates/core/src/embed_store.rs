//! Per-document embedding vectors and exact cosine retrieval.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero-norm vector{}", .0.as_ref().map(|d| format!(" for `{d}`")).unwrap_or_default())]
    ZeroNormVector(Option<String>),
    #[error("empty vector for `{0}`")]
    EmptyVector(String),
    #[error("non-finite value in vector for `{0}`")]
    NonFinite(String),
    #[error("duplicate embedding for `{0}`")]
    DuplicateDocId(String),
    #[error("missing embedding for `{0}`")]
    MissingEmbedding(String),
    #[error("empty candidate pool")]
    EmptyPool,
    #[error("N must be at least 1")]
    ZeroN,
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("embedding endpoint: {0}")]
    Endpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One line of the embedding file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub doc_id: String,
    pub vector: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    dot(a, b) / (na * nb)
}

/// `(a . b) / (|a|_2 |b|_2)`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroNormVector(None));
    }
    Ok(cosine_with_norms(a, na, b, nb))
}

/// Descending similarity, ties by ascending doc_id.
pub(crate) fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

#[derive(Debug, Clone)]
struct Entry {
    values: Vec<f64>,
    norm: f64,
}

/// Immutable map of doc_id to embedding, all of one dimension.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    dimension: usize,
    vectors: BTreeMap<String, Entry>,
}

impl EmbeddingStore {
    pub fn new(vectors: impl IntoIterator<Item = EmbeddingVector>) -> Result<Self, EmbedError> {
        let mut store = EmbeddingStore::default();
        for v in vectors {
            store.insert(v)?;
        }
        Ok(store)
    }

    fn insert(&mut self, v: EmbeddingVector) -> Result<(), EmbedError> {
        if v.vector.is_empty() {
            return Err(EmbedError::EmptyVector(v.doc_id));
        }
        if v.vector.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite(v.doc_id));
        }
        if self.vectors.is_empty() {
            self.dimension = v.vector.len();
        } else if v.vector.len() != self.dimension {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dimension,
                actual: v.vector.len(),
            });
        }
        let n = norm(&v.vector);
        if n == 0.0 {
            return Err(EmbedError::ZeroNormVector(Some(v.doc_id)));
        }
        if self.vectors.contains_key(&v.doc_id) {
            return Err(EmbedError::DuplicateDocId(v.doc_id));
        }
        self.vectors.insert(
            v.doc_id,
            Entry {
                values: v.vector,
                norm: n,
            },
        );
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.vectors.contains_key(doc_id)
    }

    pub fn vector(&self, doc_id: &str) -> Option<&[f64]> {
        self.vectors.get(doc_id).map(|e| e.values.as_slice())
    }

    fn entry(&self, doc_id: &str) -> Result<&Entry, EmbedError> {
        self.vectors
            .get(doc_id)
            .ok_or_else(|| EmbedError::MissingEmbedding(doc_id.to_string()))
    }

    /// Cosine similarity between two stored documents.
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64, EmbedError> {
        let (ea, eb) = (self.entry(a)?, self.entry(b)?);
        Ok(cosine_with_norms(&ea.values, ea.norm, &eb.values, eb.norm))
    }

    /// The `min(n, |candidates|)` candidates most similar to `target`, best first.
    /// The target itself is never returned.
    pub fn top_n_pool<S: AsRef<str>>(
        &self,
        target: &str,
        candidates: &[S],
        n: usize,
    ) -> Result<Vec<(String, f64)>, EmbedError> {
        if n == 0 {
            return Err(EmbedError::ZeroN);
        }
        let t = self.entry(target)?;
        let mut scored = Vec::with_capacity(candidates.len());
        for c in candidates {
            let c = c.as_ref();
            let e = self.entry(c)?;
            if c == target {
                continue;
            }
            scored.push((
                c.to_string(),
                cosine_with_norms(&t.values, t.norm, &e.values, e.norm),
            ));
        }
        scored.sort_by(rank_order);
        scored.dedup_by(|a, b| a.0 == b.0);
        scored.truncate(n);
        Ok(scored)
    }

    /// Mean similarity of the top-`n` pool.
    pub fn avg_topn_similarity<S: AsRef<str>>(
        &self,
        target: &str,
        candidates: &[S],
        n: usize,
    ) -> Result<f64, EmbedError> {
        let pool = self.top_n_pool(target, candidates, n)?;
        if pool.is_empty() {
            return Err(EmbedError::EmptyPool);
        }
        Ok(pool.iter().map(|(_, s)| s).sum::<f64>() / pool.len() as f64)
    }

    pub fn from_jsonl_path(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let mut store = EmbeddingStore::default();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: EmbeddingVector =
                serde_json::from_str(&line).map_err(|source| EmbedError::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    source,
                })?;
            store.insert(v)?;
        }
        Ok(store)
    }

    pub fn write_jsonl(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        for (doc_id, e) in &self.vectors {
            #[derive(Serialize)]
            struct Line<'a> {
                doc_id: &'a str,
                vector: &'a [f64],
            }
            serde_json::to_writer(
                &mut out,
                &Line {
                    doc_id,
                    vector: &e.values,
                },
            )?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// OpenAI-compatible embeddings endpoint (`{"input": [...]}` -> `{"data": [{"embedding": [...]}]}`).
#[derive(Debug, Clone)]
pub struct EmbeddingEndpoint {
    pub url: String,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub batch_size: usize,
    pub timeout: Duration,
}

impl EmbeddingEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        EmbeddingEndpoint {
            url: url.into(),
            model: None,
            api_key: None,
            batch_size: 32,
            timeout: Duration::from_secs(120),
        }
    }

    /// Embeds `(doc_id, text)` pairs, batch by batch, in input order.
    pub fn fetch(&self, docs: &[(String, String)]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        #[derive(Deserialize)]
        struct Datum {
            embedding: Vec<f64>,
            #[serde(default)]
            index: Option<usize>,
        }
        #[derive(Deserialize)]
        struct Response {
            data: Vec<Datum>,
        }

        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut out = Vec::with_capacity(docs.len());
        for batch in docs.chunks(self.batch_size.max(1)) {
            let mut body = serde_json::json!({
                "input": batch.iter().map(|(_, text)| text.as_str()).collect::<Vec<_>>(),
            });
            if let Some(model) = &self.model {
                body["model"] = serde_json::Value::String(model.clone());
            }
            let mut req = agent.post(&self.url);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let mut resp = req
                .send_json(&body)
                .map_err(|e| EmbedError::Endpoint(e.to_string()))?;
            let status = resp.status();
            if !status.is_success() {
                return Err(EmbedError::Endpoint(format!("HTTP {status}")));
            }
            let mut parsed: Response = resp
                .body_mut()
                .read_json()
                .map_err(|e| EmbedError::Endpoint(format!("malformed response: {e}")))?;
            if parsed.data.len() != batch.len() {
                return Err(EmbedError::Endpoint(format!(
                    "expected {} embeddings, got {}",
                    batch.len(),
                    parsed.data.len()
                )));
            }
            if parsed.data.iter().all(|d| d.index.is_some()) {
                parsed.data.sort_by_key(|d| d.index);
            }
            for ((doc_id, _), datum) in batch.iter().zip(parsed.data) {
                out.push(EmbeddingVector {
                    doc_id: doc_id.clone(),
                    vector: datum.embedding,
                });
            }
        }
        Ok(out)
    }
}
