//! Concept-description retrieval by cosine similarity.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::RetryPolicy;
use crate::hex;
use crate::taxonomy::Taxonomy;
use crate::text::words;

pub const DEFAULT_TOP_K: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("embedder returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding dimension {got} differs from knowledge-base dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding request failed: {0}")]
    Remote(String),
    #[error("embedder misconfigured: {0}")]
    Config(String),
}

#[async_trait]
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError>;
}

/// Term-frequency vectors over a fixed vocabulary, L2-normalized. Texts with
/// no vocabulary word map to the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LexicalEmbedder {
    vocab: BTreeMap<String, usize>,
}

impl LexicalEmbedder {
    /// Vocabulary is every word occurring in `corpus`.
    pub fn fit<S: AsRef<str>>(corpus: &[S]) -> Self {
        let words: BTreeSet<String> = corpus.iter().flat_map(|t| words(t.as_ref())).collect();
        Self {
            vocab: words.into_iter().enumerate().map(|(i, w)| (w, i)).collect(),
        }
    }

    pub fn for_taxonomy(taxonomy: &Taxonomy) -> Self {
        let docs: Vec<&str> = taxonomy.concepts().iter().map(|c| c.description.as_str()).collect();
        Self::fit(&docs)
    }

    pub fn dimension(&self) -> usize {
        self.vocab.len()
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.vocab.len()];
        for w in words(text) {
            if let Some(&i) = self.vocab.get(&w) {
                v[i] += 1.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

#[async_trait]
impl Embedder for LexicalEmbedder {
    fn name(&self) -> &str {
        "lexical-tf"
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Client for OpenAI-style `/embeddings` endpoints.
pub struct RemoteEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::Client,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key_env: Option<&str>,
        retry: RetryPolicy,
    ) -> Result<Self, RetrievalError> {
        let api_key = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                RetrievalError::Config(format!("environment variable `{var}` holding the API key is not set"))
            })?),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| RetrievalError::Config(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            retry,
            client,
        })
    }

    async fn post(&self, texts: &[String]) -> Result<Value, (bool, String)> {
        let mut req = self
            .client
            .post(&self.endpoint)
            .json(&json!({ "model": self.model, "input": texts }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        let body = resp.text().await.map_err(|e| (true, e.to_string()))?;
        if !status.is_success() {
            let retryable = status.as_u16() == 429 || status.as_u16() == 408 || status.is_server_error();
            return Err((retryable, format!("HTTP {status}: {body}")));
        }
        serde_json::from_str(&body).map_err(|e| (false, e.to_string()))
    }
}

#[async_trait]
impl Embedder for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.model
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let mut failed = 0;
        let body = loop {
            match self.post(texts).await {
                Ok(v) => break v,
                Err((retryable, msg)) => {
                    failed += 1;
                    if !retryable || failed >= self.retry.max_attempts {
                        return Err(RetrievalError::Remote(msg));
                    }
                    tokio::time::sleep(self.retry.delay(failed, None)).await;
                }
            }
        };
        let data = body
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| RetrievalError::Remote("response has no `data` array".into()))?;
        let mut indexed = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let vector = item
                .get("embedding")
                .and_then(Value::as_array)
                .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                .ok_or_else(|| RetrievalError::Remote("malformed `embedding`".into()))?;
            indexed.push((index, vector));
        }
        indexed.sort_by_key(|(i, _)| *i);
        if indexed.len() != texts.len() {
            return Err(RetrievalError::CountMismatch {
                expected: texts.len(),
                got: indexed.len(),
            });
        }
        Ok(indexed.into_iter().map(|(_, v)| v).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedConcept {
    pub concept_id: String,
    pub score: f64,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
struct KbEntry {
    concept_id: String,
    description: String,
    vector: Vec<f64>,
    norm: f64,
}

/// Embedded concept descriptions, one document per concept.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    entries: Vec<KbEntry>,
    dimension: usize,
    embedder: String,
}

impl KnowledgeBase {
    pub async fn build(taxonomy: &Taxonomy, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        let docs: Vec<(String, String)> = taxonomy
            .concepts()
            .iter()
            .map(|c| (c.id.clone(), c.description.clone()))
            .collect();
        Self::from_documents(docs, embedder).await
    }

    pub async fn from_documents(
        docs: Vec<(String, String)>,
        embedder: &dyn Embedder,
    ) -> Result<Self, RetrievalError> {
        let texts: Vec<String> = docs.iter().map(|(_, d)| d.clone()).collect();
        let vectors = embedder.embed(&texts).await?;
        if vectors.len() != docs.len() {
            return Err(RetrievalError::CountMismatch {
                expected: docs.len(),
                got: vectors.len(),
            });
        }
        let dimension = vectors.first().map_or(0, Vec::len);
        let mut entries = Vec::with_capacity(docs.len());
        for ((concept_id, description), vector) in docs.into_iter().zip(vectors) {
            if vector.len() != dimension {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dimension,
                    got: vector.len(),
                });
            }
            entries.push(KbEntry {
                norm: norm(&vector),
                concept_id,
                description,
                vector,
            });
        }
        Ok(Self {
            entries,
            dimension,
            embedder: embedder.name().to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// SHA-256 over the embedder name, ids, descriptions and vectors.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.embedder.as_bytes());
        for e in &self.entries {
            h.update([0]);
            h.update(e.concept_id.as_bytes());
            h.update([0]);
            h.update(e.description.as_bytes());
            for x in &e.vector {
                h.update(x.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Top-`k` concepts by cosine similarity to `query`, optionally limited
    /// to `scope`. Ties break by concept id. Zero-norm documents are never
    /// returned, and a zero-norm query returns nothing.
    pub fn rank(
        &self,
        query: &[f64],
        scope: Option<&BTreeSet<String>>,
        k: usize,
    ) -> Result<Vec<RetrievedConcept>, RetrievalError> {
        if query.len() != self.dimension && !self.entries.is_empty() {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dimension,
                got: query.len(),
            });
        }
        let qn = norm(query);
        if qn == 0.0 {
            return Ok(Vec::new());
        }
        let mut hits: Vec<RetrievedConcept> = self
            .entries
            .iter()
            .filter(|e| e.norm > 0.0)
            .filter(|e| scope.is_none_or(|s| s.contains(&e.concept_id)))
            .map(|e| RetrievedConcept {
                concept_id: e.concept_id.clone(),
                score: dot(query, &e.vector) / (qn * e.norm),
                description: e.description.clone(),
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.concept_id.cmp(&b.concept_id)));
        hits.truncate(k);
        Ok(hits)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Embeds queries and ranks them against a knowledge base.
#[derive(Clone)]
pub struct Retriever {
    kb: Arc<KnowledgeBase>,
    embedder: Arc<dyn Embedder>,
    pub k: usize,
}

impl Retriever {
    pub fn new(kb: Arc<KnowledgeBase>, embedder: Arc<dyn Embedder>) -> Self {
        Self {
            kb,
            embedder,
            k: DEFAULT_TOP_K,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn knowledge_base(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub async fn retrieve(
        &self,
        query: &str,
        scope: Option<&BTreeSet<String>>,
    ) -> Result<Vec<RetrievedConcept>, RetrievalError> {
        let mut vectors = self.embedder.embed(&[query.to_string()]).await?;
        if vectors.len() != 1 {
            return Err(RetrievalError::CountMismatch {
                expected: 1,
                got: vectors.len(),
            });
        }
        self.kb.rank(&vectors.remove(0), scope, self.k)
    }
}
