//! Text-embedding providers and the similarity math used by corpus
//! screening and retrieval.
//!
//! Two providers ship behind the [`Embedder`] trait, selected by name via
//! [`EmbedderRegistry`]:
//!
//! * `offline-hash` — signed feature hashing of character n-grams (orders
//!   1–3). Fully deterministic across runs and platforms, so screening and
//!   clustering tests run with zero network dependencies.
//! * `external-service` — a remote embedding endpoint speaking
//!   `{"model", "input": [...]}` → `{"vectors": [[...]]}`, with bounded
//!   retries and a content-hash disk cache.
//!
//! Every provider returns unit-L2 vectors; all similarity in the toolkit is
//! the plain dot product of unit vectors.

mod external;
mod offline;

pub use external::ExternalEmbedder;
pub use offline::OfflineHashEmbedder;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("transport error talking to {endpoint}: {detail}")]
    Transport { endpoint: String, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("cache i/o error: {0}")]
    Cache(#[from] std::io::Error),
    #[error("unknown embedder kind '{0}'")]
    UnknownKind(String),
    #[error("invalid embedder spec: {0}")]
    InvalidSpec(String),
}

/// A unit-L2-normalized text embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub provider_id: String,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Normalize in place; zero vectors are left untouched.
    pub fn normalize(&mut self) {
        let norm: f64 = self.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut self.vector {
                *v /= norm;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity of two unit vectors (their dot product).
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum())
}

/// A text-embedding provider.
pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Declarative embedder selection, written in config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub kind: String,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Remote endpoint for `external-service`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Model name forwarded to the remote service.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Disk cache directory for remote embeddings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<std::path::PathBuf>,
    /// Character n-gram orders for `offline-hash`.
    #[serde(default = "default_orders")]
    pub ngram_orders: Vec<usize>,
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            kind: "offline-hash".into(),
            dim: default_dim(),
            endpoint: None,
            model: None,
            cache_dir: None,
            ngram_orders: default_orders(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

fn default_dim() -> usize {
    256
}

fn default_orders() -> Vec<usize> {
    vec![1, 2, 3]
}

fn default_retries() -> usize {
    2
}

fn default_backoff_ms() -> u64 {
    50
}

type EmbedderFactory =
    Box<dyn Fn(&EmbedderSpec) -> Result<Box<dyn Embedder>, EmbedError> + Send + Sync>;

/// Name-keyed registry of embedding providers.
pub struct EmbedderRegistry {
    factories: BTreeMap<String, EmbedderFactory>,
}

impl Default for EmbedderRegistry {
    fn default() -> Self {
        let mut registry = EmbedderRegistry {
            factories: BTreeMap::new(),
        };
        registry.register("offline-hash", |spec| {
            Ok(Box::new(OfflineHashEmbedder::new(
                spec.dim,
                spec.ngram_orders.clone(),
            )?))
        });
        registry.register("external-service", |spec| {
            let endpoint = spec.endpoint.clone().ok_or_else(|| {
                EmbedError::InvalidSpec("external-service needs an 'endpoint'".into())
            })?;
            let model = spec.model.clone().unwrap_or_else(|| "default".into());
            let mut embedder = ExternalEmbedder::new(endpoint, model, spec.dim)
                .with_retries(spec.retries, spec.backoff_ms);
            if let Some(dir) = &spec.cache_dir {
                embedder = embedder.with_cache_dir(dir.clone());
            }
            Ok(Box::new(embedder))
        });
        registry
    }
}

impl EmbedderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, kind: &str, factory: F)
    where
        F: Fn(&EmbedderSpec) -> Result<Box<dyn Embedder>, EmbedError> + Send + Sync + 'static,
    {
        self.factories.insert(kind.to_string(), Box::new(factory));
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(|k| k.as_str())
    }

    pub fn build(&self, spec: &EmbedderSpec) -> Result<Box<dyn Embedder>, EmbedError> {
        let factory = self
            .factories
            .get(&spec.kind)
            .ok_or_else(|| EmbedError::UnknownKind(spec.kind.clone()))?;
        factory(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(vector: Vec<f64>) -> Embedding {
        let mut e = Embedding {
            vector,
            provider_id: "test".into(),
        };
        e.normalize();
        e
    }

    #[test]
    fn cosine_identical_is_one() {
        let a = unit(vec![0.3, -0.4, 0.5]);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        let a = unit(vec![1.0, 0.0]);
        let b = unit(vec![0.0, 1.0]);
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_halfway_case() {
        let a = unit(vec![1.0, 0.0]);
        let b = unit(vec![1.0, 1.0]);
        assert!((cosine(&a, &b).unwrap() - 0.7071067811865475).abs() < 1e-9);
    }

    #[test]
    fn cosine_dim_mismatch_errors() {
        let a = unit(vec![1.0, 0.0]);
        let b = unit(vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            cosine(&a, &b),
            Err(EmbedError::DimMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn registry_builds_offline_by_name() {
        let registry = EmbedderRegistry::new();
        let embedder = registry.build(&EmbedderSpec::default()).unwrap();
        assert_eq!(embedder.id(), "offline-hash");
        assert_eq!(embedder.dim(), 256);
        assert!(matches!(
            registry.build(&EmbedderSpec {
                kind: "nonesuch".into(),
                ..Default::default()
            }),
            Err(EmbedError::UnknownKind(_))
        ));
    }
}
