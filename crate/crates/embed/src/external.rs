use crate::{EmbedError, Embedder, Embedding};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct WireResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for a remote embedding service.
///
/// Requests are retried with exponential backoff on transport errors and
/// 5xx statuses, and results are cached on disk keyed by the SHA-256 of
/// (model, text), so repeated corpus passes hit the network once per text.
pub struct ExternalEmbedder {
    endpoint: String,
    model: String,
    dim: usize,
    cache_dir: Option<PathBuf>,
    retries: usize,
    backoff_ms: u64,
    remote_calls: AtomicUsize,
}

impl ExternalEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, dim: usize) -> Self {
        ExternalEmbedder {
            endpoint: endpoint.into(),
            model: model.into(),
            dim,
            cache_dir: None,
            retries: 2,
            backoff_ms: 50,
            remote_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_cache_dir(mut self, dir: PathBuf) -> Self {
        self.cache_dir = Some(dir);
        self
    }

    pub fn with_retries(mut self, retries: usize, backoff_ms: u64) -> Self {
        self.retries = retries;
        self.backoff_ms = backoff_ms;
        self
    }

    /// Number of HTTP round-trips actually performed (cache misses).
    pub fn remote_calls(&self) -> usize {
        self.remote_calls.load(Ordering::SeqCst)
    }

    fn cache_key(&self, text: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.model.as_bytes());
        hasher.update([0]);
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn cache_path(&self, text: &str) -> Option<PathBuf> {
        self.cache_dir
            .as_ref()
            .map(|dir| dir.join(format!("{}.json", self.cache_key(text))))
    }

    fn read_cache(&self, text: &str) -> Option<Vec<f64>> {
        let path = self.cache_path(text)?;
        let raw = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&raw).ok()
    }

    fn write_cache(&self, text: &str, vector: &[f64]) -> Result<(), EmbedError> {
        let Some(path) = self.cache_path(text) else {
            return Ok(());
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        // write-then-rename keeps concurrent readers off half-written files
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string(vector).expect("vector serializes"))?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn fetch(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let body = serde_json::to_value(WireRequest {
            model: &self.model,
            input: vec![text],
        })
        .expect("request serializes");
        let mut attempt = 0;
        loop {
            self.remote_calls.fetch_add(1, Ordering::SeqCst);
            match ureq::post(&self.endpoint).send_json(body.clone()) {
                Ok(resp) => {
                    let parsed: WireResponse = resp.into_json().map_err(|e| {
                        EmbedError::Protocol(format!("malformed embedding response: {e}"))
                    })?;
                    let vector = parsed.vectors.into_iter().next().ok_or_else(|| {
                        EmbedError::Protocol("embedding response held no vectors".into())
                    })?;
                    return Ok(vector);
                }
                Err(ureq::Error::Status(code, _)) if code >= 500 && attempt < self.retries => {}
                Err(ureq::Error::Status(code, _)) => {
                    return Err(EmbedError::Protocol(format!(
                        "embedding endpoint returned status {code}"
                    )));
                }
                Err(_) if attempt < self.retries => {}
                Err(e) => {
                    return Err(EmbedError::Transport {
                        endpoint: self.endpoint.clone(),
                        detail: e.to_string(),
                    });
                }
            }
            attempt += 1;
            std::thread::sleep(Duration::from_millis(self.backoff_ms << (attempt - 1)));
        }
    }
}

impl Embedder for ExternalEmbedder {
    fn id(&self) -> &str {
        "external-service"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let vector = match self.read_cache(text) {
            Some(v) => v,
            None => {
                let v = self.fetch(text)?;
                self.write_cache(text, &v)?;
                v
            }
        };
        if vector.len() != self.dim {
            return Err(EmbedError::DimMismatch {
                left: self.dim,
                right: vector.len(),
            });
        }
        let mut embedding = Embedding {
            vector,
            provider_id: self.id().to_string(),
        };
        embedding.normalize();
        Ok(embedding)
    }
}
