//! Text-generation client contract shared by the corpus filters, the
//! retrieval generator, and the evaluation harness.
//!
//! Wire format: POST a JSON body `{"prompt": ..., "max_tokens": ...}` and
//! read back `{"text": ...}`. Offline mock clients implement the same trait
//! so every pipeline runs without network access; concrete kinds are
//! selected by name through [`ClientRegistry`].

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error talking to {endpoint}: {detail}")]
    Transport { endpoint: String, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unknown client kind '{0}'")]
    UnknownKind(String),
    #[error("invalid client spec: {0}")]
    InvalidSpec(String),
    #[error("scripted client ran out of steps")]
    ScriptExhausted,
}

impl ClientError {
    /// Transport failures are worth a retry; protocol failures are not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClientError::Transport { .. })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
}

/// A text generator: the LLM backing filtering prompts, QA generation,
/// retrieval-augmented answers, exam answering, and judging.
pub trait GenerationClient: Send + Sync {
    fn kind(&self) -> &str;
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, ClientError>;
}

/// Declarative client selection, written in config files.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ClientSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Canned reply for the `fixed` kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_retries() -> usize {
    2
}

fn default_backoff_ms() -> u64 {
    50
}

/// Echoes the prompt back; the degenerate generator used in offline runs.
pub struct EchoClient;

impl GenerationClient for EchoClient {
    fn kind(&self) -> &str {
        "echo"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, ClientError> {
        Ok(GenerationResponse {
            text: req.prompt.clone(),
        })
    }
}

/// Always replies with the same text.
pub struct FixedClient {
    reply: String,
}

impl FixedClient {
    pub fn new(reply: impl Into<String>) -> Self {
        FixedClient {
            reply: reply.into(),
        }
    }
}

impl GenerationClient for FixedClient {
    fn kind(&self) -> &str {
        "fixed"
    }

    fn generate(&self, _req: &GenerationRequest) -> Result<GenerationResponse, ClientError> {
        Ok(GenerationResponse {
            text: self.reply.clone(),
        })
    }
}

/// One step of a scripted conversation.
#[derive(Debug, Clone)]
pub enum ScriptStep {
    Reply(String),
    TransportError,
}

/// Pops scripted steps in order; used for fault-injection tests and
/// deterministic QA generation fixtures. Counts every call.
pub struct ScriptedClient {
    steps: Mutex<std::collections::VecDeque<ScriptStep>>,
    calls: AtomicUsize,
}

impl ScriptedClient {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        ScriptedClient {
            steps: Mutex::new(steps.into()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn replies(texts: &[&str]) -> Self {
        Self::new(texts.iter().map(|t| ScriptStep::Reply(t.to_string())).collect())
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl GenerationClient for ScriptedClient {
    fn kind(&self) -> &str {
        "scripted"
    }

    fn generate(&self, _req: &GenerationRequest) -> Result<GenerationResponse, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let step = self
            .steps
            .lock()
            .expect("script lock")
            .pop_front()
            .ok_or(ClientError::ScriptExhausted)?;
        match step {
            ScriptStep::Reply(text) => Ok(GenerationResponse { text }),
            ScriptStep::TransportError => Err(ClientError::Transport {
                endpoint: "scripted".into(),
                detail: "injected fault".into(),
            }),
        }
    }
}

/// JSON-over-HTTP client with bounded retries and exponential backoff on
/// transport errors and 5xx responses.
pub struct HttpGenerationClient {
    endpoint: String,
    retries: usize,
    backoff_ms: u64,
}

impl HttpGenerationClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpGenerationClient {
            endpoint: endpoint.into(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn with_retries(mut self, retries: usize, backoff_ms: u64) -> Self {
        self.retries = retries;
        self.backoff_ms = backoff_ms;
        self
    }
}

impl GenerationClient for HttpGenerationClient {
    fn kind(&self) -> &str {
        "http"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, ClientError> {
        let body = serde_json::to_value(req).expect("request serializes");
        let mut attempt = 0;
        loop {
            let result = ureq::post(&self.endpoint).send_json(body.clone());
            match result {
                Ok(resp) => {
                    let parsed: GenerationResponse = resp.into_json().map_err(|e| {
                        ClientError::Protocol(format!("malformed generation response: {e}"))
                    })?;
                    return Ok(parsed);
                }
                Err(ureq::Error::Status(code, _)) if code >= 500 && attempt < self.retries => {}
                Err(ureq::Error::Status(code, _)) => {
                    return Err(ClientError::Protocol(format!(
                        "generation endpoint returned status {code}"
                    )));
                }
                Err(e) if attempt < self.retries => {
                    let _ = e;
                }
                Err(e) => {
                    return Err(ClientError::Transport {
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

type ClientFactory = Box<dyn Fn(&ClientSpec) -> Result<Box<dyn GenerationClient>, ClientError> + Send + Sync>;

/// Name-keyed registry of client constructors. The built-in kinds `echo`,
/// `fixed`, and `http` are pre-registered; callers may add their own.
pub struct ClientRegistry {
    factories: BTreeMap<String, ClientFactory>,
}

impl Default for ClientRegistry {
    fn default() -> Self {
        let mut registry = ClientRegistry {
            factories: BTreeMap::new(),
        };
        registry.register("echo", |_| Ok(Box::new(EchoClient)));
        registry.register("fixed", |spec| {
            let reply = spec.reply.clone().ok_or_else(|| {
                ClientError::InvalidSpec("fixed client needs a 'reply' field".into())
            })?;
            Ok(Box::new(FixedClient::new(reply)))
        });
        registry.register("http", |spec| {
            let endpoint = spec.endpoint.clone().ok_or_else(|| {
                ClientError::InvalidSpec("http client needs an 'endpoint' field".into())
            })?;
            Ok(Box::new(
                HttpGenerationClient::new(endpoint).with_retries(spec.retries, spec.backoff_ms),
            ))
        });
        registry
    }
}

impl ClientRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, kind: &str, factory: F)
    where
        F: Fn(&ClientSpec) -> Result<Box<dyn GenerationClient>, ClientError> + Send + Sync + 'static,
    {
        self.factories.insert(kind.to_string(), Box::new(factory));
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(|k| k.as_str())
    }

    pub fn build(&self, spec: &ClientSpec) -> Result<Box<dyn GenerationClient>, ClientError> {
        let factory = self
            .factories
            .get(&spec.kind)
            .ok_or_else(|| ClientError::UnknownKind(spec.kind.clone()))?;
        factory(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_returns_prompt_verbatim() {
        let client = EchoClient;
        let out = client
            .generate(&GenerationRequest {
                prompt: "红烧肉怎么做?".into(),
                max_tokens: 64,
            })
            .unwrap();
        assert_eq!(out.text, "红烧肉怎么做?");
    }

    #[test]
    fn scripted_client_pops_in_order_and_counts_calls() {
        let client = ScriptedClient::replies(&["one", "two"]);
        let req = GenerationRequest {
            prompt: String::new(),
            max_tokens: 1,
        };
        assert_eq!(client.generate(&req).unwrap().text, "one");
        assert_eq!(client.generate(&req).unwrap().text, "two");
        assert!(matches!(
            client.generate(&req),
            Err(ClientError::ScriptExhausted)
        ));
        assert_eq!(client.calls(), 3);
    }

    #[test]
    fn registry_builds_by_name_and_rejects_unknown() {
        let registry = ClientRegistry::new();
        let spec = ClientSpec {
            kind: "fixed".into(),
            reply: Some("1".into()),
            ..Default::default()
        };
        let client = registry.build(&spec).unwrap();
        assert_eq!(client.kind(), "fixed");
        let bad = ClientSpec {
            kind: "warp-drive".into(),
            ..Default::default()
        };
        assert!(matches!(
            registry.build(&bad),
            Err(ClientError::UnknownKind(_))
        ));
    }
}
