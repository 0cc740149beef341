//! Transport for chat and embedding calls: content-addressed cache, retry
//! with exponential backoff, and a bounded parallel batch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Chat,
    Embed,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Chat => "chat",
            Role::Embed => "embed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmRequest {
    pub role: Role,
    pub model: String,
    /// Request body sent verbatim to the endpoint.
    pub payload: String,
}

impl LlmRequest {
    pub fn new(role: Role, model: impl Into<String>, payload: impl Into<String>) -> Self {
        Self {
            role,
            model: model.into(),
            payload: payload.into(),
        }
    }

    /// Hex sha256 over `role \0 model \0 payload`.
    pub fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.role.as_str().as_bytes());
        h.update([0]);
        h.update(self.model.as_bytes());
        h.update([0]);
        h.update(self.payload.as_bytes());
        hex::encode(h.finalize())
    }

    /// Chat-completions body: system + user messages, fixed temperature.
    pub fn chat(model: &str, system: &str, user: &str, temperature: f64) -> Self {
        let body = serde_json::json!({
            "model": model,
            "temperature": temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        Self::new(Role::Chat, model, body.to_string())
    }

    pub fn embed(model: &str, input: &str) -> Self {
        let body = serde_json::json!({ "model": model, "input": input });
        Self::new(Role::Embed, model, body.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub body: String,
    pub latency: Duration,
    /// Network attempts made; 0 for a cache hit.
    pub attempts: u32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("request rejected ({status}): {excerpt}")]
    Rejected { status: u16, excerpt: String },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("gateway not configured: {0}")]
    Config(String),
    #[error("cache i/o: {0}")]
    Cache(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl GatewayError {
    pub fn is_transient(&self) -> bool {
        matches!(self, GatewayError::Transient(_))
    }
}

pub type Result<T> = std::result::Result<T, GatewayError>;

/// Something that can deliver a request to a model endpoint.
pub trait Transport: Send + Sync {
    fn send(&self, request: &LlmRequest) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay after failed attempt `n` (1-based).
    pub fn delay(&self, n: u32) -> Duration {
        self.base_delay
            .mul_f64(self.factor.powi(n.saturating_sub(1) as i32))
    }
}

/// Write-once store of response bodies keyed by request hash.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(key)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        fs::read_to_string(self.path(key)).ok()
    }

    /// First writer wins; a concurrent writer of the same key carries the same body.
    pub fn put(&self, key: &str, body: &str) -> Result<()> {
        let path = self.path(key);
        if path.exists() {
            return Ok(());
        }
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).map_err(|e| GatewayError::Cache(e.to_string()))?;
        let tmp = dir.join(format!(".{key}.{}.tmp", std::process::id()));
        let mut f = fs::File::create(&tmp).map_err(|e| GatewayError::Cache(e.to_string()))?;
        f.write_all(body.as_bytes())
            .map_err(|e| GatewayError::Cache(e.to_string()))?;
        drop(f);
        fs::rename(&tmp, &path).map_err(|e| GatewayError::Cache(e.to_string()))
    }
}

type Sleeper = dyn Fn(Duration) + Send + Sync;

pub struct Gateway {
    transport: Arc<dyn Transport>,
    cache: Option<ResponseCache>,
    policy: RetryPolicy,
    sleep: Arc<Sleeper>,
}

impl Gateway {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self {
            transport,
            cache: None,
            policy: RetryPolicy::default(),
            sleep: Arc::new(std::thread::sleep),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Replace the backoff sleep (tests use a recorder).
    pub fn with_sleep(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(sleep);
        self
    }

    pub fn policy(&self) -> RetryPolicy {
        self.policy
    }

    pub fn call(&self, request: &LlmRequest) -> Result<LlmResponse> {
        let start = Instant::now();
        let key = request.cache_key();
        if let Some(body) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(LlmResponse {
                body,
                latency: start.elapsed(),
                attempts: 0,
            });
        }
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.transport.send(request) {
                Ok(body) => {
                    if let Some(cache) = &self.cache {
                        cache.put(&key, &body)?;
                    }
                    return Ok(LlmResponse {
                        body,
                        latency: start.elapsed(),
                        attempts: attempt,
                    });
                }
                Err(e) if e.is_transient() => {
                    if attempt >= self.policy.max_attempts {
                        return Err(GatewayError::Exhausted {
                            attempts: attempt,
                            last: e.to_string(),
                        });
                    }
                    log::warn!(
                        "{} call failed (attempt {attempt}): {e}",
                        request.role.as_str()
                    );
                    (self.sleep)(self.policy.delay(attempt));
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Issue `requests` with at most `max_in_flight` outstanding; results keep input order.
    /// On the first failure no new requests start; finished ones stay cached.
    pub fn call_batch(
        &self,
        requests: &[LlmRequest],
        max_in_flight: usize,
    ) -> Result<Vec<LlmResponse>> {
        let workers = max_in_flight.max(1).min(requests.len().max(1));
        let next = AtomicUsize::new(0);
        let failed = Mutex::new(None::<(usize, GatewayError)>);
        let slots: Vec<Mutex<Option<LlmResponse>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if failed.lock().unwrap().is_some() {
                        return;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= requests.len() {
                        return;
                    }
                    match self.call(&requests[i]) {
                        Ok(r) => *slots[i].lock().unwrap() = Some(r),
                        Err(e) => {
                            let mut f = failed.lock().unwrap();
                            if f.as_ref().is_none_or(|(j, _)| i < *j) {
                                *f = Some((i, e));
                            }
                            return;
                        }
                    }
                });
            }
        });
        if let Some((_, e)) = failed.into_inner().unwrap() {
            return Err(e);
        }
        Ok(slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("every slot filled"))
            .collect())
    }
}

/// Endpoint settings read from `LLM_BASE_URL`, `LLM_API_KEY`,
/// `LLM_TEACHER_MODEL` and `LLM_ENCODER_MODEL`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub api_key: String,
    pub teacher_model: String,
    pub encoder_model: String,
}

impl EndpointConfig {
    pub fn from_env() -> Result<Self> {
        let var =
            |k: &str| std::env::var(k).map_err(|_| GatewayError::Config(format!("{k} is not set")));
        Ok(Self {
            base_url: var("LLM_BASE_URL")?,
            api_key: std::env::var("LLM_API_KEY").unwrap_or_default(),
            teacher_model: std::env::var("LLM_TEACHER_MODEL").unwrap_or_default(),
            encoder_model: std::env::var("LLM_ENCODER_MODEL").unwrap_or_default(),
        })
    }
}

/// Pull the assistant text out of a chat-completions response body.
pub fn chat_content(body: &str) -> Result<String> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| GatewayError::Malformed(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| GatewayError::Malformed("no choices[0].message.content".into()))
}

/// Pull the first vector out of an embeddings response body.
pub fn embedding_vector(body: &str) -> Result<Vec<f64>> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| GatewayError::Malformed(e.to_string()))?;
    v.pointer("/data/0/embedding")
        .and_then(|e| e.as_array())
        .and_then(|a| a.iter().map(|x| x.as_f64()).collect::<Option<Vec<f64>>>())
        .ok_or_else(|| GatewayError::Malformed("no data[0].embedding".into()))
}

fn excerpt(body: &str) -> String {
    body.chars().take(200).collect()
}

/// Classify an HTTP status: 408, 429 and 5xx are retried, other 4xx are not.
pub fn classify_status(status: u16, body: &str) -> GatewayError {
    if status == 408 || status == 429 || status >= 500 {
        GatewayError::Transient(format!("status {status}: {}", excerpt(body)))
    } else {
        GatewayError::Rejected {
            status,
            excerpt: excerpt(body),
        }
    }
}

#[cfg(feature = "http")]
mod http {
    use super::*;

    /// Blocking OpenAI-compatible HTTP transport.
    pub struct HttpTransport {
        config: EndpointConfig,
        agent: ureq::Agent,
    }

    impl HttpTransport {
        pub fn new(config: EndpointConfig) -> Result<Self> {
            if config.base_url.is_empty() {
                return Err(GatewayError::Config("LLM_BASE_URL is empty".into()));
            }
            if config
                .api_key
                .chars()
                .any(|c| c.is_control() || c.is_whitespace())
            {
                return Err(GatewayError::Config(
                    "LLM_API_KEY contains whitespace or control characters".into(),
                ));
            }
            let agent = ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(120)))
                .http_status_as_error(false)
                .build()
                .into();
            Ok(Self { config, agent })
        }
    }

    impl Transport for HttpTransport {
        fn send(&self, request: &LlmRequest) -> Result<String> {
            let path = match request.role {
                Role::Chat => "chat/completions",
                Role::Embed => "embeddings",
            };
            let url = format!("{}/{path}", self.config.base_url.trim_end_matches('/'));
            let mut req = self
                .agent
                .post(&url)
                .header("Content-Type", "application/json");
            if !self.config.api_key.is_empty() {
                req = req.header("Authorization", &format!("Bearer {}", self.config.api_key));
            }
            let mut resp = req
                .send(request.payload.as_bytes())
                .map_err(|e| GatewayError::Transient(e.to_string()))?;
            let status = resp.status().as_u16();
            let body = resp
                .body_mut()
                .read_to_string()
                .map_err(|e| GatewayError::Transient(e.to_string()))?;
            if (200..300).contains(&status) {
                Ok(body)
            } else {
                Err(classify_status(status, &body))
            }
        }
    }
}

#[cfg(feature = "http")]
pub use http::HttpTransport;

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    struct Scripted {
        replies: Mutex<VecDeque<Result<String>>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(replies: Vec<Result<String>>) -> Arc<Self> {
            Arc::new(Self {
                replies: Mutex::new(replies.into()),
                calls: AtomicUsize::new(0),
            })
        }
    }

    impl Transport for Scripted {
        fn send(&self, _: &LlmRequest) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or_else(|| Ok("default".into()))
        }
    }

    fn no_sleep(g: Gateway) -> Gateway {
        g.with_sleep(|_| {})
    }

    #[test]
    fn cache_key_is_deterministic_and_role_sensitive() {
        let a = LlmRequest::new(Role::Chat, "m", "p");
        assert_eq!(
            a.cache_key(),
            LlmRequest::new(Role::Chat, "m", "p").cache_key()
        );
        assert_ne!(
            a.cache_key(),
            LlmRequest::new(Role::Embed, "m", "p").cache_key()
        );
        assert_ne!(
            LlmRequest::new(Role::Chat, "mp", "").cache_key(),
            LlmRequest::new(Role::Chat, "m", "p").cache_key()
        );
        assert_eq!(a.cache_key().len(), 64);
    }

    #[test]
    fn second_identical_call_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let t = Scripted::new(vec![Ok("body-1".into())]);
        let g = no_sleep(Gateway::new(t.clone()).with_cache(ResponseCache::new(dir.path())));
        let r = LlmRequest::new(Role::Chat, "m", "hello");
        let first = g.call(&r).unwrap();
        let second = g.call(&r).unwrap();
        assert_eq!(first.attempts, 1);
        assert_eq!(second.attempts, 0);
        assert_eq!(first.body, second.body);
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn transient_failure_then_success_takes_two_attempts() {
        let t = Scripted::new(vec![
            Err(GatewayError::Transient("503".into())),
            Ok("ok".into()),
        ]);
        let slept = Arc::new(Mutex::new(Vec::new()));
        let rec = slept.clone();
        let g = Gateway::new(t).with_sleep(move |d| rec.lock().unwrap().push(d));
        let r = g.call(&LlmRequest::new(Role::Chat, "m", "x")).unwrap();
        assert_eq!(r.attempts, 2);
        assert_eq!(*slept.lock().unwrap(), vec![Duration::from_secs(1)]);
    }

    #[test]
    fn backoff_doubles_until_exhausted() {
        let t = Scripted::new(
            (0..10)
                .map(|_| Err(GatewayError::Transient("x".into())))
                .collect(),
        );
        let slept = Arc::new(Mutex::new(Vec::new()));
        let rec = slept.clone();
        let g = Gateway::new(t.clone()).with_sleep(move |d| rec.lock().unwrap().push(d));
        let err = g.call(&LlmRequest::new(Role::Chat, "m", "x")).unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { attempts: 5, .. }));
        let secs: Vec<u64> = slept.lock().unwrap().iter().map(|d| d.as_secs()).collect();
        assert_eq!(secs, vec![1, 2, 4, 8]);
        assert_eq!(t.calls.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn rejection_is_not_retried() {
        let t = Scripted::new(vec![
            Err(classify_status(401, "bad key")),
            Ok("never".into()),
        ]);
        let g = no_sleep(Gateway::new(t.clone()));
        let err = g.call(&LlmRequest::new(Role::Chat, "m", "x")).unwrap_err();
        assert_eq!(
            err,
            GatewayError::Rejected {
                status: 401,
                excerpt: "bad key".into()
            }
        );
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);
        assert!(classify_status(429, "").is_transient());
        assert!(classify_status(502, "").is_transient());
    }

    #[cfg(feature = "http")]
    #[test]
    fn malformed_credential_fails_before_any_call() {
        let cfg = EndpointConfig {
            base_url: "http://localhost:1".into(),
            api_key: "sk\nbad".into(),
            ..Default::default()
        };
        assert!(matches!(
            HttpTransport::new(cfg),
            Err(GatewayError::Config(_))
        ));
    }

    #[test]
    fn response_extractors() {
        let chat = r#"{"choices":[{"message":{"role":"assistant","content":"{\"scores\":[]}"}}]}"#;
        assert_eq!(chat_content(chat).unwrap(), r#"{"scores":[]}"#);
        assert_eq!(
            embedding_vector(r#"{"data":[{"embedding":[0.5,-1]}]}"#).unwrap(),
            vec![0.5, -1.0]
        );
        assert!(chat_content("{}").is_err());
    }
}
