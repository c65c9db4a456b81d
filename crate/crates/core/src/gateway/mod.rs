//! Every remote model call goes through an [`Endpoint`]: text generation,
//! token scoring, commonsense scoring and embeddings.
//!
//! An endpoint pairs a [`ModelEndpoint`] description with a [`Backend`]
//! chosen by name from a [`BackendRegistry`] (`openai-compatible` or
//! `mock`), a content-addressed [`ResponseCache`] and an in-flight limit.

mod cache;
mod http;
mod mock;
mod pool;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::digest::json_digest;

pub use cache::ResponseCache;
pub use http::{HttpBackend, RetryPolicy};
pub use mock::{mock_tokenize, ChatRule, EmbedRule, LogprobScript, MockBackend, MockScript, ScoreRule};
pub use pool::{map_ordered, Semaphore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiKind {
    Chat,
    CompletionWithLogprobs,
    CommonsenseScorer,
    Embedder,
    Mock,
}

impl ApiKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Chat => "chat",
            Self::CompletionWithLogprobs => "completion_with_logprobs",
            Self::CommonsenseScorer => "commonsense_scorer",
            Self::Embedder => "embedder",
            Self::Mock => "mock",
        }
    }
}

/// Which operation a request performs; used for capability checks and as
/// part of the cache key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Chat,
    ScoreTokens,
    Commonsense,
    Embed,
}

impl Operation {
    fn native_kind(self) -> ApiKind {
        match self {
            Self::Chat => ApiKind::Chat,
            Self::ScoreTokens => ApiKind::CompletionWithLogprobs,
            Self::Commonsense => ApiKind::CommonsenseScorer,
            Self::Embed => ApiKind::Embedder,
        }
    }
}

fn default_rate_limit() -> f64 {
    600.0
}
fn default_timeout() -> f64 {
    120.0
}
fn default_in_flight() -> usize {
    4
}

/// Description of one remote (or mock) model service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub endpoint_id: String,
    pub base_url: String,
    pub api_kind: ApiKind,
    pub model_name: String,
    /// Name of the credential (environment variable or credentials-file key).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_ref: Option<String>,
    /// Requests per minute.
    #[serde(default = "default_rate_limit")]
    pub rate_limit: f64,
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Generation temperature when the caller asks for the model default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_temperature: Option<f64>,
    /// Backend registry name; derived from `api_kind` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

pub const DEFAULT_GENERATION_TEMPERATURE: f64 = 1.0;

impl ModelEndpoint {
    pub fn mock(endpoint_id: &str, model_name: &str) -> Self {
        Self {
            endpoint_id: endpoint_id.to_string(),
            base_url: "mock://local".to_string(),
            api_kind: ApiKind::Mock,
            model_name: model_name.to_string(),
            auth_ref: None,
            rate_limit: default_rate_limit(),
            timeout: default_timeout(),
            max_in_flight: default_in_flight(),
            default_temperature: None,
            backend: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |reason: String| {
            Err(GatewayError::InvalidEndpoint {
                endpoint: self.endpoint_id.clone(),
                reason,
            })
        };
        if self.endpoint_id.trim().is_empty() {
            return bad("empty endpoint_id".into());
        }
        if !(self.rate_limit > 0.0 && self.rate_limit.is_finite()) {
            return bad(format!("rate_limit must be positive, got {}", self.rate_limit));
        }
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return bad(format!("timeout must be positive, got {}", self.timeout));
        }
        if self.api_kind != ApiKind::Mock {
            match reqwest::Url::parse(&self.base_url) {
                Ok(u) if u.scheme() == "http" || u.scheme() == "https" => {}
                Ok(u) => return bad(format!("unsupported URL scheme {:?}", u.scheme())),
                Err(e) => return bad(format!("malformed base_url {:?}: {e}", self.base_url)),
            }
        }
        Ok(())
    }

    pub fn backend_name(&self) -> &str {
        match &self.backend {
            Some(b) => b,
            None if self.api_kind == ApiKind::Mock => "mock",
            None => "openai-compatible",
        }
    }

    pub fn generation_temperature(&self) -> f64 {
        self.default_temperature.unwrap_or(DEFAULT_GENERATION_TEMPERATURE)
    }

    fn supports(&self, op: Operation) -> bool {
        self.api_kind == ApiKind::Mock || self.api_kind == op.native_kind()
    }

    /// Descriptor safe to write into manifests (credential name only).
    pub fn descriptor(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("endpoint serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub n_samples: usize,
    pub max_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationParams {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            n_samples: 1,
            max_tokens,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.n_samples == 0 {
            return Err(GatewayError::InvalidParams("n_samples must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidParams(format!(
                "temperature must be nonnegative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token_text: String,
    pub logprob: f64,
}

impl TokenLogprob {
    pub fn new(token_text: impl Into<String>, logprob: f64) -> Self {
        Self {
            token_text: token_text.into(),
            logprob,
        }
    }
}

/// Token as returned by a backend; the first token of an echoed prompt has
/// no logprob on most servers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawToken {
    pub text: String,
    pub logprob: Option<f64>,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("endpoint {endpoint}: {reason}")]
    InvalidEndpoint { endpoint: String, reason: String },
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("endpoint {endpoint} ({kind}) does not support {op:?}")]
    Unsupported {
        endpoint: String,
        kind: &'static str,
        op: Operation,
    },
    #[error("unknown backend {0:?}")]
    UnknownBackend(String),
    #[error("empty input text")]
    EmptyText,
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("rate limited after {attempts} attempts")]
    RetriesExhausted { attempts: u32, last_status: Option<u16> },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("token texts do not reconstruct the scored text")]
    TokenizationMismatch,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("embedding dimension {got} differs from earlier {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding has a non-finite component")]
    NonFiniteEmbedding,
    #[error("logprob {0} is positive or non-finite")]
    BadLogprob(f64),
    #[error("mock backend: {0}")]
    Mock(String),
    #[error("credential {0:?} not found in the environment or credentials file")]
    MissingCredential(String),
    #[error("cache I/O: {0}")]
    Cache(#[from] std::io::Error),
}

/// What a backend sees for one call.
pub struct RequestCtx<'a> {
    pub endpoint: &'a ModelEndpoint,
    /// Cache key of the request; mock fixture files are named after it.
    pub digest: &'a str,
}

/// A model service implementation. Methods a backend cannot serve keep
/// their default, which reports the operation as unsupported.
pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;

    fn chat(&self, ctx: &RequestCtx<'_>, prompt: &str, params: &GenerationParams) -> Result<Vec<String>, GatewayError> {
        let _ = (prompt, params);
        Err(unsupported(ctx, Operation::Chat))
    }

    fn score_tokens(&self, ctx: &RequestCtx<'_>, text: &str) -> Result<Vec<RawToken>, GatewayError> {
        let _ = text;
        Err(unsupported(ctx, Operation::ScoreTokens))
    }

    fn commonsense(&self, ctx: &RequestCtx<'_>, text: &str) -> Result<f64, GatewayError> {
        let _ = text;
        Err(unsupported(ctx, Operation::Commonsense))
    }

    fn embed(&self, ctx: &RequestCtx<'_>, text: &str) -> Result<Vec<f64>, GatewayError> {
        let _ = text;
        Err(unsupported(ctx, Operation::Embed))
    }
}

fn unsupported(ctx: &RequestCtx<'_>, op: Operation) -> GatewayError {
    GatewayError::Unsupported {
        endpoint: ctx.endpoint.endpoint_id.clone(),
        kind: ctx.endpoint.api_kind.as_str(),
        op,
    }
}

/// Settings shared by every endpoint built for one run.
#[derive(Debug, Clone, Default)]
pub struct GatewayOptions {
    pub cache_dir: Option<PathBuf>,
    pub mock_dir: Option<PathBuf>,
    pub retry: RetryPolicy,
}

type BackendFactory =
    Box<dyn Fn(&ModelEndpoint, &GatewayOptions) -> Result<Arc<dyn Backend>, GatewayError> + Send + Sync>;

/// Backends registered by name.
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&ModelEndpoint, &GatewayOptions) -> Result<Arc<dyn Backend>, GatewayError> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, ep: &ModelEndpoint, opts: &GatewayOptions) -> Result<Arc<dyn Backend>, GatewayError> {
        let name = ep.backend_name();
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| GatewayError::UnknownBackend(name.to_string()))?;
        factory(ep, opts)
    }

    /// Builds a ready endpoint handle, opening the shared cache if configured.
    pub fn connect(&self, ep: ModelEndpoint, opts: &GatewayOptions) -> Result<Endpoint, GatewayError> {
        ep.validate()?;
        let backend = self.create(&ep, opts)?;
        let cache = match &opts.cache_dir {
            Some(dir) => Some(Arc::new(ResponseCache::open(dir)?)),
            None => None,
        };
        Ok(Endpoint::new(ep, backend, cache))
    }
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register("openai-compatible", |ep, opts| {
            Ok(Arc::new(HttpBackend::new(ep, opts.retry.clone())?) as Arc<dyn Backend>)
        });
        reg.register("mock", |_ep, opts| {
            let backend = match &opts.mock_dir {
                Some(dir) => MockBackend::from_dir(dir)?,
                None => MockBackend::default(),
            };
            Ok(Arc::new(backend) as Arc<dyn Backend>)
        });
        reg
    }
}

/// A connected endpoint. Cloning shares the backend, cache, counters and
/// in-flight limit.
#[derive(Clone)]
pub struct Endpoint {
    spec: ModelEndpoint,
    backend: Arc<dyn Backend>,
    cache: Option<Arc<ResponseCache>>,
    calls: Arc<AtomicU64>,
    embed_dim: Arc<Mutex<Option<usize>>>,
    in_flight: Arc<Semaphore>,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("spec", &self.spec)
            .field("backend", &self.backend.name())
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

impl Endpoint {
    pub fn new(spec: ModelEndpoint, backend: Arc<dyn Backend>, cache: Option<Arc<ResponseCache>>) -> Self {
        let permits = spec.max_in_flight.max(1);
        Self {
            spec,
            backend,
            cache,
            calls: Arc::new(AtomicU64::new(0)),
            embed_dim: Arc::new(Mutex::new(None)),
            in_flight: Arc::new(Semaphore::new(permits)),
        }
    }

    pub fn spec(&self) -> &ModelEndpoint {
        &self.spec
    }

    pub fn model_name(&self) -> &str {
        &self.spec.model_name
    }

    pub fn max_in_flight(&self) -> usize {
        self.spec.max_in_flight.max(1)
    }

    /// Number of requests that reached the backend (cache hits excluded).
    pub fn backend_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Same service, different model (e.g. a fine-tuned adapter).
    pub fn with_model(&self, model_name: &str) -> Self {
        let mut e = self.clone();
        e.spec.model_name = model_name.to_string();
        e.embed_dim = Arc::new(Mutex::new(None));
        e
    }

    pub fn request_digest(&self, op: Operation, params: Option<&GenerationParams>, payload: &str) -> String {
        request_digest(&self.spec, op, params, payload)
    }

    fn check(&self, op: Operation) -> Result<(), GatewayError> {
        if self.spec.supports(op) {
            Ok(())
        } else {
            Err(GatewayError::Unsupported {
                endpoint: self.spec.endpoint_id.clone(),
                kind: self.spec.api_kind.as_str(),
                op,
            })
        }
    }

    fn cached<T, F>(&self, digest: &str, call: F) -> Result<T, GatewayError>
    where
        T: Serialize + serde::de::DeserializeOwned,
        F: FnOnce(&RequestCtx<'_>) -> Result<T, GatewayError>,
    {
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get::<T>(digest)) {
            return Ok(hit);
        }
        let value = {
            let _permit = self.in_flight.acquire();
            self.calls.fetch_add(1, Ordering::SeqCst);
            call(&RequestCtx {
                endpoint: &self.spec,
                digest,
            })?
        };
        if let Some(cache) = &self.cache {
            cache.put(digest, &value)?;
        }
        Ok(value)
    }

    pub fn chat_generate(&self, prompt: &str, params: &GenerationParams) -> Result<Vec<String>, GatewayError> {
        self.check(Operation::Chat)?;
        params.validate()?;
        let digest = self.request_digest(Operation::Chat, Some(params), prompt);
        let out: Vec<String> = self.cached(&digest, |ctx| {
            let out = self.backend.chat(ctx, prompt, params)?;
            if out.len() != params.n_samples {
                return Err(GatewayError::MalformedResponse(format!(
                    "expected {} completions, got {}",
                    params.n_samples,
                    out.len()
                )));
            }
            Ok(out)
        })?;
        Ok(out)
    }

    pub fn score_tokens(&self, text: &str) -> Result<Vec<TokenLogprob>, GatewayError> {
        self.check(Operation::ScoreTokens)?;
        if text.is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let digest = self.request_digest(Operation::ScoreTokens, None, text);
        let raw: Vec<RawToken> = self.cached(&digest, |ctx| {
            let raw = self.backend.score_tokens(ctx, text)?;
            reconcile_tokens(raw, text)
        })?;
        raw.into_iter()
            .filter_map(|t| t.logprob.map(|lp| (t.text, lp)))
            .map(|(text, lp)| {
                if lp.is_finite() && lp <= 0.0 {
                    Ok(TokenLogprob::new(text, lp))
                } else {
                    Err(GatewayError::BadLogprob(lp))
                }
            })
            .collect()
    }

    pub fn commonsense_score(&self, text: &str) -> Result<f64, GatewayError> {
        self.check(Operation::Commonsense)?;
        let digest = self.request_digest(Operation::Commonsense, None, text);
        self.cached(&digest, |ctx| {
            let s = self.backend.commonsense(ctx, text)?;
            if (0.0..=1.0).contains(&s) {
                Ok(s)
            } else {
                Err(GatewayError::ScoreOutOfRange(s))
            }
        })
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        self.check(Operation::Embed)?;
        let digest = self.request_digest(Operation::Embed, None, text);
        let v: Vec<f64> = self.cached(&digest, |ctx| {
            let v = self.backend.embed(ctx, text)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(GatewayError::NonFiniteEmbedding);
            }
            Ok(v)
        })?;
        let mut dim = self.embed_dim.lock().expect("dimension lock");
        match *dim {
            Some(d) if d != v.len() => {
                return Err(GatewayError::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                })
            }
            None => *dim = Some(v.len()),
            _ => {}
        }
        Ok(v)
    }
}

/// Cache key: digest over endpoint id, model name, api kind, operation,
/// parameters and payload.
pub fn request_digest(ep: &ModelEndpoint, op: Operation, params: Option<&GenerationParams>, payload: &str) -> String {
    json_digest(&json!({
        "endpoint_id": ep.endpoint_id,
        "model_name": ep.model_name,
        "api_kind": ep.api_kind.as_str(),
        "op": op,
        "params": params,
        "payload": payload,
    }))
}

/// Keeps the prefix of tokens that spells out `text` (servers may append
/// generated tokens) and checks reconstruction.
fn reconcile_tokens(raw: Vec<RawToken>, text: &str) -> Result<Vec<RawToken>, GatewayError> {
    let mut out = Vec::with_capacity(raw.len());
    let mut built = String::with_capacity(text.len());
    for tok in raw {
        if built.len() >= text.len() && !tok.text.is_empty() {
            break;
        }
        built.push_str(&tok.text);
        out.push(tok);
    }
    if built != text {
        return Err(GatewayError::TokenizationMismatch);
    }
    Ok(out)
}

/// Ensures a duration is at least one millisecond.
pub(crate) fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s.max(0.001))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock_endpoint(script: MockScript, cache: Option<Arc<ResponseCache>>) -> Endpoint {
        Endpoint::new(
            ModelEndpoint::mock("m", "toy"),
            Arc::new(MockBackend::new(script)),
            cache,
        )
    }

    #[test]
    fn fixture_echo_for_chat() {
        let script = MockScript {
            chat: vec![ChatRule::new(&["glue"], &["s1", "s2"])],
            ..Default::default()
        };
        let ep = mock_endpoint(script, None);
        let params = GenerationParams {
            temperature: 1.0,
            n_samples: 2,
            max_tokens: 64,
            seed: None,
        };
        assert_eq!(ep.chat_generate("glue sticks", &params).unwrap(), vec!["s1", "s2"]);
    }

    #[test]
    fn cache_hit_skips_backend() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::open(dir.path()).unwrap());
        let ep = mock_endpoint(MockScript::default(), Some(cache));
        let params = GenerationParams::greedy(8);
        let a = ep.chat_generate("hello", &params).unwrap();
        let b = ep.chat_generate("hello", &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(ep.backend_calls(), 1);
        let s1 = ep.commonsense_score("x").unwrap();
        let s2 = ep.commonsense_score("x").unwrap();
        assert_eq!(s1, s2);
        assert_eq!(ep.backend_calls(), 2);
    }

    #[test]
    fn constant_logprob_table() {
        let script = MockScript {
            logprobs: LogprobScript::Constant { logprob: 0.25f64.ln() },
            ..Default::default()
        };
        let ep = mock_endpoint(script, None);
        let toks = ep.score_tokens("one two three").unwrap();
        assert_eq!(toks.len(), 3);
        assert!(toks.iter().all(|t| t.logprob == 0.25f64.ln()));
        assert!(matches!(ep.score_tokens(""), Err(GatewayError::EmptyText)));
    }

    #[test]
    fn bigram_table_fixture() {
        let mut texts = BTreeMap::new();
        texts.insert("a b".to_string(), vec![0.5f64.ln(), 0.8f64.ln()]);
        let script = MockScript {
            logprobs: LogprobScript::Table { texts, fallback: None },
            ..Default::default()
        };
        let ep = mock_endpoint(script, None);
        let toks = ep.score_tokens("a b").unwrap();
        assert_eq!(
            toks,
            vec![
                TokenLogprob::new("a", 0.5f64.ln()),
                TokenLogprob::new(" b", 0.8f64.ln())
            ]
        );
    }

    #[test]
    fn score_range_enforced() {
        let script = MockScript {
            scorer: vec![ScoreRule::new(&["good"], 0.657), ScoreRule::new(&["bad"], 1.2)],
            ..Default::default()
        };
        let ep = mock_endpoint(script, None);
        assert_eq!(ep.commonsense_score("good story").unwrap(), 0.657);
        assert!(matches!(
            ep.commonsense_score("bad story"),
            Err(GatewayError::ScoreOutOfRange(_))
        ));
    }

    #[test]
    fn embedding_dimension_is_fixed_per_endpoint() {
        let script = MockScript {
            embedder: vec![
                EmbedRule::new(&["two"], &[1.0, 0.0]),
                EmbedRule::new(&["three"], &[1.0, 0.0, 0.0]),
            ],
            ..Default::default()
        };
        let ep = mock_endpoint(script, None);
        assert_eq!(ep.embed("two").unwrap(), vec![1.0, 0.0]);
        assert!(matches!(
            ep.embed("three"),
            Err(GatewayError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn nan_embedding_rejected() {
        let script = MockScript {
            embedder: vec![EmbedRule::new(&["x"], &[f64::NAN, 1.0])],
            ..Default::default()
        };
        assert!(matches!(
            mock_endpoint(script, None).embed("x"),
            Err(GatewayError::NonFiniteEmbedding)
        ));
    }

    #[test]
    fn capability_checks() {
        let mut spec = ModelEndpoint::mock("c", "gpt");
        spec.api_kind = ApiKind::Chat;
        spec.base_url = "http://localhost:1".into();
        let ep = Endpoint::new(spec, Arc::new(MockBackend::default()), None);
        assert!(matches!(ep.score_tokens("x"), Err(GatewayError::Unsupported { .. })));
        assert!(matches!(ep.embed("x"), Err(GatewayError::Unsupported { .. })));
    }

    #[test]
    fn endpoint_validation() {
        let mut spec = ModelEndpoint::mock("c", "gpt");
        spec.api_kind = ApiKind::Chat;
        spec.base_url = "not a url".into();
        assert!(spec.validate().is_err());
        spec.base_url = "http://localhost:8000".into();
        spec.validate().unwrap();
        spec.rate_limit = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn reconcile_drops_generated_suffix() {
        let raw = vec![
            RawToken {
                text: "a".into(),
                logprob: None,
            },
            RawToken {
                text: " b".into(),
                logprob: Some(-0.1),
            },
            RawToken {
                text: " c".into(),
                logprob: Some(-0.2),
            },
        ];
        let out = reconcile_tokens(raw.clone(), "a b").unwrap();
        assert_eq!(out.len(), 2);
        assert!(matches!(
            reconcile_tokens(raw, "a x"),
            Err(GatewayError::TokenizationMismatch)
        ));
    }

    #[test]
    fn registry_names() {
        let reg = BackendRegistry::default();
        assert_eq!(reg.names(), vec!["mock", "openai-compatible"]);
        let mut spec = ModelEndpoint::mock("x", "y");
        spec.backend = Some("carrier-pigeon".into());
        assert!(matches!(
            reg.connect(spec, &GatewayOptions::default()),
            Err(GatewayError::UnknownBackend(_))
        ));
    }
}
