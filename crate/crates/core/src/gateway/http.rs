//! OpenAI-compatible HTTP backend.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{secs, Backend, GatewayError, GenerationParams, ModelEndpoint, RawToken, RequestCtx};

/// Environment variable naming a TOML credentials file (`name = "token"`).
pub const CREDENTIALS_FILE_ENV: &str = "STORYSENSE_CREDENTIALS";

/// Exponential backoff with jitter for 429, 5xx and transport failures.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based): the capped exponential
    /// step scaled by a uniform factor in [0.5, 1).
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(1u32.checked_shl(attempt.min(20)).unwrap_or(u32::MAX));
        let capped = exp.min(self.max_delay);
        capped.mul_f64(rand::thread_rng().gen_range(0.5..1.0))
    }
}

pub struct HttpBackend {
    client: Client,
    base_url: String,
    token: Option<String>,
    retry: RetryPolicy,
    min_interval: Duration,
    next_slot: Mutex<Instant>,
}

enum Attempt {
    Done(Value),
    Retry(Option<u16>, String, Option<Duration>),
}

impl HttpBackend {
    pub fn new(ep: &ModelEndpoint, retry: RetryPolicy) -> Result<Self, GatewayError> {
        let client = Client::builder()
            .timeout(secs(ep.timeout))
            .build()
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        let token = match &ep.auth_ref {
            Some(name) => Some(resolve_credential(name)?),
            None => None,
        };
        Ok(Self {
            client,
            base_url: ep.base_url.trim_end_matches('/').to_string(),
            token,
            retry,
            min_interval: Duration::from_secs_f64(60.0 / ep.rate_limit),
            next_slot: Mutex::new(Instant::now()),
        })
    }

    fn wait_for_slot(&self) {
        let wait = {
            let mut slot = self.next_slot.lock().expect("rate limiter lock");
            let now = Instant::now();
            let start = (*slot).max(now);
            *slot = start + self.min_interval;
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    fn attempt(&self, url: &str, body: &Value) -> Result<Attempt, GatewayError> {
        self.wait_for_slot();
        let mut req = self.client.post(url).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(None, e.to_string(), None)),
        };
        let status = resp.status();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|s| s.trim().parse::<f64>().ok())
            .map(secs);
        let text = resp
            .text()
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_str(&text)
                .map(Attempt::Done)
                .map_err(|e| GatewayError::MalformedResponse(format!("{e}: {}", truncate(&text))));
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Ok(Attempt::Retry(Some(status.as_u16()), truncate(&text), retry_after));
        }
        Err(GatewayError::Http {
            status: status.as_u16(),
            body: truncate(&text),
        })
    }

    /// POSTs `body` to `{base_url}{path}`, retrying per the policy.
    pub fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = format!("{}{}", self.base_url, path);
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match self.attempt(&url, body)? {
                Attempt::Done(v) => return Ok(v),
                Attempt::Retry(status, message, retry_after) => {
                    if attempts > self.retry.max_retries {
                        return Err(match status {
                            Some(s) => {
                                log::warn!("{url}: giving up after {attempts} attempts (HTTP {s})");
                                GatewayError::RetriesExhausted {
                                    attempts,
                                    last_status: Some(s),
                                }
                            }
                            None => GatewayError::Transport { attempts, message },
                        });
                    }
                    let mut delay = self.retry.delay(attempts - 1);
                    if let Some(ra) = retry_after {
                        delay = delay.max(ra.min(self.retry.max_delay));
                    }
                    log::debug!("{url}: retry {attempts} in {delay:?} ({status:?} {message})");
                    std::thread::sleep(delay);
                }
            }
        }
    }
}

fn truncate(s: &str) -> String {
    const MAX: usize = 500;
    if s.len() <= MAX {
        s.to_string()
    } else {
        let mut end = MAX;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}

fn resolve_credential(name: &str) -> Result<String, GatewayError> {
    if let Ok(v) = std::env::var(name) {
        return Ok(v);
    }
    if let Ok(path) = std::env::var(CREDENTIALS_FILE_ENV) {
        let path = PathBuf::from(path);
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(table) = text.parse::<toml::Table>() {
                if let Some(v) = table.get(name).and_then(|v| v.as_str()) {
                    return Ok(v.to_string());
                }
            }
        }
    }
    Err(GatewayError::MissingCredential(name.to_string()))
}

fn malformed(what: &str) -> GatewayError {
    GatewayError::MalformedResponse(format!("missing or invalid {what}"))
}

impl Backend for HttpBackend {
    fn name(&self) -> &'static str {
        "openai-compatible"
    }

    fn chat(&self, ctx: &RequestCtx<'_>, prompt: &str, params: &GenerationParams) -> Result<Vec<String>, GatewayError> {
        let mut body = json!({
            "model": ctx.endpoint.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "n": params.n_samples,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        let resp = self.post("/v1/chat/completions", &body)?;
        let choices = resp["choices"].as_array().ok_or_else(|| malformed("choices"))?;
        let mut indexed: Vec<(u64, String)> = choices
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let idx = c["index"].as_u64().unwrap_or(i as u64);
                let content = c["message"]["content"]
                    .as_str()
                    .ok_or_else(|| malformed("message.content"))?;
                Ok((idx, content.to_string()))
            })
            .collect::<Result<_, GatewayError>>()?;
        indexed.sort_by_key(|(i, _)| *i);
        Ok(indexed.into_iter().map(|(_, c)| c).collect())
    }

    fn score_tokens(&self, ctx: &RequestCtx<'_>, text: &str) -> Result<Vec<RawToken>, GatewayError> {
        let body = json!({
            "model": ctx.endpoint.model_name,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let resp = self.post("/v1/completions", &body)?;
        let lp = &resp["choices"][0]["logprobs"];
        let tokens = lp["tokens"].as_array().ok_or_else(|| malformed("logprobs.tokens"))?;
        let values = lp["token_logprobs"]
            .as_array()
            .ok_or_else(|| malformed("logprobs.token_logprobs"))?;
        if tokens.len() != values.len() {
            return Err(malformed("token/logprob alignment"));
        }
        tokens
            .iter()
            .zip(values)
            .map(|(t, v)| {
                Ok(RawToken {
                    text: t.as_str().ok_or_else(|| malformed("token text"))?.to_string(),
                    logprob: v.as_f64(),
                })
            })
            .collect()
    }

    fn commonsense(&self, _ctx: &RequestCtx<'_>, text: &str) -> Result<f64, GatewayError> {
        let resp = self.post("/score", &json!({ "text": text }))?;
        resp["score"].as_f64().ok_or_else(|| malformed("score"))
    }

    fn embed(&self, ctx: &RequestCtx<'_>, text: &str) -> Result<Vec<f64>, GatewayError> {
        let resp = self.post(
            "/v1/embeddings",
            &json!({ "model": ctx.endpoint.model_name, "input": text }),
        )?;
        resp["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| malformed("data[0].embedding"))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| malformed("embedding component")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delay_grows_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        let d0 = p.delay(0);
        assert!(d0 >= Duration::from_millis(50) && d0 < Duration::from_millis(100));
        let d3 = p.delay(3);
        assert!(d3 >= Duration::from_millis(175) && d3 < Duration::from_millis(350));
    }

    #[test]
    fn truncate_respects_char_boundaries() {
        let s = "é".repeat(400);
        assert!(truncate(&s).ends_with('…'));
    }
}
