//! Providers for OpenAI-compatible HTTP endpoints (chat completions and
//! embeddings). Credentials come from an environment variable.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use cohort_core::embedding::{l2_norm, Embedder};
use cohort_core::llm::{LlmProvider, LlmRequest, ProviderError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    /// e.g. `https://api.openai.com/v1`
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    3
}

struct Client {
    name: &'static str,
    cfg: HttpProviderConfig,
    http: reqwest::blocking::Client,
    token: Option<String>,
}

impl Client {
    fn new(name: &'static str, cfg: HttpProviderConfig) -> Result<Self, ProviderError> {
        let token = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ProviderError::fatal(name, format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| ProviderError::fatal(name, e.to_string()))?;
        Ok(Client {
            name,
            cfg,
            http,
            token,
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let url = format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path);
        let mut last = ProviderError::fatal(self.name, "no attempt made");
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(250 * (1 << attempt.min(5))));
            }
            let mut req = self.http.post(&url).json(body);
            if let Some(t) = &self.token {
                req = req.bearer_auth(t);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => {
                    last = ProviderError::retriable(self.name, e.to_string());
                    continue;
                }
            };
            let status = resp.status();
            let text = resp.text().unwrap_or_default();
            if status.is_success() {
                return serde_json::from_str(&text).map_err(|e| {
                    ProviderError::fatal(self.name, format!("bad JSON from {url}: {e}"))
                });
            }
            let err = format!(
                "HTTP {status} from {url}: {}",
                text.chars().take(300).collect::<String>()
            );
            if status.as_u16() == 429 || status.is_server_error() {
                last = ProviderError::retriable(self.name, err);
            } else {
                return Err(ProviderError::fatal(self.name, err));
            }
        }
        Err(last)
    }
}

/// Chat completions client.
pub struct HttpLlm {
    client: Client,
}

impl HttpLlm {
    pub fn new(cfg: HttpProviderConfig) -> Result<Self, ProviderError> {
        Ok(HttpLlm {
            client: Client::new("http-llm", cfg)?,
        })
    }
}

impl LlmProvider for HttpLlm {
    fn complete(&self, request: &LlmRequest) -> Result<String, ProviderError> {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| json!({"role": m.role, "content": m.text}))
            .collect();
        let mut body = json!({
            "model": self.client.cfg.model,
            "messages": messages,
            "temperature": request.sampling.temperature,
        });
        if let Some(p) = request.sampling.top_p {
            body["top_p"] = json!(p);
        }
        if let Some(n) = request.sampling.max_tokens {
            body["max_tokens"] = json!(n);
        }
        let v = self.client.post("chat/completions", &body)?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                ProviderError::fatal("http-llm", "response has no choices[0].message.content")
            })
    }
}

/// Embeddings client; vectors are L2-normalized on arrival.
pub struct HttpEmbedder {
    client: Client,
    dimension: usize,
}

impl HttpEmbedder {
    /// Probes the endpoint once to learn the vector dimension.
    pub fn new(cfg: HttpProviderConfig) -> Result<Self, ProviderError> {
        let mut e = HttpEmbedder {
            client: Client::new("http-embedding", cfg)?,
            dimension: 0,
        };
        e.dimension = e.raw("dimension probe")?.len();
        Ok(e)
    }

    fn raw(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        let v = self.client.post(
            "embeddings",
            &json!({"model": self.client.cfg.model, "input": text}),
        )?;
        let arr = v["data"][0]["embedding"].as_array().ok_or_else(|| {
            ProviderError::fatal("http-embedding", "response has no data[0].embedding")
        })?;
        arr.iter()
            .map(|x| {
                x.as_f64().map(|f| f as f32).ok_or_else(|| {
                    ProviderError::fatal("http-embedding", "non-numeric embedding component")
                })
            })
            .collect()
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}", self.client.cfg.model)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        if text.trim().is_empty() {
            return Err(ProviderError::fatal(
                "http-embedding",
                "cannot embed empty text",
            ));
        }
        let mut v = self.raw(text)?;
        if v.len() != self.dimension {
            return Err(ProviderError::fatal(
                "http-embedding",
                format!("dimension changed from {} to {}", self.dimension, v.len()),
            ));
        }
        let norm = l2_norm(&v);
        if norm == 0.0 {
            return Err(ProviderError::fatal("http-embedding", "zero vector"));
        }
        for x in &mut v {
            *x = (f64::from(*x) / norm) as f32;
        }
        Ok(v)
    }
}
