//! OpenAI-compatible HTTP backend.
//!
//! Chat prompts go to `/chat/completions` with `top_logprobs`; raw template
//! prompts go to `/completions` with `logprobs`. Forced pairs use the
//! completions endpoint with `echo` and read the log-probability of the
//! appended answer tokens.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    Backend, BackendFailure, BackendResult, QueryRequest, TextGenerator, TokenDistribution, TopK,
    YesNoMass,
};
use crate::prompt::{render_raw, RenderMode, RenderedPrompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAiConfig {
    /// e.g. `https://api.openai.com/v1`
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the API key; no key is sent when unset.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}

fn default_timeout() -> u64 {
    60
}

pub struct OpenAiBackend {
    id: String,
    config: OpenAiConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiBackend {
    pub fn new(id: impl Into<String>, config: OpenAiConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        OpenAiBackend {
            id: id.into(),
            config,
            api_key,
            agent,
        }
    }

    fn post(&self, path: &str, body: &Value) -> BackendResult<Value> {
        let url = format!("{}/{}", self.config.base_url.trim_end_matches('/'), path);
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendFailure::transient(format!("transport error: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendFailure::transient(format!("reading response: {e}")))?;
        if status == 429 || status >= 500 {
            return Err(BackendFailure::transient(format!("HTTP {status}: {text}")));
        }
        if status >= 400 {
            return Err(BackendFailure::fatal(format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text)
            .map_err(|e| BackendFailure::fatal(format!("malformed response body: {e}")))
    }

    fn raw_text(prompt: &RenderedPrompt) -> BackendResult<String> {
        let template = prompt.template_id().ok_or_else(|| {
            BackendFailure::fatal("raw completion requires a template id")
        })?;
        Ok(render_raw(prompt, template)?)
    }

    fn forced_logprob(&self, prompt: &RenderedPrompt, prefix: &str, answer: &str) -> BackendResult<f64> {
        let body = json!({
            "model": self.config.model,
            "prompt": format!("{prefix}{answer}"),
            "max_tokens": 1,
            "temperature": prompt.decoding().temperature,
            "logprobs": 1,
            "echo": true,
        });
        let v = self.post("completions", &body)?;
        parse_echo_logprob(&v, prefix.chars().count(), answer.chars().count())
    }
}

impl Backend for OpenAiBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn next_token(&self, request: &QueryRequest<'_>) -> BackendResult<TopK> {
        let prompt = request.prompt;
        let k = prompt.decoding().top_k;
        let entries = match prompt.mode() {
            RenderMode::ChatMessages => {
                let body = json!({
                    "model": self.config.model,
                    "messages": prompt.turns(),
                    "max_tokens": 1,
                    "temperature": prompt.decoding().temperature,
                    "logprobs": true,
                    "top_logprobs": k,
                });
                parse_chat_top_logprobs(&self.post("chat/completions", &body)?)?
            }
            RenderMode::RawTemplate => {
                let body = json!({
                    "model": self.config.model,
                    "prompt": Self::raw_text(prompt)?,
                    "max_tokens": 1,
                    "temperature": prompt.decoding().temperature,
                    "logprobs": k,
                });
                parse_completion_top_logprobs(&self.post("completions", &body)?)?
            }
        };
        Ok(TopK {
            distribution: TokenDistribution::from_logprobs(entries, k)?,
            converted: true,
        })
    }

    fn forced_pair(&self, request: &QueryRequest<'_>) -> BackendResult<YesNoMass> {
        let prompt = request.prompt;
        if prompt.mode() != RenderMode::RawTemplate {
            return Err(BackendFailure::fatal(
                "forced-pair readout requires raw_template rendering",
            ));
        }
        let prefix = Self::raw_text(prompt)?;
        let yes = self.forced_logprob(prompt, &prefix, "yes")?;
        let no = self.forced_logprob(prompt, &prefix, "no")?;
        Ok(YesNoMass::new(yes.exp(), no.exp()))
    }
}

impl TextGenerator for OpenAiBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, system: &str, user: &str, temperature: f64, seed: u64) -> BackendResult<String> {
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": temperature,
            "seed": seed,
        });
        let v = self.post("chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendFailure::fatal("response has no message content"))
    }
}

fn malformed(what: &str) -> BackendFailure {
    BackendFailure::fatal(format!("malformed response: missing {what}"))
}

/// `choices[0].logprobs.content[0].top_logprobs[*].{token, logprob}`
pub(crate) fn parse_chat_top_logprobs(v: &Value) -> BackendResult<Vec<(String, f64)>> {
    let items = v
        .pointer("/choices/0/logprobs/content/0/top_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("choices[0].logprobs.content[0].top_logprobs"))?;
    items
        .iter()
        .map(|item| {
            let token = item.get("token").and_then(Value::as_str).ok_or_else(|| malformed("token"))?;
            let lp = item.get("logprob").and_then(Value::as_f64).ok_or_else(|| malformed("logprob"))?;
            Ok((token.to_string(), lp))
        })
        .collect()
}

/// `choices[0].logprobs.top_logprobs[0]` as a `{token: logprob}` object.
pub(crate) fn parse_completion_top_logprobs(v: &Value) -> BackendResult<Vec<(String, f64)>> {
    let map = v
        .pointer("/choices/0/logprobs/top_logprobs/0")
        .and_then(Value::as_object)
        .ok_or_else(|| malformed("choices[0].logprobs.top_logprobs[0]"))?;
    map.iter()
        .map(|(token, lp)| {
            lp.as_f64()
                .map(|lp| (token.clone(), lp))
                .ok_or_else(|| malformed("logprob value"))
        })
        .collect()
}

/// Sums the echoed log-probabilities of the tokens covering the answer span.
pub(crate) fn parse_echo_logprob(v: &Value, prefix_chars: usize, answer_chars: usize) -> BackendResult<f64> {
    let lp = v.pointer("/choices/0/logprobs").ok_or_else(|| malformed("choices[0].logprobs"))?;
    let offsets = lp.get("text_offset").and_then(Value::as_array).ok_or_else(|| malformed("text_offset"))?;
    let logprobs = lp.get("token_logprobs").and_then(Value::as_array).ok_or_else(|| malformed("token_logprobs"))?;
    let end = prefix_chars + answer_chars;
    let mut total = 0.0;
    let mut matched = 0;
    for (off, lp) in offsets.iter().zip(logprobs) {
        let off = off.as_u64().ok_or_else(|| malformed("numeric text_offset"))? as usize;
        if off >= prefix_chars && off < end {
            total += lp.as_f64().ok_or_else(|| malformed("numeric token logprob"))?;
            matched += 1;
        }
    }
    if matched == 0 {
        return Err(BackendFailure::fatal("echoed tokens do not cover the forced answer"));
    }
    Ok(total)
}
