use std::collections::BTreeMap;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use super::{ChatRequest, ClientError, ProviderConfig, ProviderKind, Reply, Transport};

const ANTHROPIC_VERSION: &str = "2023-06-01";

/// The URL a request for `config` is posted to.
pub fn request_url(config: &ProviderConfig) -> String {
    let endpoint = config.endpoint().trim_end_matches('/');
    match config.kind {
        ProviderKind::Gemini => format!("{endpoint}/{}:generateContent", config.model_name),
        _ => endpoint.to_string(),
    }
}

/// JSON body in the provider's documented message schema. Images travel as
/// base64 payloads; the image part precedes the text part.
pub fn build_request_body(config: &ProviderConfig, request: &ChatRequest) -> Value {
    let image = request
        .image
        .as_ref()
        .map(|img| (img.media_type.as_str(), STANDARD.encode(&img.bytes)));
    let temperature = request.temperature.or(config.temperature);
    let mut body = match config.kind {
        ProviderKind::OpenaiCompatible | ProviderKind::Scripted => {
            let mut content = Vec::new();
            if let Some((media_type, data)) = &image {
                content.push(json!({
                    "type": "image_url",
                    "image_url": { "url": format!("data:{media_type};base64,{data}") }
                }));
            }
            content.push(json!({ "type": "text", "text": request.user_text }));
            let mut messages = Vec::new();
            if let Some(system) = &request.system_text {
                messages.push(json!({ "role": "system", "content": system }));
            }
            messages.push(json!({ "role": "user", "content": content }));
            json!({
                "model": config.model_name,
                "messages": messages,
                "max_tokens": request.max_output_tokens,
            })
        }
        ProviderKind::Anthropic => {
            let mut content = Vec::new();
            if let Some((media_type, data)) = &image {
                content.push(json!({
                    "type": "image",
                    "source": { "type": "base64", "media_type": media_type, "data": data }
                }));
            }
            content.push(json!({ "type": "text", "text": request.user_text }));
            let mut body = json!({
                "model": config.model_name,
                "max_tokens": request.max_output_tokens,
                "messages": [{ "role": "user", "content": content }],
            });
            if let Some(system) = &request.system_text {
                body["system"] = json!(system);
            }
            body
        }
        ProviderKind::Gemini => {
            let mut parts = Vec::new();
            if let Some((media_type, data)) = &image {
                parts.push(json!({ "inline_data": { "mime_type": media_type, "data": data } }));
            }
            parts.push(json!({ "text": request.user_text }));
            let mut generation = json!({ "maxOutputTokens": request.max_output_tokens });
            if let Some(t) = temperature {
                generation["temperature"] = json!(t);
            }
            let mut body = json!({
                "contents": [{ "role": "user", "parts": parts }],
                "generationConfig": generation,
            });
            if let Some(system) = &request.system_text {
                body["systemInstruction"] = json!({ "parts": [{ "text": system }] });
            }
            return body;
        }
    };
    if let Some(t) = temperature {
        body["temperature"] = json!(t);
    }
    body
}

fn missing(field: &str) -> ClientError {
    ClientError::Malformed {
        field: field.to_string(),
    }
}

fn token(value: &Value, pointer: &str, field: &str) -> Result<u64, ClientError> {
    value.pointer(pointer).and_then(Value::as_u64).ok_or_else(|| missing(field))
}

fn put(meta: &mut BTreeMap<String, String>, key: &str, value: Option<&Value>) {
    match value {
        Some(Value::String(s)) => {
            meta.insert(key.to_string(), s.clone());
        }
        Some(v) if !v.is_null() => {
            meta.insert(key.to_string(), v.to_string());
        }
        _ => {}
    }
}

/// Reads text and token usage from a provider response body. Token counts
/// are taken as reported, without adjustment.
pub fn parse_response(kind: ProviderKind, body: &Value) -> Result<Reply, ClientError> {
    let mut metadata = BTreeMap::new();
    let (text, input_tokens, output_tokens) = match kind {
        ProviderKind::OpenaiCompatible | ProviderKind::Scripted => {
            let text = body
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| missing("choices[0].message.content"))?;
            put(&mut metadata, "id", body.get("id"));
            put(&mut metadata, "model", body.get("model"));
            put(&mut metadata, "finish_reason", body.pointer("/choices/0/finish_reason"));
            put(
                &mut metadata,
                "reasoning_tokens",
                body.pointer("/usage/completion_tokens_details/reasoning_tokens"),
            );
            (
                text.to_string(),
                token(body, "/usage/prompt_tokens", "usage.prompt_tokens")?,
                token(body, "/usage/completion_tokens", "usage.completion_tokens")?,
            )
        }
        ProviderKind::Anthropic => {
            let blocks = body
                .get("content")
                .and_then(Value::as_array)
                .ok_or_else(|| missing("content"))?;
            let text: String = blocks
                .iter()
                .filter(|b| b.get("type").and_then(Value::as_str) == Some("text"))
                .filter_map(|b| b.get("text").and_then(Value::as_str))
                .collect();
            put(&mut metadata, "id", body.get("id"));
            put(&mut metadata, "model", body.get("model"));
            put(&mut metadata, "stop_reason", body.get("stop_reason"));
            (
                text,
                token(body, "/usage/input_tokens", "usage.input_tokens")?,
                token(body, "/usage/output_tokens", "usage.output_tokens")?,
            )
        }
        ProviderKind::Gemini => {
            let parts = body
                .pointer("/candidates/0/content/parts")
                .and_then(Value::as_array)
                .ok_or_else(|| missing("candidates[0].content.parts"))?;
            let text: String = parts
                .iter()
                .filter(|p| p.get("thought").and_then(Value::as_bool) != Some(true))
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect();
            let usage = body.get("usageMetadata").ok_or_else(|| missing("usageMetadata"))?;
            put(&mut metadata, "model", body.get("modelVersion"));
            put(&mut metadata, "finish_reason", body.pointer("/candidates/0/finishReason"));
            put(&mut metadata, "thoughts_tokens", usage.get("thoughtsTokenCount"));
            (
                text,
                token(usage, "/promptTokenCount", "usageMetadata.promptTokenCount")?,
                // Omitted by the API when zero.
                usage.get("candidatesTokenCount").and_then(Value::as_u64).unwrap_or(0),
            )
        }
    };
    Ok(Reply {
        text,
        input_tokens,
        output_tokens,
        metadata,
        reported_latency: None,
    })
}

/// Blocking HTTPS transport for the three provider schemas.
pub struct HttpTransport {
    config: ProviderConfig,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(config: ProviderConfig) -> Result<Self, ClientError> {
        if config.kind == ProviderKind::Scripted {
            return Err(ClientError::Config("scripted provider has no HTTP transport".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.request_timeout))
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn api_key(&self) -> Result<String, ClientError> {
        let var = self.config.api_key_env.as_deref().unwrap_or_default();
        match std::env::var(var) {
            Ok(key) if !key.is_empty() => Ok(key),
            _ => Err(ClientError::Auth(format!("environment variable `{var}` is not set"))),
        }
    }
}

fn classify_status(status: u16, body: String) -> ClientError {
    match status {
        401 | 403 => ClientError::Auth(format!("HTTP {status}: {body}")),
        408 | 429 | 500..=599 => ClientError::Transient(format!("HTTP {status}: {body}")),
        _ => ClientError::Rejected { status, body },
    }
}

impl Transport for HttpTransport {
    fn call(&self, request: &ChatRequest) -> Result<Reply, ClientError> {
        let key = self.api_key()?;
        let body = build_request_body(&self.config, request);
        let builder = self.client.post(request_url(&self.config)).json(&body);
        let builder = match self.config.kind {
            ProviderKind::Anthropic => builder
                .header("x-api-key", key)
                .header("anthropic-version", ANTHROPIC_VERSION),
            ProviderKind::Gemini => builder.header("x-goog-api-key", key),
            _ => builder.bearer_auth(key),
        };
        let response = builder
            .send()
            .map_err(|e| ClientError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .text()
            .map_err(|e| ClientError::Transient(e.to_string()))?;
        if !(200..300).contains(&status) {
            let mut snippet = text;
            snippet.truncate(500);
            return Err(classify_status(status, snippet));
        }
        let value: Value = serde_json::from_str(&text).map_err(|_| missing("body"))?;
        parse_response(self.config.kind, &value)
    }
}
