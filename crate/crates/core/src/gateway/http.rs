//! Chat-completions backend over HTTP.

use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{BackendError, ModelBackend, ModelEndpointConfig, ModelRequest};

/// Sends requests to an OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug, Default)]
pub struct HttpBackend;

impl HttpBackend {
    pub fn new() -> Self {
        Self
    }
}

fn mime_for(path: &str) -> &'static str {
    let lower = path.to_ascii_lowercase();
    if lower.ends_with(".jpg") || lower.ends_with(".jpeg") {
        "image/jpeg"
    } else if lower.ends_with(".gif") {
        "image/gif"
    } else if lower.ends_with(".webp") {
        "image/webp"
    } else if lower.ends_with(".bmp") {
        "image/bmp"
    } else {
        "image/png"
    }
}

fn image_url(image: &str) -> Result<String, BackendError> {
    if image.starts_with("http://") || image.starts_with("https://") || image.starts_with("data:") {
        return Ok(image.to_string());
    }
    let bytes = std::fs::read(image).map_err(|e| BackendError::ImageUnreadable(format!("{image}: {e}")))?;
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{};base64,{encoded}", mime_for(image)))
}

/// Request body in the chat-completions wire format.
pub(crate) fn request_body(config: &ModelEndpointConfig, request: &ModelRequest) -> Result<Value, BackendError> {
    let mut content = vec![json!({"type": "text", "text": request.prompt})];
    if let Some(image) = &request.image {
        content.push(json!({"type": "image_url", "image_url": {"url": image_url(image)?}}));
    }
    Ok(json!({
        "model": config.model_name,
        "temperature": config.temperature,
        "messages": [{"role": "user", "content": content}],
    }))
}

impl ModelBackend for HttpBackend {
    fn send(&self, config: &ModelEndpointConfig, request: &ModelRequest) -> Result<String, BackendError> {
        let key = if config.api_key_env.is_empty() {
            None
        } else {
            Some(std::env::var(&config.api_key_env).map_err(|_| {
                BackendError::Auth(format!("environment variable {} is not set", config.api_key_env))
            })?)
        };
        let body = request_body(config, request)?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let url = format!("{}/chat/completions", config.base_url.trim_end_matches('/'));
        let mut call = agent.post(&url);
        if let Some(key) = key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err(BackendError::Auth(format!("HTTP {status}"))),
            _ => {
                let text = response.body_mut().read_to_string().unwrap_or_default();
                return Err(BackendError::Transport(format!("HTTP {status}: {text}")));
            }
        }
        let value: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Transport(format!("invalid response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport("response has no message content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ModelRole, PromptName};

    #[test]
    fn wire_format() {
        let cfg = ModelEndpointConfig::new(ModelRole::Vision, "vlm").with_temperature(0.0);
        let req = ModelRequest::new(PromptName::EvalZeroShot, "hi".into()).with_image("https://h/f.png");
        let body = request_body(&cfg, &req).unwrap();
        assert_eq!(body["model"], "vlm");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"][0]["text"], "hi");
        assert_eq!(body["messages"][0]["content"][1]["image_url"]["url"], "https://h/f.png");
    }

    #[test]
    fn local_image_is_inlined() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jpg");
        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        let url = image_url(path.to_str().unwrap()).unwrap();
        assert_eq!(url, "data:image/jpeg;base64,AQID");
    }
}
