use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use super::{Engine, EngineError, EngineReply, EngineRequest};

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_in_flight() -> usize {
    4
}

/// Chat-completions endpoint settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL up to and including the API version, e.g. `http://host:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding a bearer token, if the server wants one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            auth_token_env: None,
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_max_in_flight(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

pub struct RemoteEngine {
    id: String,
    config: RemoteConfig,
    client: reqwest::Client,
    token: Option<String>,
    slots: Semaphore,
}

impl RemoteEngine {
    pub fn new(id: impl Into<String>, config: RemoteConfig) -> Result<Self, EngineError> {
        if config.max_in_flight == 0 {
            return Err(EngineError::Config("max_in_flight must be >= 1".into()));
        }
        let token = match &config.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                EngineError::Config(format!("auth token variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| EngineError::Config(e.to_string()))?;
        Ok(Self {
            id: id.into(),
            slots: Semaphore::new(config.max_in_flight),
            config,
            client,
            token,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn authorize(&self, builder: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.token {
            Some(t) => builder.bearer_auth(t),
            None => builder,
        }
    }

    fn unavailable(&self, detail: impl std::fmt::Display) -> EngineError {
        EngineError::Unavailable(format!("{}: {detail}", self.id))
    }
}

#[async_trait]
impl Engine for RemoteEngine {
    fn id(&self) -> &str {
        &self.id
    }

    async fn generate(&self, request: &EngineRequest) -> Result<EngineReply, EngineError> {
        let start = Instant::now();
        request.validate()?;
        let _permit = self
            .slots
            .acquire()
            .await
            .map_err(|e| self.unavailable(e))?;
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "top_p": request.top_p,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        let response = self
            .authorize(self.client.post(self.url("chat/completions")))
            .json(&body)
            .send()
            .await
            .map_err(|e| self.unavailable(e))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().await.unwrap_or_default();
            return Err(self.unavailable(format!("HTTP {status}: {text}")));
        }
        let parsed: ChatResponse = response.json().await.map_err(|e| self.unavailable(e))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| self.unavailable("response has no choices"))?;
        Ok(EngineReply {
            text,
            latency: start.elapsed(),
            engine_id: self.id.clone(),
        })
    }

    async fn probe(&self) -> Result<(), EngineError> {
        let response = self
            .authorize(self.client.get(self.url("models")))
            .send()
            .await
            .map_err(|e| self.unavailable(e))?;
        if response.status().is_success() {
            Ok(())
        } else {
            Err(self.unavailable(format!("probe HTTP {}", response.status())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SamplingParams;
    use axum::routing::{get, post};
    use axum::{Json, Router};

    async fn serve(router: Router) -> String {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
        format!("http://{addr}/v1")
    }

    #[tokio::test]
    async fn maps_first_choice_text() {
        let router = Router::new()
            .route(
                "/v1/chat/completions",
                post(|Json(body): Json<serde_json::Value>| async move {
                    assert_eq!(body["max_tokens"], 512);
                    assert_eq!(body["messages"][0]["content"], "hello");
                    Json(json!({"choices": [{"message": {"role": "assistant", "content": "$\\boxed{5}$"}}]}))
                }),
            )
            .route("/v1/models", get(|| async { Json(json!({"data": []})) }));
        let engine = RemoteEngine::new("r", RemoteConfig::new(serve(router).await, "m")).unwrap();
        engine.probe().await.unwrap();
        let reply = engine
            .generate(&EngineRequest::new("hello", SamplingParams::default()))
            .await
            .unwrap();
        assert_eq!(reply.text, "$\\boxed{5}$");
        assert!(reply.latency > Duration::ZERO);
    }

    #[tokio::test]
    async fn non_2xx_is_unavailable() {
        let router = Router::new().route(
            "/v1/chat/completions",
            post(|| async { (axum::http::StatusCode::SERVICE_UNAVAILABLE, "overloaded") }),
        );
        let engine = RemoteEngine::new("r", RemoteConfig::new(serve(router).await, "m")).unwrap();
        let err = engine
            .generate(&EngineRequest::new("x", SamplingParams::default()))
            .await
            .unwrap_err();
        assert!(matches!(err, EngineError::Unavailable(ref d) if d.contains("503")), "{err}");
    }

    #[tokio::test]
    async fn never_blocks_past_timeout() {
        let router = Router::new().route(
            "/v1/chat/completions",
            post(|| async {
                tokio::time::sleep(Duration::from_secs(5)).await;
                "late"
            }),
        );
        let mut config = RemoteConfig::new(serve(router).await, "m");
        config.timeout_ms = 200;
        let engine = RemoteEngine::new("r", config).unwrap();
        let start = Instant::now();
        let err = engine
            .generate(&EngineRequest::new("x", SamplingParams::default()))
            .await
            .unwrap_err();
        assert!(matches!(err, EngineError::Unavailable(_)));
        assert!(start.elapsed() < Duration::from_millis(1500));
    }

    #[tokio::test]
    async fn unreachable_probe_fails() {
        let engine = RemoteEngine::new("r", RemoteConfig::new("http://127.0.0.1:1/v1", "m")).unwrap();
        assert!(matches!(engine.probe().await, Err(EngineError::Unavailable(_))));
    }
}
