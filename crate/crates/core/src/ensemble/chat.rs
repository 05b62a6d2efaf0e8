//! Chat-completion adapters.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{parse_prediction_input, EnsembleResponse, Selection};
use crate::backend::{read_script, BackendError, CallLog, HttpJsonClient, RateLimited, Retrying};
use crate::metrics::{tokenize, word_error_rate};
use crate::textnorm::{normalize_text, NormalizationRules};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn user_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

/// Hex SHA-256 of the request's compact JSON encoding. Keys the scripted
/// chat backend.
pub fn request_digest(request: &ChatRequest) -> String {
    let encoded = serde_json::to_vec(request).expect("chat request serializes");
    hex::encode(Sha256::digest(&encoded))
}

pub trait ChatBackend: Send + Sync {
    /// Returns the assistant message content.
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend> ChatBackend for Retrying<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.policy.run(|| self.inner.complete(request))
    }
}

impl<B: ChatBackend> ChatBackend for RateLimited<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.limiter.acquire();
        self.inner.complete(request)
    }
}

/// `POST /chat` with `{messages, temperature}`, answering `{content}`.
#[derive(Debug, Clone)]
pub struct HttpChat {
    client: HttpJsonClient,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

impl HttpChat {
    pub fn new(base_url: &str, timeout: Duration, api_key: Option<String>) -> Self {
        HttpChat {
            client: HttpJsonClient::new(base_url, timeout).with_bearer(api_key),
        }
    }
}

impl ChatBackend for HttpChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let reply: ChatReply = self.client.post("/chat", request)?;
        Ok(reply.content)
    }
}

/// Reply synthesized when no digest matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatStrategy {
    /// Pick the candidate with the lowest WER against the closest of the
    /// planted references; ties go to the lower key.
    MinWer { references: Vec<Vec<String>> },
    /// Always pick `prediction_1`.
    First,
    /// Declare every candidate invalid.
    NoneValid,
    /// Reply with text that contains no JSON object.
    Garbage,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatScript {
    /// Request digest to reply content.
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<ChatStrategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatCall {
    pub digest: String,
    pub request: ChatRequest,
}

#[derive(Debug, Default)]
pub struct ScriptedChat {
    script: ChatScript,
    log: CallLog<ChatCall>,
}

impl ScriptedChat {
    pub fn new(script: ChatScript) -> Self {
        ScriptedChat {
            script,
            log: CallLog::default(),
        }
    }

    pub fn with_strategy(strategy: ChatStrategy) -> Self {
        Self::new(ChatScript {
            responses: BTreeMap::new(),
            strategy: Some(strategy),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(read_script(path)?))
    }

    pub fn with_log_file(mut self, path: &Path) -> std::io::Result<Self> {
        self.log = CallLog::with_file(path)?;
        Ok(self)
    }

    pub fn calls(&self) -> Vec<ChatCall> {
        self.log.snapshot()
    }
}

fn min_wer_choice(candidates: &[(String, Vec<String>)], references: &[Vec<String>]) -> usize {
    let rules = NormalizationRules::default();
    let score = |lines: &[String]| -> f64 {
        let hyp = normalize_text(&lines.join(" "), &rules);
        references
            .iter()
            .filter_map(|r| {
                let reference = normalize_text(&r.join(" "), &rules);
                word_error_rate(&tokenize(&reference), &tokenize(&hyp)).ok()
            })
            .map(|b| b.wer)
            .fold(f64::INFINITY, f64::min)
    };
    let mut best = (0, f64::INFINITY);
    for (i, (_, lines)) in candidates.iter().enumerate() {
        let s = score(lines);
        if s < best.1 {
            best = (i, s);
        }
    }
    best.0
}

impl ChatStrategy {
    fn reply(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let candidates = || {
            request
                .user_content()
                .and_then(parse_prediction_input)
                .ok_or_else(|| BackendError::Input("user message holds no prediction JSON".into()))
        };
        let chosen = |c: &[(String, Vec<String>)], i: usize| EnsembleResponse {
            reasons: format!("{} is closest", c[i].0),
            selection: Selection::Chosen {
                key: c[i].0.clone(),
                lines: c[i].1.clone(),
            },
        };
        let response = match self {
            ChatStrategy::Garbage => return Ok("I am not sure what you mean.".to_string()),
            ChatStrategy::NoneValid => EnsembleResponse {
                reasons: "all predictions are nonsense".into(),
                selection: Selection::NoneValid,
            },
            ChatStrategy::First => {
                let c = candidates()?;
                chosen(&c, 0)
            }
            ChatStrategy::MinWer { references } => {
                let c = candidates()?;
                chosen(&c, min_wer_choice(&c, references))
            }
        };
        Ok(response.to_json())
    }
}

impl ChatBackend for ScriptedChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let digest = request_digest(request);
        self.log.record(ChatCall {
            digest: digest.clone(),
            request: request.clone(),
        });
        if let Some(content) = self.script.responses.get(&digest) {
            return Ok(content.clone());
        }
        match &self.script.strategy {
            Some(strategy) => strategy.reply(request),
            None => Err(BackendError::Input(format!(
                "no scripted chat response for digest {digest}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(user: &str) -> ChatRequest {
        ChatRequest {
            messages: vec![
                ChatMessage {
                    role: Role::System,
                    content: "sys".into(),
                },
                ChatMessage {
                    role: Role::User,
                    content: user.into(),
                },
            ],
            temperature: 0.0,
        }
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = request("x");
        assert_eq!(request_digest(&a), request_digest(&a.clone()));
        assert_ne!(request_digest(&a), request_digest(&request("y")));
        assert_eq!(request_digest(&a).len(), 64);
    }

    #[test]
    fn scripted_digest_lookup() {
        let req = request("hello");
        let mut script = ChatScript::default();
        script.responses.insert(request_digest(&req), "reply".into());
        let chat = ScriptedChat::new(script);
        assert_eq!(chat.complete(&req).unwrap(), "reply");
        assert!(matches!(chat.complete(&request("other")), Err(BackendError::Input(_))));
        assert_eq!(chat.calls().len(), 2);
    }

    #[test]
    fn min_wer_strategy_picks_closest() {
        let chat = ScriptedChat::with_strategy(ChatStrategy::MinWer {
            references: vec![vec!["the sky is blue".into()]],
        });
        let content = chat
            .complete(&request(
                r#"{"prediction_1":"the sky was glue","prediction_2":"the sky is blue","prediction_3":"a sky"}"#,
            ))
            .unwrap();
        let parsed = super::super::parse_response(
            &content,
            &["prediction_1".into(), "prediction_2".into(), "prediction_3".into()],
        )
        .unwrap();
        assert_eq!(
            parsed.selection,
            Selection::Chosen {
                key: "prediction_2".into(),
                lines: vec!["the sky is blue".into()]
            }
        );
    }

    #[test]
    fn strategy_script_shape() {
        let script: ChatScript =
            serde_json::from_str(r#"{"strategy": {"kind": "min_wer", "references": [["a b"]]}}"#)
                .unwrap();
        assert!(matches!(script.strategy, Some(ChatStrategy::MinWer { .. })));
        let script: ChatScript = serde_json::from_str(r#"{"strategy": {"kind": "none_valid"}}"#).unwrap();
        assert_eq!(script.strategy, Some(ChatStrategy::NoneValid));
    }
}
