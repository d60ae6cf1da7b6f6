//! Chat-model port: one trait, a deterministic scripted mock for tests and
//! offline runs, and an HTTP adapter for chat-completions endpoints.

use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

/// What a model turn produced: plain text, or a request to run a tool.
#[derive(Debug, Clone, PartialEq)]
pub enum LlmReply {
    Text(String),
    ToolCall { name: String, arguments: serde_json::Value },
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("model endpoint unavailable: {0}")]
    Unavailable(String),
    #[error(
        "no scripted step matches the prompt ({remaining} steps left); prompt tail: {prompt_tail:?}"
    )]
    UnexpectedPrompt { remaining: usize, prompt_tail: String },
}

/// Stateless request/response interface to a chat model. Implementations
/// must tolerate concurrent `send` calls.
pub trait LlmPort: Send + Sync {
    fn send(
        &self,
        messages: &[ChatMessage],
        tool_schemas: &[serde_json::Value],
    ) -> Result<LlmReply, LlmError>;
}

/// One step of a scripted conversation, as stored in transcript files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptStep {
    /// Substring that must occur somewhere in the rendered prompt.
    pub expect_substring: String,
    /// Text the mock model answers with.
    pub respond: String,
}

struct MockStep {
    expect: String,
    reply: LlmReply,
    consumed: bool,
}

/// Deterministic mock model driven by an ordered transcript.
///
/// Each `send` scans the transcript top to bottom and consumes the first
/// unconsumed step whose `expect` substring occurs in the rendered prompt;
/// no match is a hard error rather than a canned default, so tests fail
/// loudly when prompts drift. First-match scanning keeps concurrent batch
/// runs deterministic as long as steps for different inputs use disjoint
/// markers.
pub struct ScriptedMock {
    steps: Mutex<Vec<MockStep>>,
}

impl ScriptedMock {
    pub fn new<E: Into<String>>(steps: Vec<(E, LlmReply)>) -> Self {
        ScriptedMock {
            steps: Mutex::new(
                steps
                    .into_iter()
                    .map(|(expect, reply)| MockStep {
                        expect: expect.into(),
                        reply,
                        consumed: false,
                    })
                    .collect(),
            ),
        }
    }

    pub fn from_steps(steps: Vec<ScriptStep>) -> Self {
        Self::new(
            steps
                .into_iter()
                .map(|step| (step.expect_substring, LlmReply::Text(step.respond)))
                .collect(),
        )
    }

    pub fn from_json_str(json: &str) -> Result<Self, LlmError> {
        let steps: Vec<ScriptStep> = serde_json::from_str(json)
            .map_err(|e| LlmError::Unavailable(format!("bad transcript: {e}")))?;
        Ok(Self::from_steps(steps))
    }

    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let raw = std::fs::read_to_string(&path).map_err(|e| {
            LlmError::Unavailable(format!("transcript {}: {e}", path.as_ref().display()))
        })?;
        Self::from_json_str(&raw)
    }

    /// Steps not yet consumed; tests assert 0 to prove full coverage.
    pub fn remaining(&self) -> usize {
        self.steps.lock().unwrap().iter().filter(|step| !step.consumed).count()
    }
}

impl LlmPort for ScriptedMock {
    fn send(
        &self,
        messages: &[ChatMessage],
        _tool_schemas: &[serde_json::Value],
    ) -> Result<LlmReply, LlmError> {
        let rendered: String =
            messages.iter().map(|m| format!("{}: {}\n", m.role.as_str(), m.content)).collect();
        let mut steps = self.steps.lock().unwrap();
        if let Some(step) =
            steps.iter_mut().find(|step| !step.consumed && rendered.contains(&step.expect))
        {
            step.consumed = true;
            return Ok(step.reply.clone());
        }
        let remaining = steps.iter().filter(|step| !step.consumed).count();
        let tail: String =
            rendered.chars().rev().take(160).collect::<Vec<_>>().into_iter().rev().collect();
        Err(LlmError::UnexpectedPrompt { remaining, prompt_tail: tail })
    }
}

pub const ENV_LLM_API_BASE: &str = "LLM_API_BASE";
pub const ENV_LLM_API_KEY: &str = "LLM_API_KEY";
pub const ENV_LLM_MODEL: &str = "LLM_MODEL";

/// Adapter for chat-completions HTTP endpoints (`POST {base}/chat/completions`
/// with bearer auth). Requests pin `temperature` to 0; this adapter is the
/// only place that knows the wire format.
pub struct LiveChatEndpoint {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl LiveChatEndpoint {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| LlmError::Unavailable(e.to_string()))?;
        Ok(LiveChatEndpoint { base_url: base_url.into(), model: model.into(), api_key, client })
    }

    /// Reads `LLM_API_BASE`, `LLM_API_KEY`, `LLM_MODEL`; an explicit model
    /// name wins over the environment.
    pub fn from_env(model_override: Option<&str>) -> Result<Self, LlmError> {
        let base_url = std::env::var(ENV_LLM_API_BASE)
            .map_err(|_| LlmError::Unavailable(format!("{ENV_LLM_API_BASE} is not set")))?;
        let model = match model_override {
            Some(model) => model.to_string(),
            None => std::env::var(ENV_LLM_MODEL).map_err(|_| {
                LlmError::Unavailable(format!("{ENV_LLM_MODEL} is not set and no model was given"))
            })?,
        };
        let api_key = std::env::var(ENV_LLM_API_KEY).ok();
        Self::new(base_url, model, api_key)
    }

    pub fn model(&self) -> &str {
        &self.model
    }
}

impl LlmPort for LiveChatEndpoint {
    fn send(
        &self,
        messages: &[ChatMessage],
        tool_schemas: &[serde_json::Value],
    ) -> Result<LlmReply, LlmError> {
        let wire_messages: Vec<serde_json::Value> = messages
            .iter()
            .map(|m| serde_json::json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": wire_messages,
            "temperature": 0,
        });
        if !tool_schemas.is_empty() {
            body["tools"] = serde_json::Value::Array(tool_schemas.to_vec());
        }

        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut request = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| LlmError::Unavailable(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| LlmError::Unavailable(e.to_string()))?;
        if !status.is_success() {
            return Err(LlmError::Unavailable(format!("HTTP {status}: {text}")));
        }

        let parsed: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| LlmError::Unavailable(format!("bad completion body: {e}")))?;
        let message = &parsed["choices"][0]["message"];
        if let Some(call) = message["tool_calls"].get(0) {
            let name = call["function"]["name"].as_str().unwrap_or_default().to_string();
            let raw_arguments = call["function"]["arguments"].as_str().unwrap_or("{}");
            let arguments = serde_json::from_str(raw_arguments)
                .unwrap_or(serde_json::Value::Object(Default::default()));
            return Ok(LlmReply::ToolCall { name, arguments });
        }
        match message["content"].as_str() {
            Some(content) => Ok(LlmReply::Text(content.to_string())),
            None => Err(LlmError::Unavailable("completion had no content".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    #[test]
    fn mock_consumes_first_matching_unconsumed_step() {
        let mock = ScriptedMock::new(vec![
            ("alpha", LlmReply::Text("first".into())),
            ("alpha", LlmReply::Text("second".into())),
            ("beta", LlmReply::Text("third".into())),
        ]);
        let prompt = [ChatMessage::user("contains alpha marker")];
        assert_eq!(mock.send(&prompt, &[]).unwrap(), LlmReply::Text("first".into()));
        assert_eq!(mock.send(&prompt, &[]).unwrap(), LlmReply::Text("second".into()));
        assert_eq!(mock.remaining(), 1);

        let err = mock.send(&prompt, &[]).unwrap_err();
        match err {
            LlmError::UnexpectedPrompt { remaining, .. } => assert_eq!(remaining, 1),
            other => panic!("expected loud mismatch, got {other}"),
        }
    }

    #[test]
    fn mock_matches_across_all_message_roles() {
        let mock = ScriptedMock::new(vec![("in the system text", LlmReply::Text("ok".into()))]);
        let prompt =
            [ChatMessage::system("marker in the system text"), ChatMessage::user("unrelated")];
        assert_eq!(mock.send(&prompt, &[]).unwrap(), LlmReply::Text("ok".into()));
        assert_eq!(mock.remaining(), 0);
    }

    #[test]
    fn transcript_files_round_trip() {
        let json = r#"[
            {"expect_substring": "CP", "respond": "chest pain"},
            {"expect_substring": "candidates", "respond": "{\"concept_id\": 77670}"}
        ]"#;
        let mock = ScriptedMock::from_json_str(json).unwrap();
        assert_eq!(mock.remaining(), 2);
        assert_eq!(
            mock.send(&[ChatMessage::user("expand CP")], &[]).unwrap(),
            LlmReply::Text("chest pain".into())
        );
        assert!(ScriptedMock::from_json_str("not json").is_err());
    }

    /// One-shot HTTP responder capturing the request it served.
    fn serve_once(response_body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let address = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(value) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = value.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; content_length];
            reader.read_exact(&mut body).unwrap();
            let reply = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                response_body.len(),
                response_body
            );
            stream.write_all(reply.as_bytes()).unwrap();
            format!("{head}{}", String::from_utf8_lossy(&body))
        });
        (address, handle)
    }

    #[test]
    fn live_endpoint_speaks_chat_completions() {
        let completion = r#"{"choices":[{"message":{"role":"assistant","content":"chest pain"}}]}"#;
        let (address, handle) = serve_once(completion);
        let endpoint =
            LiveChatEndpoint::new(address, "test-model", Some("secret-key".into())).unwrap();
        let reply = endpoint
            .send(&[ChatMessage::system("be terse"), ChatMessage::user("expand CP")], &[])
            .unwrap();
        assert_eq!(reply, LlmReply::Text("chest pain".into()));

        let captured = handle.join().unwrap();
        assert!(captured.starts_with("POST /chat/completions"));
        assert!(
            captured.contains("authorization: Bearer secret-key")
                || captured.contains("Authorization: Bearer secret-key")
        );
        let body_start = captured.find("\r\n\r\n").unwrap() + 4;
        let body: serde_json::Value = serde_json::from_str(&captured[body_start..]).unwrap();
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["temperature"], 0);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "expand CP");
        assert!(body.get("tools").is_none(), "no tools requested, none sent");
    }

    #[test]
    fn live_endpoint_decodes_tool_calls() {
        let completion = r#"{"choices":[{"message":{"role":"assistant","content":null,
            "tool_calls":[{"id":"call_1","type":"function",
            "function":{"name":"search_athena","arguments":"{\"keyword\":\"chest pain\"}"}}]}}]}"#;
        let (address, handle) = serve_once(completion);
        let endpoint = LiveChatEndpoint::new(address, "test-model", None).unwrap();
        let schema = serde_json::json!({"type": "function", "function": {"name": "search_athena"}});
        let reply = endpoint.send(&[ChatMessage::user("map CP")], &[schema]).unwrap();
        assert_eq!(
            reply,
            LlmReply::ToolCall {
                name: "search_athena".into(),
                arguments: serde_json::json!({"keyword": "chest pain"}),
            }
        );
        let captured = handle.join().unwrap();
        assert!(captured.contains("\"tools\":"));
        assert!(!captured.to_ascii_lowercase().contains("authorization: bearer"));
    }
}
