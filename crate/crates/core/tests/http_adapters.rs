use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use lyricscribe::asr::{AsrBackend, AsrRequest, HttpAsr, TimeSpan};
use lyricscribe::backend::{AudioRef, AudioTransport, BackendError, RetryPolicy, Retrying};
use lyricscribe::ensemble::{ChatBackend, ChatMessage, ChatRequest, HttpChat, Role};
use lyricscribe::gate::{HttpTagger, TagBackend};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    headers: Vec<(String, String)>,
    body: Value,
}

impl Seen {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// Answers each connection with the next canned (status, body) and records
/// what it was sent.
struct TestServer {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl TestServer {
    fn start(replies: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            for (status, body) in replies {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
                let mut headers = Vec::new();
                loop {
                    line.clear();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    let (k, v) = l.split_once(':').unwrap();
                    headers.push((k.trim().to_string(), v.trim().to_string()));
                }
                let find = |name: &str| {
                    headers
                        .iter()
                        .find(|(k, _): &&(String, String)| k.eq_ignore_ascii_case(name))
                        .map(|(_, v)| v.clone())
                };
                let raw = if let Some(len) = find("content-length") {
                    let mut buf = vec![0; len.parse().unwrap()];
                    reader.read_exact(&mut buf).unwrap();
                    buf
                } else {
                    read_chunked(&mut reader)
                };
                log.lock().unwrap().push(Seen {
                    path,
                    headers,
                    body: serde_json::from_slice(&raw).unwrap_or(Value::Null),
                });
                let mut stream = stream;
                let response = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        TestServer { url, seen }
    }

    fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn read_chunked(reader: &mut impl BufRead) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let mut size = String::new();
        reader.read_line(&mut size).unwrap();
        let n = usize::from_str_radix(size.trim(), 16).unwrap();
        let mut chunk = vec![0; n + 2];
        reader.read_exact(&mut chunk).unwrap();
        if n == 0 {
            return out;
        }
        out.extend_from_slice(&chunk[..n]);
    }
}

fn ok(body: Value) -> (u16, String) {
    (200, body.to_string())
}

const T: Duration = Duration::from_secs(5);

fn transcript() -> Value {
    json!({"language": "en", "segments": [
        {"start": 2.0, "end": 3.0, "text": "second", "no_speech_prob": 0.2},
        {"start": 0.0, "end": 1.5, "text": "first", "no_speech_prob": 0.1}
    ]})
}

#[test]
fn transcribe_wire_format() {
    let server = TestServer::start(vec![ok(transcript())]);
    let asr = HttpAsr::new(&server.url, T, AudioTransport::Path);
    let request = AsrRequest {
        language_hint: Some("en".into()),
        span: Some(TimeSpan { start_s: 1.0, end_s: 4.0 }),
        ..AsrRequest::full_track("songs/a.wav".into(), "lyrics:", 2)
    };
    let prediction = asr.transcribe(&request).unwrap();
    assert_eq!(prediction.run_index, 2);
    assert_eq!(prediction.lines(), vec!["first", "second"]);

    let seen = server.seen();
    assert_eq!(seen[0].path, "/transcribe");
    assert_eq!(
        seen[0].body,
        json!({"audio": "songs/a.wav", "prompt": "lyrics:", "language": "en", "seed": 2, "start": 1.0, "end": 4.0})
    );
    assert!(seen[0].header("authorization").is_none());
}

#[test]
fn base64_transport_inlines_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.wav");
    std::fs::write(&path, b"RIFF").unwrap();
    let server = TestServer::start(vec![ok(json!({"scores": {"Singing": 0.5}}))]);
    let tagger = HttpTagger::new(&server.url, T, AudioTransport::Base64);
    let scores = tagger.tag(&AudioRef::new(path.to_str().unwrap())).unwrap();
    assert_eq!(scores.get("Singing"), 0.5);
    let seen = server.seen();
    assert_eq!(seen[0].path, "/tag");
    assert_eq!(seen[0].body, json!({"audio": "UklGRg==", "encoding": "base64"}));
}

#[test]
fn detect_language_wire_format() {
    let server = TestServer::start(vec![
        ok(json!({"language": "fr", "probability": 0.8})),
        ok(json!({"language": "fr", "probability": 1.8})),
    ]);
    let asr = HttpAsr::new(&server.url, T, AudioTransport::Path);
    let guess = asr.detect_language(&"a.wav".into()).unwrap();
    assert_eq!((guess.language.as_str(), guess.confidence), ("fr", 0.8));
    assert!(matches!(asr.detect_language(&"a.wav".into()), Err(BackendError::Protocol(_))));
    assert_eq!(server.seen()[0].path, "/detect_language");
    assert_eq!(server.seen()[0].body, json!({"audio": "a.wav"}));
}

fn chat_request() -> ChatRequest {
    ChatRequest {
        messages: vec![
            ChatMessage { role: Role::System, content: "instructions".into() },
            ChatMessage { role: Role::User, content: "{\"prediction_1\": \"a\"}".into() },
        ],
        temperature: 0.0,
    }
}

#[test]
fn chat_sends_bearer_and_hides_it() {
    let secret = "sk-test-7f3a9c";
    let server = TestServer::start(vec![ok(json!({"content": "hi"}))]);
    let chat = HttpChat::new(&server.url, T, Some(secret.into()));
    assert_eq!(chat.complete(&chat_request()).unwrap(), "hi");
    let seen = server.seen();
    assert_eq!(seen[0].path, "/chat");
    assert_eq!(seen[0].header("authorization"), Some(format!("Bearer {secret}").as_str()));
    assert_eq!(seen[0].body["temperature"], json!(0.0));
    assert_eq!(seen[0].body["messages"][0], json!({"role": "system", "content": "instructions"}));
    assert!(!format!("{chat:?}").contains(secret));
}

#[test]
fn chat_failure_messages_omit_the_key() {
    let secret = "sk-test-0b1d";
    let server = TestServer::start(vec![(401, format!("{{\"error\": \"bad key {secret}\"}}"))]);
    let chat = HttpChat::new(&server.url, T, Some(secret.into()));
    let err = chat.complete(&chat_request()).unwrap_err();
    assert!(matches!(err, BackendError::Input(_)));
    assert!(!err.to_string().contains(secret), "{err}");
    assert!(err.to_string().contains("<redacted>"));
}

#[test]
fn status_codes_map_to_error_kinds() {
    let server = TestServer::start(vec![
        (429, "{}".into()),
        (503, "{}".into()),
        (400, "{\"error\": \"bad audio\"}".into()),
        (200, "not json".into()),
        ok(json!({"scores": {"Singing": 2.0}})),
    ]);
    let tagger = HttpTagger::new(&server.url, T, AudioTransport::Path);
    let audio = AudioRef::new("x.wav");
    assert!(matches!(tagger.tag(&audio), Err(BackendError::Transport(_))));
    assert!(matches!(tagger.tag(&audio), Err(BackendError::Transport(_))));
    match tagger.tag(&audio) {
        Err(BackendError::Input(msg)) => assert!(msg.contains("bad audio")),
        other => panic!("{other:?}"),
    }
    assert!(matches!(tagger.tag(&audio), Err(BackendError::Protocol(_))));
    assert!(matches!(tagger.tag(&audio), Err(BackendError::Protocol(_))));
}

#[test]
fn transient_failures_are_retried() {
    let server = TestServer::start(vec![(429, "{}".into()), (502, "{}".into()), ok(transcript())]);
    let asr = Retrying::new(HttpAsr::new(&server.url, T, AudioTransport::Path), RetryPolicy::immediate(3));
    let prediction = asr.transcribe(&AsrRequest::full_track("a.wav".into(), "", 0)).unwrap();
    assert_eq!(prediction.segments.len(), 2);
    assert_eq!(server.seen().len(), 3);
}

#[test]
fn input_errors_are_not_retried() {
    let server = TestServer::start(vec![(404, "{}".into()), ok(transcript())]);
    let asr = Retrying::new(HttpAsr::new(&server.url, T, AudioTransport::Path), RetryPolicy::immediate(3));
    let err = asr.transcribe(&AsrRequest::full_track("a.wav".into(), "", 0)).unwrap_err();
    assert!(matches!(err, BackendError::Input(_)));
    assert_eq!(server.seen().len(), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let asr = HttpAsr::new(&format!("http://127.0.0.1:{port}"), T, AudioTransport::Path);
    assert!(matches!(asr.detect_language(&"a.wav".into()), Err(BackendError::Transport(_))));
}
