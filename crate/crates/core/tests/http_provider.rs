//! Drives the HTTP transport against a throwaway local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use cotdrive_core::client::{ChatRequest, ClientError, ImageAttachment, Provider, ProviderConfig, ProviderKind, RetryPolicy};

struct Captured {
    headers: Vec<String>,
    body: String,
}

/// Serves canned (status, body) responses in order, one per connection.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let captured = Arc::new(Mutex::new(Vec::new()));
    let hits = Arc::new(AtomicUsize::new(0));
    let (cap, count) = (captured.clone(), hits.clone());
    std::thread::spawn(move || {
        for (status, body) in responses {
            let Ok((stream, _)) = listener.accept() else { return };
            count.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            cap.lock().unwrap().push(Captured {
                headers,
                body: String::from_utf8(buf).unwrap(),
            });
            let mut stream = stream;
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}"), captured, hits)
}

fn request() -> ChatRequest {
    ChatRequest {
        system_text: None,
        user_text: "Describe the scene.".into(),
        image: Some(Arc::new(ImageAttachment {
            bytes: vec![1, 2, 3],
            media_type: "image/png".into(),
        })),
        max_output_tokens: 100,
        temperature: None,
        key: None,
    }
}

fn config(kind: ProviderKind, endpoint: String, env: &str) -> ProviderConfig {
    let mut c = ProviderConfig::new(kind, "test-model");
    c.endpoint = Some(endpoint);
    c.api_key_env = Some(env.into());
    c.request_timeout = 5.0;
    c
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        base: Duration::from_millis(5),
        factor: 2.0,
        jitter: 0.2,
    }
}

#[test]
fn openai_retries_429_then_reads_usage() {
    std::env::set_var("COTDRIVE_TEST_OPENAI_KEY", "sk-test");
    let ok = r#"{"choices":[{"message":{"content":"hello"},"finish_reason":"stop"}],"usage":{"prompt_tokens":4402,"completion_tokens":341}}"#;
    let (url, captured, hits) = serve(vec![(429, "{}".into()), (503, "{}".into()), (200, ok.into())]);
    let cfg = config(ProviderKind::OpenaiCompatible, format!("{url}/v1/chat/completions"), "COTDRIVE_TEST_OPENAI_KEY");
    let provider = Provider::from_config(cfg).unwrap().with_retry_policy(fast_retry());
    let resp = provider.send(&request()).unwrap();
    assert_eq!(resp.text, "hello");
    assert_eq!((resp.input_tokens, resp.output_tokens), (4402, 341));
    assert!(resp.latency >= 0.0);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    let cap = captured.lock().unwrap();
    assert!(cap[2].headers.iter().any(|h| h.eq_ignore_ascii_case("authorization: Bearer sk-test")));
    let body: serde_json::Value = serde_json::from_str(&cap[2].body).unwrap();
    assert_eq!(body["messages"][0]["content"][0]["image_url"]["url"], "data:image/png;base64,AQID");
}

#[test]
fn anthropic_auth_failure_is_not_retried() {
    std::env::set_var("COTDRIVE_TEST_ANTHROPIC_KEY", "bad");
    let (url, captured, hits) = serve(vec![(401, r#"{"error":"invalid x-api-key"}"#.into()), (200, "{}".into())]);
    let cfg = config(ProviderKind::Anthropic, url, "COTDRIVE_TEST_ANTHROPIC_KEY");
    let provider = Provider::from_config(cfg).unwrap().with_retry_policy(fast_retry());
    let err = provider.send(&request()).unwrap_err();
    assert!(matches!(err, ClientError::Auth(_)), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    let cap = captured.lock().unwrap();
    assert!(cap[0].headers.iter().any(|h| h.eq_ignore_ascii_case("x-api-key: bad")));
    assert!(cap[0].headers.iter().any(|h| h.eq_ignore_ascii_case("anthropic-version: 2023-06-01")));
}

#[test]
fn gemini_malformed_payload_names_field() {
    std::env::set_var("COTDRIVE_TEST_GEMINI_KEY", "g");
    let (url, captured, _) = serve(vec![(200, r#"{"candidates":[{"content":{"parts":[{"text":"x"}]}}]}"#.into())]);
    let cfg = config(ProviderKind::Gemini, url, "COTDRIVE_TEST_GEMINI_KEY");
    let provider = Provider::from_config(cfg).unwrap().with_retry_policy(fast_retry());
    let err = provider.send(&request()).unwrap_err();
    assert_eq!(
        err,
        ClientError::Malformed {
            field: "usageMetadata".into()
        }
    );
    let cap = captured.lock().unwrap();
    assert!(cap[0].headers[0].contains("/test-model:generateContent"));
}

#[test]
fn exhausted_retries_carry_last_cause() {
    std::env::set_var("COTDRIVE_TEST_OPENAI_KEY2", "k");
    let (url, _, hits) = serve(vec![(500, "a".into()), (500, "b".into()), (500, "c".into())]);
    let mut cfg = config(ProviderKind::OpenaiCompatible, url, "COTDRIVE_TEST_OPENAI_KEY2");
    cfg.max_retries = 2;
    let provider = Provider::from_config(cfg).unwrap().with_retry_policy(fast_retry());
    match provider.send(&request()).unwrap_err() {
        ClientError::RetriesExhausted { attempts, last } => {
            assert_eq!(attempts, 3);
            assert!(last.to_string().contains("HTTP 500: c"), "{last}");
        }
        other => panic!("{other}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}
