use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use llata_core::oracle::{BackendKind, Oracle, OracleConfig};
use llata_core::Error;

struct Seen {
    auth: Vec<String>,
    bodies: Vec<serde_json::Value>,
}

/// Serves one scripted `(status, body)` per connection, then stops.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Seen>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Seen {
        auth: Vec::new(),
        bodies: Vec::new(),
    }));
    let log = Arc::clone(&seen);
    let handle = thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    log.lock()
                        .unwrap()
                        .auth
                        .push(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock()
                .unwrap()
                .bodies
                .push(serde_json::from_slice(&buf).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1/chat/completions"), seen, handle)
}

fn answer(content: &str) -> String {
    serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] })
        .to_string()
}

fn config(endpoint: String, var: &str) -> OracleConfig {
    OracleConfig {
        backend: BackendKind::Remote,
        endpoint: Some(endpoint),
        model: "test-model".into(),
        api_key_env: Some(var.into()),
        timeout_secs: 5,
        max_retries: 2,
        retry_backoff_ms: 1,
        max_in_flight: 1,
        ..Default::default()
    }
}

#[test]
fn retries_server_errors_then_parses() {
    std::env::set_var("LLATA_TEST_KEY_A", "secret-a");
    let (endpoint, seen, handle) =
        serve(vec![(503, "{}".into()), (200, answer("Answer: [1, 8, 0]"))]);
    let oracle = Oracle::from_config(&config(endpoint, "LLATA_TEST_KEY_A"), None).unwrap();
    let logits = oracle.infer(0, "which class?", 3).unwrap();
    handle.join().unwrap();
    assert_eq!(logits.values(), &[1, 8, 0]);
    assert_eq!(oracle.stats().calls, 2);

    let seen = seen.lock().unwrap();
    assert!(seen.auth.iter().all(|a| a == "Bearer secret-a"));
    let body = &seen.bodies[0];
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "which class?");
}

#[test]
fn unparseable_answer_falls_back_to_uniform() {
    std::env::set_var("LLATA_TEST_KEY_B", "secret-b");
    let (endpoint, _, handle) = serve(vec![
        (200, answer("no idea")),
        (200, answer("still no idea")),
        (200, answer("[9]")),
    ]);
    let oracle = Oracle::from_config(&config(endpoint, "LLATA_TEST_KEY_B"), None).unwrap();
    let logits = oracle.infer(3, "prompt", 2).unwrap();
    handle.join().unwrap();
    assert_eq!(logits.values(), &[0, 0]);
    assert_eq!(oracle.stats().parse_fallbacks, 1);
    assert!(oracle.cache().is_empty());
}

#[test]
fn client_errors_are_not_retried_forever() {
    std::env::set_var("LLATA_TEST_KEY_C", "secret-c");
    let (endpoint, _, handle) = serve(vec![(401, "{}".into())]);
    let oracle = Oracle::from_config(&config(endpoint, "LLATA_TEST_KEY_C"), None).unwrap();
    let err = oracle.infer(0, "prompt", 2).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, Error::Oracle(_)), "{err}");
}

#[test]
fn missing_key_variable_is_a_config_error() {
    let cfg = config("http://127.0.0.1:9/".into(), "LLATA_TEST_KEY_UNSET");
    assert!(matches!(
        Oracle::from_config(&cfg, None),
        Err(Error::Config(_))
    ));
}
