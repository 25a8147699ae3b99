use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rar_core::corpus::MovieEntry;
use rar_core::embedding::{EmbeddingProvider, HttpEmbedder};
use rar_core::generator::{build_prompt, GeneratorEndpoint, HttpGenerator, HttpSettings};
use rar_core::RarError;
use serde_json::{json, Value};

enum Reply {
    Status(u16, String),
    Hang,
}

struct Stub {
    url: String,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<Value>>>,
    headers: Arc<Mutex<Vec<Vec<String>>>>,
}

fn read_request(stream: &mut TcpStream) -> (Vec<String>, Value) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut headers = Vec::new();
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap() == 0 {
            break;
        }
        let line = line.trim_end().to_string();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        headers.push(line);
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    (headers, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

/// Serves `script[i]` to the i-th request; the last entry repeats.
fn serve(script: Vec<Reply>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let headers = Arc::new(Mutex::new(Vec::new()));
    let (h, b, hd) = (hits.clone(), bodies.clone(), headers.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let i = h.fetch_add(1, Ordering::SeqCst);
            let (head, body) = read_request(&mut stream);
            b.lock().unwrap().push(body);
            hd.lock().unwrap().push(head);
            match &script[i.min(script.len() - 1)] {
                Reply::Hang => {
                    thread::spawn(move || {
                        thread::sleep(Duration::from_secs(5));
                        drop(stream);
                    });
                }
                Reply::Status(code, text) => {
                    let resp = format!(
                        "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                        text.len()
                    );
                    let _ = stream.write_all(resp.as_bytes());
                }
            }
        }
    });
    Stub { url, hits, bodies, headers }
}

fn chat(content: &str) -> String {
    json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string()
}

fn settings(url: &str, max_retries: u32, timeout_ms: u64) -> HttpSettings {
    HttpSettings {
        base_url: url.to_string(),
        api_key_env: String::new(),
        timeout_ms,
        max_retries,
        backoff_base_ms: 1,
        ..HttpSettings::default()
    }
}

fn entry(id: &str, title: &str) -> MovieEntry {
    MovieEntry {
        id: id.into(),
        title: title.into(),
        year: Some(1995),
        genre: vec!["crime".into()],
        director: vec!["Michael Mann".into()],
        cast: vec!["Al Pacino".into()],
        plot: "A heist.".into(),
    }
}

fn generator(url: &str, max_retries: u32, timeout_ms: u64) -> HttpGenerator {
    HttpGenerator::new(GeneratorEndpoint {
        http: settings(url, max_retries, timeout_ms),
        model_name: "stub-model".into(),
        thinking_passthrough: Some(json!({ "reasoning_effort": "low" })),
    })
    .unwrap()
}

#[test]
fn fixed_text_is_returned_and_request_is_well_formed() {
    let stub = serve(vec![Reply::Status(200, chat("1. Heat\n2. Ronin"))]);
    let (a, b) = (entry("m1", "Heat"), entry("m2", "Ronin"));
    let prompt = build_prompt(&["I like heists.".into()], &[&a, &b], 2).unwrap();
    let (text, attempts) = generator(&stub.url, 3, 2_000).generate_counted(&prompt).unwrap();
    assert_eq!(text, "1. Heat\n2. Ronin");
    assert_eq!(attempts, 1);
    let body = stub.bodies.lock().unwrap()[0].clone();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], prompt.render());
    assert_eq!(body["reasoning_effort"], "low");
    let head = stub.headers.lock().unwrap()[0].clone();
    assert!(head[0].starts_with("POST /chat/completions"));
}

#[test]
fn rate_limit_twice_then_success_takes_three_attempts() {
    let stub = serve(vec![
        Reply::Status(429, "{}".into()),
        Reply::Status(429, "{}".into()),
        Reply::Status(200, chat("1. Heat")),
    ]);
    let a = entry("m1", "Heat");
    let prompt = build_prompt(&["x".into()], &[&a], 1).unwrap();
    let (text, attempts) = generator(&stub.url, 3, 2_000).generate_counted(&prompt).unwrap();
    assert_eq!(text, "1. Heat");
    assert_eq!(attempts, 3);
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn persistent_timeout_exhausts_retries() {
    let stub = serve(vec![Reply::Hang]);
    let a = entry("m1", "Heat");
    let prompt = build_prompt(&["x".into()], &[&a], 1).unwrap();
    match generator(&stub.url, 2, 150).generate_counted(&prompt) {
        Err(RarError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected transport error, got {other:?}"),
    }
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn server_errors_are_retried_but_client_errors_are_not() {
    let stub = serve(vec![Reply::Status(503, "busy".into()), Reply::Status(200, chat("1. Heat"))]);
    let a = entry("m1", "Heat");
    let prompt = build_prompt(&["x".into()], &[&a], 1).unwrap();
    assert_eq!(generator(&stub.url, 1, 2_000).generate_counted(&prompt).unwrap().1, 2);

    let stub = serve(vec![Reply::Status(400, "bad request".into())]);
    match generator(&stub.url, 3, 2_000).generate_counted(&prompt) {
        Err(RarError::Protocol { body, .. }) => assert_eq!(body, "bad request"),
        other => panic!("expected protocol error, got {other:?}"),
    }
    assert_eq!(stub.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_responses_are_protocol_errors_with_truncated_body() {
    let long = "x".repeat(1000);
    let stub = serve(vec![Reply::Status(200, long)]);
    let a = entry("m1", "Heat");
    let prompt = build_prompt(&["x".into()], &[&a], 1).unwrap();
    match generator(&stub.url, 0, 2_000).generate_counted(&prompt) {
        Err(RarError::Protocol { body, .. }) => assert_eq!(body.len(), 256),
        other => panic!("expected protocol error, got {other:?}"),
    }

    let stub = serve(vec![Reply::Status(200, json!({ "choices": [] }).to_string())]);
    assert!(matches!(
        generator(&stub.url, 0, 2_000).generate_counted(&prompt),
        Err(RarError::Protocol { .. })
    ));
}

#[test]
fn api_key_is_read_from_the_named_variable() {
    let stub = serve(vec![Reply::Status(200, chat("1. Heat"))]);
    let var = "RAR_STUB_TEST_KEY";
    std::env::set_var(var, "sekrit");
    let mut s = settings(&stub.url, 0, 2_000);
    s.api_key_env = var.into();
    let g = HttpGenerator::new(GeneratorEndpoint {
        http: s.clone(),
        model_name: "m".into(),
        thinking_passthrough: None,
    })
    .unwrap();
    let a = entry("m1", "Heat");
    let prompt = build_prompt(&["x".into()], &[&a], 1).unwrap();
    g.generate_counted(&prompt).unwrap();
    let head = stub.headers.lock().unwrap()[0].clone();
    assert!(head.iter().any(|h| h == "authorization: Bearer sekrit" || h == "Authorization: Bearer sekrit"));

    s.api_key_env = "RAR_STUB_TEST_KEY_UNSET".into();
    let g = HttpGenerator::new(GeneratorEndpoint {
        http: s,
        model_name: "m".into(),
        thinking_passthrough: None,
    })
    .unwrap();
    assert!(matches!(g.generate_counted(&prompt), Err(RarError::InvalidArgument(_))));
}

#[test]
fn embedder_reads_first_vector() {
    let stub = serve(vec![Reply::Status(200, json!({ "data": [{ "embedding": [3.0, 4.0] }] }).to_string())]);
    let e = HttpEmbedder::new(settings(&stub.url, 0, 2_000), "embed-stub", 2).unwrap();
    assert_eq!(e.embed("hello").unwrap(), vec![3.0, 4.0]);
    assert_eq!(e.tag(), "http:embed-stub");
    let body = stub.bodies.lock().unwrap()[0].clone();
    assert_eq!(body, json!({ "model": "embed-stub", "input": "hello" }));
    assert!(stub.headers.lock().unwrap()[0][0].starts_with("POST /embeddings"));
}
