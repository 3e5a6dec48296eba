#![cfg(feature = "http")]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use matu_core::embedding::service::HttpEmbeddingService;
use matu_core::embedding::{EmbeddingCache, EmbeddingGateway};
use matu_core::Error;

#[derive(Debug, Clone)]
struct Seen {
    auth: Option<String>,
    inputs: Vec<String>,
}

/// Serves `statuses.len()` requests; a 200 embeds each input as
/// `[len, first byte]`, anything else returns an error body.
fn serve(statuses: Vec<u16>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/embeddings", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for status in statuses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let inputs: Vec<String> = req["input"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_str().unwrap().to_string())
                .collect();
            log.lock().unwrap().push(Seen {
                auth,
                inputs: inputs.clone(),
            });
            let payload = if status == 200 {
                let data: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .rev()
                    .map(
                        |(i, t)| serde_json::json!({"index": i, "embedding": [t.len() as f32, t.as_bytes()[0] as f32]}),
                    )
                    .collect();
                serde_json::json!({ "data": data }).to_string()
            } else {
                "{\"error\":\"overloaded\"}".to_string()
            };
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
            out.flush().unwrap();
        }
    });
    (url, seen, handle)
}

fn gateway(url: &str, token: Option<&str>, batch: usize) -> EmbeddingGateway {
    let svc = HttpEmbeddingService::new(url, token.map(str::to_string));
    let mut g = EmbeddingGateway::with_service(Arc::new(EmbeddingCache::new()), Box::new(svc));
    g.batch_size = batch;
    g.retry.base_delay = Duration::from_millis(1);
    g
}

#[test]
fn batches_carry_bearer_token_and_keep_order() {
    let (url, seen, handle) = serve(vec![200, 200]);
    let g = gateway(&url, Some("sekret"), 2);
    let texts: Vec<String> = ["alpha", "bb", "c", "alpha", "dddd"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let out = g.embed_texts(&texts, "m").unwrap();
    handle.join().unwrap();

    let firsts: Vec<f64> = out.iter().map(|v| v.values[0]).collect();
    assert_eq!(firsts, vec![5.0, 2.0, 1.0, 5.0, 4.0]);
    let seen = seen.lock().unwrap();
    let batches: Vec<usize> = seen.iter().map(|s| s.inputs.len()).collect();
    assert_eq!(batches, vec![2, 2]);
    assert!(seen.iter().all(|s| s.auth.as_deref() == Some("Bearer sekret")));
    assert_eq!(g.cache().len(), 4);
}

#[test]
fn server_error_is_retried() {
    let (url, seen, handle) = serve(vec![500, 200]);
    let g = gateway(&url, None, 8);
    let out = g.embed_texts(&["xy".to_string()], "m").unwrap();
    handle.join().unwrap();
    assert_eq!(out[0].values, vec![2.0, b'x' as f64]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert!(seen[0].auth.is_none());
}

#[test]
fn persistent_failure_reports_service_unavailable() {
    let (url, _, handle) = serve(vec![503, 503, 503]);
    let g = gateway(&url, None, 8);
    let err = g.embed_texts(&["q".to_string()], "m").unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, Error::ServiceUnavailable(_)), "{err:?}");
}

#[test]
fn offline_gateway_never_connects() {
    let g = EmbeddingGateway::offline(Arc::new(EmbeddingCache::new()));
    let cache = g.cache().clone();
    cache.insert("m", "known", vec![1.0, 0.0]);
    assert!(g.embed_texts(&["known".to_string()], "m").is_ok());
    match g.embed_texts(&["known".to_string(), "unknown".to_string()], "m") {
        Err(Error::MissingEmbedding(t)) => assert_eq!(t, "unknown"),
        other => panic!("{other:?}"),
    }
}
