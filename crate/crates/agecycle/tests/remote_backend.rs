//! Remote estimator client against a local mock HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use agecycle::eval::{remote_estimator_client, EstimatorBackend, RemoteOptions};
use ndarray::Array3;

/// Serve `responses` (status, body) in order, one per request, then stop.
/// Returns the endpoint and a counter of requests actually served.
fn mock_server(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
    let addr = listener.local_addr().unwrap();
    let served = Arc::new(AtomicUsize::new(0));
    let count = served.clone();
    std::thread::spawn(move || {
        for (status, body) in responses {
            let Ok((mut stream, _)) = listener.accept() else {
                return;
            };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            let mut content_length = 0usize;
            reader.read_line(&mut line).ok();
            loop {
                let mut header = String::new();
                if reader.read_line(&mut header).is_err() || header == "\r\n" {
                    break;
                }
                let lower = header.to_ascii_lowercase();
                if let Some(rest) = lower.strip_prefix("content-length:") {
                    content_length = rest.trim().parse().unwrap_or(0);
                }
            }
            let mut body_buf = vec![0u8; content_length];
            reader.read_exact(&mut body_buf).ok();

            let reason = if status == 200 { "OK" } else { "Error" };
            let resp = format!(
                "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).ok();
            stream.flush().ok();
            count.fetch_add(1, Ordering::SeqCst);
        }
    });
    (format!("http://{addr}"), served)
}

fn test_image() -> Array3<f32> {
    Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
        ((c + y + x) as f32 * 0.05).sin() * 0.5
    })
}

fn quick_opts() -> RemoteOptions {
    RemoteOptions {
        timeout: Duration::from_secs(2),
        attempts: 3,
        initial_backoff: Duration::from_millis(5),
    }
}

#[test]
fn echo_contract_returns_age() {
    let (endpoint, _) = mock_server(vec![(200, r#"{"age": 35.0}"#.to_string())]);
    let backend = remote_estimator_client(&endpoint, quick_opts());
    let age = backend.estimate_age(&test_image()).unwrap();
    assert_eq!(age, 35.0);
}

#[test]
fn verify_contract_returns_confidence() {
    let (endpoint, _) = mock_server(vec![(200, r#"{"confidence": 88.5}"#.to_string())]);
    let backend = remote_estimator_client(&endpoint, quick_opts());
    let score = backend.verify(&test_image(), &test_image()).unwrap();
    assert_eq!(score, 88.5);
}

#[test]
fn server_errors_exhaust_retries() {
    let (endpoint, served) = mock_server(vec![
        (500, "{}".to_string()),
        (500, "{}".to_string()),
        (500, "{}".to_string()),
    ]);
    let backend = remote_estimator_client(&endpoint, quick_opts());
    let err = backend.estimate_age(&test_image()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("3 attempts"), "unexpected error: {msg}");
    assert_eq!(served.load(Ordering::SeqCst), 3, "must retry exactly 3 times");
}

#[test]
fn transient_failure_then_success_recovers() {
    let (endpoint, served) = mock_server(vec![
        (500, "{}".to_string()),
        (200, r#"{"age": 21.0}"#.to_string()),
    ]);
    let backend = remote_estimator_client(&endpoint, quick_opts());
    let age = backend.estimate_age(&test_image()).unwrap();
    assert_eq!(age, 21.0);
    assert_eq!(served.load(Ordering::SeqCst), 2);
}

#[test]
fn malformed_json_names_the_field() {
    let (endpoint, _) = mock_server(vec![(200, r#"{"years": 35}"#.to_string())]);
    let backend = remote_estimator_client(&endpoint, quick_opts());
    let err = backend.estimate_age(&test_image()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("age"), "error should name the field: {msg}");
}

#[test]
fn unreachable_endpoint_fails_cleanly() {
    // Reserved-but-unused port; connection is refused immediately.
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let backend = remote_estimator_client(&format!("http://{addr}"), quick_opts());
    assert!(backend.estimate_age(&test_image()).is_err());
}
