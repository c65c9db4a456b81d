use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use storysense::gateway::{
    ApiKind, BackendRegistry, GatewayError, GatewayOptions, GenerationParams, ModelEndpoint, RetryPolicy,
};

/// Serves `statuses` in order, then 200 with `body` for every later request.
fn serve(statuses: Vec<u16>, body: &'static str) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut buf = vec![0u8; len];
            let _ = reader.read_exact(&mut buf);
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let (status, payload) = match statuses.get(n) {
                Some(&s) => (s, "{\"error\":\"busy\"}"),
                None => (200, body),
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    (format!("http://{addr}"), hits)
}

fn endpoint(url: String, retries: u32) -> storysense::gateway::Endpoint {
    let spec = ModelEndpoint {
        endpoint_id: "local".into(),
        base_url: url,
        api_kind: ApiKind::Chat,
        model_name: "tiny".into(),
        auth_ref: None,
        rate_limit: 6000.0,
        timeout: 5.0,
        max_in_flight: 1,
        default_temperature: None,
        backend: None,
    };
    let opts = GatewayOptions {
        retry: RetryPolicy {
            max_retries: retries,
            base_delay: Duration::from_millis(5),
            max_delay: Duration::from_millis(20),
        },
        ..Default::default()
    };
    BackendRegistry::default().connect(spec, &opts).unwrap()
}

const OK: &str = r#"{"choices":[{"index":0,"message":{"content":"D"}}]}"#;

#[test]
fn retries_429_then_succeeds() {
    let (url, hits) = serve(vec![429, 429], OK);
    let ep = endpoint(url, 3);
    let out = ep.chat_generate("q", &GenerationParams::greedy(8)).unwrap();
    assert_eq!(out, vec!["D".to_string()]);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert_eq!(ep.backend_calls(), 1);
}

#[test]
fn gives_up_after_budget() {
    let (url, hits) = serve(vec![503; 10], OK);
    let ep = endpoint(url, 2);
    let err = ep.chat_generate("q", &GenerationParams::greedy(8)).unwrap_err();
    assert!(
        matches!(
            err,
            GatewayError::RetriesExhausted {
                attempts: 3,
                last_status: Some(503)
            }
        ),
        "{err:?}"
    );
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, hits) = serve(vec![400], OK);
    let ep = endpoint(url, 5);
    let err = ep.chat_generate("q", &GenerationParams::greedy(8)).unwrap_err();
    assert!(matches!(err, GatewayError::Http { status: 400, .. }), "{err:?}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}
