use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use aeval_core::metric::{evaluate_sequence, EvalOptions};
use aeval_core::predict::{fit_ngram, PredictError, Predictor, RemoteConfig, RemotePredictor};
use aeval_core::token::{train_tokenizer, TokenId};
use serde_json::{json, Value};

type Handler = dyn Fn(usize, Value) -> (u16, String) + Send + Sync;

struct MockServer {
    url: String,
    hits: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Option<Value> {
    let mut reader = BufReader::new(stream);
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).ok()?;
    serde_json::from_slice(&body).ok()
}

fn serve(handler: Box<Handler>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let Some(request) = read_request(&mut stream) else {
                continue;
            };
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let (status, body) = handler(n, request);
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    MockServer { url, hits }
}

fn config(url: &str) -> RemoteConfig {
    RemoteConfig {
        timeout: Duration::from_secs(5),
        ..RemoteConfig::new(url)
    }
}

fn good_reply() -> String {
    json!({"target_rank": 2, "target_prob": 0.25, "topk": [
        {"id": 3, "text": "x", "prob": 0.5},
        {"id": 7, "text": "y", "prob": 0.25}
    ]})
    .to_string()
}

#[test]
fn request_shape_and_reply() {
    let server = serve(Box::new(|_, req| {
        assert_eq!(req["context"], json!([1, 2]));
        assert_eq!(req["target"], 7);
        assert_eq!(req["k"], 2);
        (200, good_reply())
    }));
    let p = RemotePredictor::new(config(&server.url), 10);
    let r = p
        .rank_and_topk(&[TokenId(1), TokenId(2)], TokenId(7), 2)
        .unwrap();
    assert_eq!(r.target_rank, 2);
    assert_eq!(r.topk[1].id, TokenId(7));
}

#[test]
fn retries_server_errors() {
    let server = serve(Box::new(|n, _| {
        if n == 0 {
            (503, "{}".into())
        } else {
            (200, good_reply())
        }
    }));
    let p = RemotePredictor::new(config(&server.url), 10);
    assert!(p.rank_and_topk(&[TokenId(1)], TokenId(7), 2).is_ok());
    assert_eq!(server.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let server = serve(Box::new(|_, _| (404, "{}".into())));
    let p = RemotePredictor::new(config(&server.url), 10);
    assert!(matches!(
        p.rank_and_topk(&[TokenId(1)], TokenId(7), 2),
        Err(PredictError::Status(404))
    ));
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn persistent_failure_gives_last_status() {
    let server = serve(Box::new(|_, _| (500, "{}".into())));
    let p = RemotePredictor::new(config(&server.url), 10);
    assert!(matches!(
        p.rank_and_topk(&[TokenId(1)], TokenId(7), 2),
        Err(PredictError::Status(500))
    ));
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn schema_violations_are_errors() {
    let server = serve(Box::new(|_, _| (200, r#"{"target_rank":1}"#.into())));
    let p = RemotePredictor::new(config(&server.url), 10);
    assert!(matches!(
        p.rank_and_topk(&[TokenId(1)], TokenId(7), 2),
        Err(PredictError::Schema(_))
    ));
}

#[test]
fn unreachable_endpoint_is_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let cfg = RemoteConfig {
        retries: 0,
        ..config(&format!("http://127.0.0.1:{port}"))
    };
    let p = RemotePredictor::new(cfg, 10);
    assert!(matches!(
        p.rank_and_topk(&[TokenId(1)], TokenId(7), 2),
        Err(PredictError::Transport(_))
    ));
}

#[test]
fn remote_trace_matches_local_model() {
    let text = "1. A valve body comprising a seat. 2. The valve body of claim 1, wherein the seat is steel.";
    let vocab = train_tokenizer([text], 300).unwrap();
    let tokens = vocab.encode(text).unwrap();
    let model = Arc::new(fit_ngram(std::slice::from_ref(&tokens), 3, 0.4, vocab.len()).unwrap());
    let texts: Vec<String> = (0..vocab.len() as u32)
        .map(|i| vocab.decode(TokenId(i)).unwrap().into_owned())
        .collect();

    let served = model.clone();
    let server = serve(Box::new(move |_, req| {
        let context: Vec<TokenId> = serde_json::from_value(req["context"].clone()).unwrap();
        let target = TokenId(req["target"].as_u64().unwrap() as u32);
        let k = req["k"].as_u64().unwrap() as usize;
        let r = served.rank_and_topk(&context, target, k).unwrap();
        let topk: Vec<Value> = r
            .topk
            .iter()
            .map(|c| json!({"id": c.id, "text": texts[c.id.index()], "prob": c.prob}))
            .collect();
        (
            200,
            json!({"target_rank": r.target_rank, "target_prob": r.target_prob, "topk": topk})
                .to_string(),
        )
    }));

    let remote = RemotePredictor::new(config(&server.url), vocab.len());
    let opts = EvalOptions {
        capture_topk: Some(3),
        ..Default::default()
    };
    let local = evaluate_sequence(model.as_ref(), &tokens, &vocab, "c", &opts).unwrap();
    let via_http = evaluate_sequence(&remote, &tokens, &vocab, "c", &opts).unwrap();
    assert_eq!(local.outcomes, via_http.outcomes);
    assert_eq!(local.total_with(), via_http.total_with());
}
