//! HTTP client behavior against a local mock server: happy path, retry
//! after 5xx, and protocol errors on malformed bodies.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use tiny_http::{Response, Server};
use umami_clients::{ClientError, GenerationClient, GenerationRequest, HttpGenerationClient};

fn spawn_server<F>(handler: F) -> String
where
    F: Fn(usize) -> Response<std::io::Cursor<Vec<u8>>> + Send + 'static,
{
    let server = Server::http("127.0.0.1:0").expect("bind mock server");
    let addr = format!("http://{}", server.server_addr());
    let hits = Arc::new(AtomicUsize::new(0));
    std::thread::spawn(move || {
        for request in server.incoming_requests() {
            let n = hits.fetch_add(1, Ordering::SeqCst);
            let _ = request.respond(handler(n));
        }
    });
    addr
}

fn req() -> GenerationRequest {
    GenerationRequest {
        prompt: "ping".into(),
        max_tokens: 8,
    }
}

#[test]
fn http_client_parses_wire_response() {
    let addr = spawn_server(|_| Response::from_string(r#"{"text":"pong"}"#));
    let client = HttpGenerationClient::new(addr);
    assert_eq!(client.generate(&req()).unwrap().text, "pong");
}

#[test]
fn http_client_retries_after_503() {
    let addr = spawn_server(|n| {
        if n == 0 {
            Response::from_string("overloaded").with_status_code(503)
        } else {
            Response::from_string(r#"{"text":"recovered"}"#)
        }
    });
    let client = HttpGenerationClient::new(addr).with_retries(2, 1);
    assert_eq!(client.generate(&req()).unwrap().text, "recovered");
}

#[test]
fn http_client_reports_protocol_error_on_bad_body() {
    let addr = spawn_server(|_| Response::from_string("not json"));
    let client = HttpGenerationClient::new(addr);
    assert!(matches!(
        client.generate(&req()),
        Err(ClientError::Protocol(_))
    ));
}

#[test]
fn http_client_gives_up_after_retry_budget() {
    let addr = spawn_server(|_| Response::from_string("down").with_status_code(500));
    let client = HttpGenerationClient::new(addr).with_retries(1, 1);
    assert!(client.generate(&req()).is_err());
}
