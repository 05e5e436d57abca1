//! HTTP server exposing any [`ModelBackend`] over the wire protocol.
//!
//! Requests are deduplicated on their idempotency key: a replayed key gets
//! the cached response and never reaches the backend twice.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::http::IDEMPOTENCY_HEADER;
use super::protocol::*;
use super::{BackendError, ModelBackend};

pub struct Dispatcher {
    backend: Arc<dyn ModelBackend>,
    replies: Mutex<HashMap<String, (u16, String)>>,
    backend_calls: AtomicUsize,
}

fn error_reply(code: ErrorCode, message: impl Into<String>) -> (u16, String) {
    let body = serde_json::to_string(&ErrorBody::new(code, message)).expect("error body serializes");
    (code.http_status(), body)
}

fn major(version: &str) -> &str {
    version.split('.').next().unwrap_or("")
}

fn check_version(body: &str) -> Result<(), (u16, String)> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| error_reply(ErrorCode::BadRequest, format!("invalid JSON: {e}")))?;
    if let Some(ver) = v.get("protocol_version").and_then(|x| x.as_str()) {
        if major(ver) != major(PROTOCOL_VERSION) {
            return Err(error_reply(
                ErrorCode::UnsupportedVersion,
                format!("protocol {ver} is not supported (server speaks {PROTOCOL_VERSION})"),
            ));
        }
    }
    Ok(())
}

fn run<Req, Resp>(body: &str, f: impl FnOnce(&Req) -> Result<Resp, BackendError>) -> (u16, String)
where
    Req: DeserializeOwned,
    Resp: Serialize,
{
    if let Err(reply) = check_version(body) {
        return reply;
    }
    let req: Req = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => return error_reply(ErrorCode::BadRequest, format!("malformed request: {e}")),
    };
    match f(&req) {
        Ok(resp) => (200, serde_json::to_string(&resp).expect("response serializes")),
        Err(e) => error_reply(e.code(), e.to_string()),
    }
}

impl Dispatcher {
    pub fn new(backend: Arc<dyn ModelBackend>) -> Self {
        Dispatcher { backend, replies: Mutex::new(HashMap::new()), backend_calls: AtomicUsize::new(0) }
    }

    /// Number of requests that reached the backend.
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn handle(&self, method: &str, path: &str, body: &str, key: Option<&str>) -> (u16, String) {
        if let Some(k) = key {
            if let Some(reply) = self.replies.lock().expect("reply cache").get(k) {
                return reply.clone();
            }
        }
        let reply = self.route(method, path, body);
        if let Some(k) = key {
            // only successful side effects are pinned to the key
            if reply.0 == 200 {
                self.replies.lock().expect("reply cache").insert(k.to_string(), reply.clone());
            }
        }
        reply
    }

    fn route(&self, method: &str, path: &str, body: &str) -> (u16, String) {
        let path = path.split('?').next().unwrap_or(path);
        let b = &self.backend;
        match (method, path) {
            ("GET", "/healthz") => (200, r#"{"status":"ok"}"#.to_string()),
            ("POST", "/detect") => {
                self.backend_calls.fetch_add(1, Ordering::SeqCst);
                run(body, |r: &DetectRequest| b.detect(r))
            }
            ("POST", "/generate") => {
                self.backend_calls.fetch_add(1, Ordering::SeqCst);
                run(body, |r: &GenerateRequest| b.generate(r))
            }
            ("POST", "/review") => {
                self.backend_calls.fetch_add(1, Ordering::SeqCst);
                run(body, |r: &ReviewRequest| b.review(r))
            }
            ("POST", "/train") => {
                self.backend_calls.fetch_add(1, Ordering::SeqCst);
                run(body, |r: &TrainRequest| b.train(r))
            }
            ("GET", p) if p.starts_with("/jobs/") => {
                let id = &p["/jobs/".len()..];
                match b.poll(id) {
                    Ok(s) => (200, serde_json::to_string(&s).expect("status serializes")),
                    Err(e) => error_reply(e.code(), e.to_string()),
                }
            }
            (_, "/detect" | "/generate" | "/review" | "/train" | "/healthz") => {
                error_reply(ErrorCode::BadRequest, format!("method {method} not allowed on {path}"))
            }
            _ => error_reply(ErrorCode::NotFound, format!("no route for {method} {path}")),
        }
    }
}

/// A running server. Dropping it stops the listener.
pub struct BackendServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    dispatcher: Arc<Dispatcher>,
    workers: Vec<JoinHandle<()>>,
}

impl BackendServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts `threads` workers.
    pub fn start(backend: Arc<dyn ModelBackend>, addr: &str, threads: usize) -> std::io::Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(std::io::Error::other)?;
        let addr = server.server_addr().to_ip().ok_or_else(|| std::io::Error::other("server is not bound to an IP address"))?;
        let server = Arc::new(server);
        let dispatcher = Arc::new(Dispatcher::new(backend));
        let workers = (0..threads.max(1))
            .map(|_| {
                let server = server.clone();
                let dispatcher = dispatcher.clone();
                std::thread::spawn(move || serve_loop(&server, &dispatcher))
            })
            .collect();
        Ok(BackendServer { addr, server, dispatcher, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn dispatcher(&self) -> &Dispatcher {
        &self.dispatcher
    }

    /// Blocks until the workers exit (they run until the server is dropped).
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for BackendServer {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn serve_loop(server: &tiny_http::Server, dispatcher: &Dispatcher) {
    while let Ok(mut request) = server.recv() {
        let mut body = String::new();
        let reply = match request.as_reader().read_to_string(&mut body) {
            Ok(_) => {
                let key =
                    request.headers().iter().find(|h| h.field.equiv(IDEMPOTENCY_HEADER)).map(|h| h.value.as_str().to_string());
                dispatcher.handle(request.method().as_str(), request.url(), &body, key.as_deref())
            }
            Err(e) => error_reply(ErrorCode::BadRequest, format!("unreadable body: {e}")),
        };
        let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
        let response = tiny_http::Response::from_string(reply.1).with_status_code(reply.0).with_header(header);
        if let Err(e) = request.respond(response) {
            log::warn!("failed to send response: {e}");
        }
    }
}
