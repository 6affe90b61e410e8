//! A mock CDN edge: TLS listener that records the client's SNI, routes
//! the decrypted request by Host header, and either serves any hosted
//! origin (the permissive posture under measurement) or rejects
//! SNI/Host mismatches the way a strict front end does.
//!
//! Every *HTTP request* is appended to a shared request log before its
//! response bytes are written, so a client that has seen a response (or
//! a deliberate close) can rely on the entry being visible. A TLS
//! session that completes the handshake but never sends a request —
//! certificate inspection, scanners — logs nothing.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use rustls::server::Acceptor;
use rustls::{ServerConfig, StreamOwned};
use serde::{Deserialize, Serialize};

use crate::cert::MintedIdentity;
use crate::MockCdnError;

const MAX_HEAD_BYTES: usize = 16 * 1024;
const IO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectStyle {
    /// Drop the connection without an HTTP response.
    CloseConnection,
    /// Answer 421 Misdirected Request with an empty body.
    Status421,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgePolicy {
    /// Serve whatever origin the Host header names, regardless of SNI.
    Allow,
    /// Require the Host header to equal the SNI name.
    EnforceSniHostMatch(RejectStyle),
}

#[derive(Debug, Clone)]
pub struct Route {
    pub status: u16,
    pub content_type: String,
    pub body: Vec<u8>,
    /// Emitted as a Location header; meaningful with 3xx statuses.
    pub location: Option<String>,
}

/// Content for one customer hostname, keyed by request path (query
/// strings are ignored for lookup).
#[derive(Debug, Clone)]
pub struct MockOrigin {
    pub host: String,
    routes: BTreeMap<String, Route>,
}

impl MockOrigin {
    pub fn new(host: &str) -> MockOrigin {
        MockOrigin {
            host: host.to_ascii_lowercase(),
            routes: BTreeMap::new(),
        }
    }

    pub fn route(mut self, path: &str, status: u16, content_type: &str, body: &[u8]) -> Self {
        self.routes.insert(
            path.to_string(),
            Route {
                status,
                content_type: content_type.to_string(),
                body: body.to_vec(),
                location: None,
            },
        );
        self
    }

    /// A redirecting route: `status` should be a 3xx.
    pub fn redirect(mut self, path: &str, status: u16, location: &str) -> Self {
        self.routes.insert(
            path.to_string(),
            Route {
                status,
                content_type: "text/plain".to_string(),
                body: Vec::new(),
                location: Some(location.to_string()),
            },
        );
        self
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.routes.keys()
    }

    fn lookup(&self, path: &str) -> Option<&Route> {
        let bare = path.split('?').next().unwrap_or(path);
        self.routes.get(bare)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Served { origin: String, status: u16 },
    RejectedMismatch { style: RejectStyle },
    UnknownHost,
    BadRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestLogEntry {
    pub edge: String,
    pub sni: Option<String>,
    pub host: Option<String>,
    pub path: String,
    pub decision: Decision,
}

pub type RequestLog = Arc<Mutex<Vec<RequestLogEntry>>>;

pub struct EdgeConfig {
    pub name: String,
    pub policy: EdgePolicy,
    pub identity: MintedIdentity,
    /// host → origin; shared so every edge can serve every origin.
    pub origins: Arc<BTreeMap<String, MockOrigin>>,
}

pub struct RunningEdge {
    pub name: String,
    pub addr: SocketAddr,
    pub sans: Vec<String>,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

pub fn spawn_edge(config: EdgeConfig, log: RequestLog) -> Result<RunningEdge, MockCdnError> {
    let tls = Arc::new(
        ServerConfig::builder()
            .with_no_client_auth()
            .with_single_cert(config.identity.chain.clone(), config.identity.key.clone_key())
            .map_err(MockCdnError::Tls)?,
    );
    let listener = TcpListener::bind(("127.0.0.1", 0))?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));

    let accept_thread = {
        let shutdown = shutdown.clone();
        let name = config.name.clone();
        let policy = config.policy;
        let origins = config.origins.clone();
        std::thread::spawn(move || {
            for conn in listener.incoming() {
                if shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(tcp) = conn else { continue };
                let tls = tls.clone();
                let name = name.clone();
                let origins = origins.clone();
                let log = log.clone();
                std::thread::spawn(move || {
                    handle_connection(tcp, tls, &name, policy, &origins, &log);
                });
            }
        })
    };

    Ok(RunningEdge {
        name: config.name,
        addr,
        sans: config.identity.sans.clone(),
        shutdown,
        accept_thread: Some(accept_thread),
    })
}

impl RunningEdge {
    pub fn stop(&mut self) {
        if let Some(handle) = self.accept_thread.take() {
            self.shutdown.store(true, Ordering::SeqCst);
            // Wake the accept loop so it can observe the flag.
            let _ = TcpStream::connect(self.addr);
            let _ = handle.join();
        }
    }
}

impl Drop for RunningEdge {
    fn drop(&mut self) {
        self.stop();
    }
}

fn handle_connection(
    mut tcp: TcpStream,
    tls: Arc<ServerConfig>,
    edge_name: &str,
    policy: EdgePolicy,
    origins: &BTreeMap<String, MockOrigin>,
    log: &RequestLog,
) {
    let _ = tcp.set_read_timeout(Some(IO_TIMEOUT));
    let _ = tcp.set_write_timeout(Some(IO_TIMEOUT));

    let mut acceptor = Acceptor::default();
    let accepted = loop {
        match acceptor.read_tls(&mut tcp) {
            Ok(0) => return,
            Ok(_) => {}
            Err(_) => return,
        }
        match acceptor.accept() {
            Ok(Some(accepted)) => break accepted,
            Ok(None) => {}
            Err(_) => return,
        }
    };
    let sni = accepted
        .client_hello()
        .server_name()
        .map(|s| s.to_ascii_lowercase());
    let conn = match accepted.into_connection(tls) {
        Ok(conn) => conn,
        Err(_) => return,
    };
    let mut stream = StreamOwned::new(conn, tcp);

    let head = match read_request_head(&mut stream) {
        HeadOutcome::Request(head) => head,
        // Handshake-only session: not an HTTP request, nothing to log.
        HeadOutcome::SilentClose => return,
        HeadOutcome::Garbled => {
            push_log(
                log,
                RequestLogEntry {
                    edge: edge_name.to_string(),
                    sni,
                    host: None,
                    path: String::new(),
                    decision: Decision::BadRequest,
                },
            );
            write_response(&mut stream, edge_name, 400, "Bad Request", "text/plain", b"");
            return;
        }
    };

    let host = head.host.clone();
    let mut entry = RequestLogEntry {
        edge: edge_name.to_string(),
        sni: sni.clone(),
        host: host.clone(),
        path: head.path.clone(),
        decision: Decision::BadRequest,
    };

    let Some(host) = host else {
        entry.decision = Decision::BadRequest;
        push_log(log, entry);
        write_response(&mut stream, edge_name, 400, "Bad Request", "text/plain", b"");
        return;
    };

    if let EdgePolicy::EnforceSniHostMatch(style) = policy {
        if sni.as_deref() != Some(host.as_str()) {
            entry.decision = Decision::RejectedMismatch { style };
            push_log(log, entry);
            match style {
                RejectStyle::CloseConnection => {
                    // No response bytes at all; the client sees a dead
                    // connection, the way a resetting front end looks.
                }
                RejectStyle::Status421 => {
                    write_response(
                        &mut stream,
                        edge_name,
                        421,
                        "Misdirected Request",
                        "text/plain",
                        b"",
                    );
                }
            }
            return;
        }
    }

    match origins.get(&host) {
        Some(origin) => match origin.lookup(&head.path) {
            Some(route) => {
                entry.decision = Decision::Served {
                    origin: origin.host.clone(),
                    status: route.status,
                };
                push_log(log, entry);
                let reason = match route.status {
                    200 => "OK",
                    204 => "No Content",
                    301 => "Moved Permanently",
                    302 => "Found",
                    404 => "Not Found",
                    _ => "Response",
                };
                write_response_with_location(
                    &mut stream,
                    edge_name,
                    route.status,
                    reason,
                    &route.content_type,
                    &route.body,
                    route.location.as_deref(),
                );
            }
            None => {
                entry.decision = Decision::Served {
                    origin: origin.host.clone(),
                    status: 404,
                };
                push_log(log, entry);
                write_response(&mut stream, edge_name, 404, "Not Found", "text/plain", b"no such path");
            }
        },
        None => {
            entry.decision = Decision::UnknownHost;
            push_log(log, entry);
            write_response(&mut stream, edge_name, 404, "Not Found", "text/plain", b"unknown host");
        }
    }
}

fn push_log(log: &RequestLog, entry: RequestLogEntry) {
    log.lock().expect("request log poisoned").push(entry);
}

struct RequestHead {
    path: String,
    host: Option<String>,
}

enum HeadOutcome {
    Request(RequestHead),
    SilentClose,
    Garbled,
}

fn read_request_head<S: Read>(stream: &mut S) -> HeadOutcome {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 2048];
    loop {
        if let Some(end) = find_head_end(&buf) {
            return parse_head(&buf[..end]);
        }
        if buf.len() > MAX_HEAD_BYTES {
            return HeadOutcome::Garbled;
        }
        match stream.read(&mut chunk) {
            Ok(0) => {
                return if buf.is_empty() {
                    HeadOutcome::SilentClose
                } else {
                    HeadOutcome::Garbled
                };
            }
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                return if buf.is_empty() {
                    HeadOutcome::SilentClose
                } else {
                    HeadOutcome::Garbled
                };
            }
            Err(_) => return HeadOutcome::Garbled,
        }
    }
}

fn find_head_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

fn parse_head(head: &[u8]) -> HeadOutcome {
    let Ok(text) = std::str::from_utf8(head) else {
        return HeadOutcome::Garbled;
    };
    let mut lines = text.split("\r\n");
    let request_line = lines.next().unwrap_or("");
    let mut parts = request_line.split(' ');
    let method = parts.next().unwrap_or("");
    let path = parts.next().unwrap_or("");
    let version = parts.next().unwrap_or("");
    if method != "GET" || !path.starts_with('/') || !version.starts_with("HTTP/1.") {
        return HeadOutcome::Garbled;
    }
    let mut host = None;
    for line in lines {
        if let Some((name, value)) = line.split_once(':') {
            if name.trim().eq_ignore_ascii_case("host") {
                host = Some(strip_port(value.trim()).to_ascii_lowercase());
                break;
            }
        }
    }
    HeadOutcome::Request(RequestHead {
        path: path.to_string(),
        host,
    })
}

/// `example.test:8443` → `example.test`. DNS names only; bracketed IPv6
/// literals are not expected from the probe client.
fn strip_port(host: &str) -> &str {
    match host.rsplit_once(':') {
        Some((name, port)) if !port.is_empty() && port.bytes().all(|b| b.is_ascii_digit()) => name,
        _ => host,
    }
}

fn write_response<S: Write>(
    stream: &mut S,
    edge_name: &str,
    status: u16,
    reason: &str,
    content_type: &str,
    body: &[u8],
) {
    write_response_with_location(stream, edge_name, status, reason, content_type, body, None);
}

fn write_response_with_location<S: Write>(
    stream: &mut S,
    edge_name: &str,
    status: u16,
    reason: &str,
    content_type: &str,
    body: &[u8],
    location: Option<&str>,
) {
    let location_line = location
        .map(|l| format!("Location: {l}\r\n"))
        .unwrap_or_default();
    let head = format!(
        "HTTP/1.1 {status} {reason}\r\nServer: {edge_name}\r\n{location_line}Content-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    let _ = stream
        .write_all(head.as_bytes())
        .and_then(|_| stream.write_all(body))
        .and_then(|_| stream.flush());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_port_variants() {
        assert_eq!(strip_port("a.test"), "a.test");
        assert_eq!(strip_port("a.test:8443"), "a.test");
        assert_eq!(strip_port("a.test:"), "a.test:");
        assert_eq!(strip_port("a.test:8a"), "a.test:8a");
    }

    #[test]
    fn parse_head_extracts_path_and_host() {
        let head = b"GET /x/y?z=1 HTTP/1.1\r\nUser-Agent: t\r\nHost: Site-A.Test:443\r\nAccept: */*";
        match parse_head(head) {
            HeadOutcome::Request(r) => {
                assert_eq!(r.path, "/x/y?z=1");
                assert_eq!(r.host.as_deref(), Some("site-a.test"));
            }
            _ => panic!("expected a parsed request"),
        }
    }

    #[test]
    fn parse_head_rejects_non_get() {
        assert!(matches!(
            parse_head(b"POST / HTTP/1.1\r\nHost: a.test"),
            HeadOutcome::Garbled
        ));
        assert!(matches!(parse_head(b"gibberish"), HeadOutcome::Garbled));
    }

    #[test]
    fn origin_lookup_ignores_query() {
        let origin = MockOrigin::new("a.test").route("/x", 200, "text/plain", b"ok");
        assert!(origin.lookup("/x?q=1").is_some());
        assert!(origin.lookup("/y").is_none());
    }
}
