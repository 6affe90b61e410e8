//! Minimal synchronous HTTPS client.
//!
//! The probe protocol needs one unusual degree of freedom that rules out
//! the obvious client crates: the TLS SNI value, the Host header, and the
//! name used for address resolution must all be settable independently.
//! Everything else is deliberately plain HTTP/1.1: one request per
//! connection, `Connection: close`, no redirect following at this layer.
//!
//! Certificate verification always runs against the SNI name, so a
//! fronted request still authenticates the front.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rustls::pki_types::ServerName;
use rustls::{ClientConfig, ClientConnection, RootCertStore, StreamOwned};
use thiserror::Error;

use crate::resolver::{ResolveError, Resolver};

pub const DEFAULT_USER_AGENT: &str = "frontcheck/0.1 (cdn measurement; one request per connection)";

#[derive(Debug, Error)]
pub enum HttpError {
    #[error(transparent)]
    Resolve(#[from] ResolveError),
    #[error("cannot connect to {host}: {reason}")]
    Connect { host: String, reason: String },
    #[error("TLS failure for SNI `{sni}`: {reason}")]
    Tls { sni: String, reason: String },
    #[error("I/O during exchange with {host}: {source}")]
    Io {
        host: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed HTTP response: {0}")]
    Malformed(String),
    #[error("response body exceeds the {limit}-byte cap")]
    BodyTooLarge { limit: usize },
    #[error("more than {limit} redirects")]
    TooManyRedirects { limit: usize },
    #[error("cannot load trust roots from {path}: {reason}")]
    TrustRoots { path: String, reason: String },
}

/// Which certificate authorities to accept. The bundled web-PKI roots
/// cover real sites; extra PEM files admit private CAs (the mock fleet's).
#[derive(Debug, Clone, Default)]
pub struct TlsTrust {
    pub web_pki: bool,
    pub extra_pem_files: Vec<PathBuf>,
}

impl TlsTrust {
    pub fn web_pki_only() -> Self {
        TlsTrust {
            web_pki: true,
            extra_pem_files: Vec::new(),
        }
    }

    pub fn pem_file(path: PathBuf) -> Self {
        TlsTrust {
            web_pki: false,
            extra_pem_files: vec![path],
        }
    }

    pub fn build_client_config(&self) -> Result<Arc<ClientConfig>, HttpError> {
        let mut roots = RootCertStore::empty();
        if self.web_pki {
            roots.extend(webpki_roots::TLS_SERVER_ROOTS.iter().cloned());
        }
        for path in &self.extra_pem_files {
            let err = |reason: String| HttpError::TrustRoots {
                path: path.display().to_string(),
                reason,
            };
            let pem = std::fs::read(path).map_err(|e| err(e.to_string()))?;
            let mut added = 0;
            for cert in rustls_pemfile::certs(&mut pem.as_slice()) {
                let cert = cert.map_err(|e| err(e.to_string()))?;
                roots.add(cert).map_err(|e| err(e.to_string()))?;
                added += 1;
            }
            if added == 0 {
                return Err(err("no certificates found in file".to_string()));
            }
        }
        if roots.is_empty() {
            return Err(HttpError::TrustRoots {
                path: "<none>".to_string(),
                reason: "empty trust configuration".to_string(),
            });
        }
        Ok(Arc::new(
            ClientConfig::builder()
                .with_root_certificates(roots)
                .with_no_client_auth(),
        ))
    }
}

/// One HTTPS exchange, fully specified. `resolve_host` picks the address,
/// `sni_host` goes into the TLS handshake (and is the name the server
/// certificate is verified against), `host_header` goes on the wire. For
/// an ordinary request all three are the same name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchSpec {
    pub resolve_host: String,
    pub port: u16,
    pub sni_host: String,
    pub host_header: String,
    pub path: String,
}

impl FetchSpec {
    /// The everyday case: resolve, SNI, and Host all use `host`.
    pub fn simple(host: &str, path: &str) -> FetchSpec {
        FetchSpec {
            resolve_host: host.to_string(),
            port: 443,
            sni_host: host.to_string(),
            host_header: host.to_string(),
            path: path.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub reason: String,
    /// Header names lowercased, order preserved, duplicates kept.
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        let want = name.to_ascii_lowercase();
        self.headers
            .iter()
            .find(|(n, _)| *n == want)
            .map(|(_, v)| v.as_str())
    }

    /// Media type without parameters, lowercased.
    pub fn content_type(&self) -> Option<String> {
        self.header("content-type")
            .map(|v| v.split(';').next().unwrap_or("").trim().to_ascii_lowercase())
    }

    pub fn server(&self) -> Option<&str> {
        self.header("server")
    }
}

/// Serializes the request line and headers. The Host header carries the
/// name verbatim — never a port — because it is a measurement input, not
/// a routing convenience.
pub fn write_request<W: Write>(mut w: W, spec: &FetchSpec, user_agent: &str) -> std::io::Result<()> {
    debug_assert!(spec.path.starts_with('/'));
    write!(
        w,
        "GET {} HTTP/1.1\r\nHost: {}\r\nUser-Agent: {}\r\nAccept: */*\r\nConnection: close\r\n\r\n",
        spec.path, spec.host_header, user_agent
    )
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String, HttpError> {
    let mut buf = Vec::new();
    r.read_until(b'\n', &mut buf)
        .map_err(|e| HttpError::Malformed(format!("while reading header line: {e}")))?;
    if buf.is_empty() {
        return Err(HttpError::Malformed("unexpected end of stream".into()));
    }
    while matches!(buf.last(), Some(b'\n') | Some(b'\r')) {
        buf.pop();
    }
    String::from_utf8(buf).map_err(|_| HttpError::Malformed("non-UTF-8 header line".into()))
}

fn read_chunked<R: BufRead>(r: &mut R, max_body: usize) -> Result<Vec<u8>, HttpError> {
    let mut body = Vec::new();
    loop {
        let size_line = read_line(r)?;
        let size_str = size_line.split(';').next().unwrap_or("").trim();
        let size = usize::from_str_radix(size_str, 16)
            .map_err(|_| HttpError::Malformed(format!("bad chunk size `{size_line}`")))?;
        if size == 0 {
            // Trailers, then the terminating blank line.
            loop {
                if read_line(r)?.is_empty() {
                    break;
                }
            }
            return Ok(body);
        }
        if body.len() + size > max_body {
            return Err(HttpError::BodyTooLarge { limit: max_body });
        }
        let start = body.len();
        body.resize(start + size, 0);
        r.read_exact(&mut body[start..])
            .map_err(|e| HttpError::Malformed(format!("truncated chunk: {e}")))?;
        let mut crlf = [0u8; 2];
        r.read_exact(&mut crlf)
            .map_err(|e| HttpError::Malformed(format!("missing chunk delimiter: {e}")))?;
        if &crlf != b"\r\n" {
            return Err(HttpError::Malformed("chunk not CRLF-terminated".into()));
        }
    }
}

/// Parses a full HTTP/1.x response from a byte stream. Framing follows
/// Transfer-Encoding: chunked, then Content-Length, then read-to-close.
pub fn read_response<R: Read>(reader: R, max_body: usize) -> Result<HttpResponse, HttpError> {
    let mut r = BufReader::new(reader);
    let status_line = read_line(&mut r)?;
    let mut parts = status_line.splitn(3, ' ');
    let version = parts.next().unwrap_or("");
    if !version.starts_with("HTTP/1.") {
        return Err(HttpError::Malformed(format!(
            "unsupported status line `{status_line}`"
        )));
    }
    let status: u16 = parts
        .next()
        .unwrap_or("")
        .parse()
        .map_err(|_| HttpError::Malformed(format!("bad status in `{status_line}`")))?;
    let reason = parts.next().unwrap_or("").to_string();

    let mut headers = Vec::new();
    loop {
        let line = read_line(&mut r)?;
        if line.is_empty() {
            break;
        }
        let Some((name, value)) = line.split_once(':') else {
            return Err(HttpError::Malformed(format!("bad header line `{line}`")));
        };
        headers.push((name.trim().to_ascii_lowercase(), value.trim().to_string()));
    }

    let chunked = headers
        .iter()
        .any(|(n, v)| n == "transfer-encoding" && v.to_ascii_lowercase().contains("chunked"));
    let content_length = headers
        .iter()
        .find(|(n, _)| n == "content-length")
        .map(|(_, v)| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| HttpError::Malformed(format!("bad content-length `{v}`")))
        })
        .transpose()?;

    let body = if chunked {
        read_chunked(&mut r, max_body)?
    } else if let Some(len) = content_length {
        if len > max_body {
            return Err(HttpError::BodyTooLarge { limit: max_body });
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)
            .map_err(|e| HttpError::Malformed(format!("truncated body: {e}")))?;
        body
    } else {
        // Read until the peer closes. A close without close_notify still
        // ends the body; anything past the cap is an error, not a trim.
        let mut body = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match r.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => {
                    if body.len() + n > max_body {
                        return Err(HttpError::BodyTooLarge { limit: max_body });
                    }
                    body.extend_from_slice(&buf[..n]);
                }
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => {
                    return Err(HttpError::Malformed(format!("while reading body: {e}")))
                }
            }
        }
        body
    };

    Ok(HttpResponse {
        status,
        reason,
        headers,
        body,
    })
}

/// Spaces out request starts per connection target. With the client being
/// strictly one-request-per-call and callers running sequentially, at most
/// one request is ever in flight per host; this adds the minimum-interval
/// guarantee between consecutive starts.
pub struct Pacer {
    min_interval: Duration,
    last_start: Mutex<HashMap<String, Instant>>,
}

impl Pacer {
    pub fn new(min_interval: Duration) -> Self {
        Pacer {
            min_interval,
            last_start: Mutex::new(HashMap::new()),
        }
    }

    /// Blocks until `min_interval` has passed since the previous `pace`
    /// for the same key, then records the new start.
    pub fn pace(&self, key: &str) {
        if self.min_interval.is_zero() {
            return;
        }
        let wait = {
            let table = self.last_start.lock().expect("pacer poisoned");
            table.get(key).and_then(|last| {
                self.min_interval.checked_sub(last.elapsed())
            })
        };
        if let Some(wait) = wait {
            std::thread::sleep(wait);
        }
        let mut table = self.last_start.lock().expect("pacer poisoned");
        table.insert(key.to_string(), Instant::now());
    }
}

#[derive(Debug, Clone)]
pub struct HttpClientOptions {
    pub connect_timeout: Duration,
    pub io_timeout: Duration,
    pub max_body: usize,
    /// Minimum spacing between request starts against the same host:port.
    pub min_request_interval: Duration,
    pub user_agent: String,
}

impl Default for HttpClientOptions {
    fn default() -> Self {
        HttpClientOptions {
            connect_timeout: Duration::from_secs(15),
            io_timeout: Duration::from_secs(15),
            max_body: 16 * 1024 * 1024,
            min_request_interval: Duration::from_millis(500),
            user_agent: DEFAULT_USER_AGENT.to_string(),
        }
    }
}

pub struct HttpClient {
    tls: Arc<ClientConfig>,
    resolver: Arc<dyn Resolver>,
    pacer: Pacer,
    opts: HttpClientOptions,
}

impl HttpClient {
    pub fn new(
        trust: &TlsTrust,
        resolver: Arc<dyn Resolver>,
        opts: HttpClientOptions,
    ) -> Result<Self, HttpError> {
        Ok(HttpClient {
            tls: trust.build_client_config()?,
            resolver,
            pacer: Pacer::new(opts.min_request_interval),
            opts,
        })
    }

    pub fn options(&self) -> &HttpClientOptions {
        &self.opts
    }

    fn connect(&self, host: &str, port: u16) -> Result<TcpStream, HttpError> {
        let addrs = self.resolver.resolve(host, port)?;
        let mut last: Option<String> = None;
        for addr in &addrs {
            match TcpStream::connect_timeout(addr, self.opts.connect_timeout) {
                Ok(stream) => {
                    stream
                        .set_read_timeout(Some(self.opts.io_timeout))
                        .and_then(|_| stream.set_write_timeout(Some(self.opts.io_timeout)))
                        .map_err(|e| HttpError::Io {
                            host: host.to_string(),
                            source: e,
                        })?;
                    return Ok(stream);
                }
                Err(e) => last = Some(format!("{addr}: {e}")),
            }
        }
        Err(HttpError::Connect {
            host: host.to_string(),
            reason: last.unwrap_or_else(|| "no addresses".to_string()),
        })
    }

    fn classify_io(&self, sni: &str, host: &str, e: std::io::Error) -> HttpError {
        let is_tls = e
            .get_ref()
            .map(|inner| inner.is::<rustls::Error>())
            .unwrap_or(false);
        if is_tls {
            HttpError::Tls {
                sni: sni.to_string(),
                reason: e.to_string(),
            }
        } else {
            HttpError::Io {
                host: host.to_string(),
                source: e,
            }
        }
    }

    /// One paced TLS exchange. Never follows redirects; a 3xx comes back
    /// as-is.
    pub fn fetch(&self, spec: &FetchSpec) -> Result<HttpResponse, HttpError> {
        self.pacer
            .pace(&format!("{}:{}", spec.resolve_host, spec.port));

        let tcp = self.connect(&spec.resolve_host, spec.port)?;
        let server_name = ServerName::try_from(spec.sni_host.clone()).map_err(|e| {
            HttpError::Tls {
                sni: spec.sni_host.clone(),
                reason: format!("not a valid server name: {e}"),
            }
        })?;
        let conn = ClientConnection::new(self.tls.clone(), server_name).map_err(|e| {
            HttpError::Tls {
                sni: spec.sni_host.clone(),
                reason: e.to_string(),
            }
        })?;
        let mut stream = StreamOwned::new(conn, tcp);

        write_request(&mut stream, spec, &self.opts.user_agent)
            .and_then(|_| stream.flush())
            .map_err(|e| self.classify_io(&spec.sni_host, &spec.resolve_host, e))?;

        match read_response(&mut stream, self.opts.max_body) {
            Ok(resp) => Ok(resp),
            // Handshake and certificate failures surface on first read.
            Err(HttpError::Malformed(reason)) if reason.contains("invalid peer certificate") => {
                Err(HttpError::Tls {
                    sni: spec.sni_host.clone(),
                    reason,
                })
            }
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn request_bytes_are_exact() {
        let spec = FetchSpec {
            resolve_host: "front.test".into(),
            port: 443,
            sni_host: "front.test".into(),
            host_header: "target.test".into(),
            path: "/a/b?c=1".into(),
        };
        let mut buf = Vec::new();
        write_request(&mut buf, &spec, "agent/1").unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "GET /a/b?c=1 HTTP/1.1\r\nHost: target.test\r\nUser-Agent: agent/1\r\nAccept: */*\r\nConnection: close\r\n\r\n"
        );
    }

    #[test]
    fn parses_content_length_response() {
        let raw = b"HTTP/1.1 200 OK\r\nServer: edge-1\r\nContent-Type: text/html; charset=utf-8\r\nContent-Length: 5\r\n\r\nhello";
        let resp = read_response(Cursor::new(&raw[..]), 1024).unwrap();
        assert_eq!(resp.status, 200);
        assert_eq!(resp.reason, "OK");
        assert_eq!(resp.body, b"hello");
        assert_eq!(resp.server(), Some("edge-1"));
        assert_eq!(resp.content_type().as_deref(), Some("text/html"));
    }

    #[test]
    fn parses_chunked_response_with_extension_and_trailer() {
        let raw = b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n4;ext=1\r\nWiki\r\n5\r\npedia\r\n0\r\nX-Trailer: t\r\n\r\n";
        let resp = read_response(Cursor::new(&raw[..]), 1024).unwrap();
        assert_eq!(resp.body, b"Wikipedia");
    }

    #[test]
    fn parses_close_delimited_response() {
        let raw = b"HTTP/1.0 200 OK\r\n\r\nstream until close";
        let resp = read_response(Cursor::new(&raw[..]), 1024).unwrap();
        assert_eq!(resp.body, b"stream until close");
    }

    #[test]
    fn empty_body_status_parses() {
        let raw = b"HTTP/1.1 421 Misdirected Request\r\nContent-Length: 0\r\n\r\n";
        let resp = read_response(Cursor::new(&raw[..]), 1024).unwrap();
        assert_eq!(resp.status, 421);
        assert_eq!(resp.reason, "Misdirected Request");
        assert!(resp.body.is_empty());
    }

    #[test]
    fn header_lookup_is_case_insensitive() {
        let raw = b"HTTP/1.1 200 OK\r\nX-Mixed-Case: v\r\nContent-Length: 0\r\n\r\n";
        let resp = read_response(Cursor::new(&raw[..]), 1024).unwrap();
        assert_eq!(resp.header("x-MIXED-case"), Some("v"));
    }

    #[test]
    fn oversized_declared_body_is_rejected() {
        let raw = b"HTTP/1.1 200 OK\r\nContent-Length: 2048\r\n\r\n";
        let err = read_response(Cursor::new(&raw[..]), 1024).unwrap_err();
        assert!(matches!(err, HttpError::BodyTooLarge { limit: 1024 }));
    }

    #[test]
    fn oversized_streamed_body_is_rejected() {
        let mut raw = b"HTTP/1.0 200 OK\r\n\r\n".to_vec();
        raw.extend(std::iter::repeat(b'x').take(2048));
        let err = read_response(Cursor::new(raw), 1024).unwrap_err();
        assert!(matches!(err, HttpError::BodyTooLarge { limit: 1024 }));
    }

    #[test]
    fn oversized_chunked_body_is_rejected() {
        let raw = b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n800\r\n";
        let mut full = raw.to_vec();
        full.extend(std::iter::repeat(b'x').take(0x800));
        full.extend_from_slice(b"\r\n800\r\n");
        full.extend(std::iter::repeat(b'x').take(0x800));
        full.extend_from_slice(b"\r\n0\r\n\r\n");
        let err = read_response(Cursor::new(full), 1024).unwrap_err();
        assert!(matches!(err, HttpError::BodyTooLarge { limit: 1024 }));
    }

    #[test]
    fn garbage_status_line_is_malformed() {
        let raw = b"SSH-2.0-OpenSSH\r\n\r\n";
        assert!(matches!(
            read_response(Cursor::new(&raw[..]), 1024),
            Err(HttpError::Malformed(_))
        ));
    }

    #[test]
    fn truncated_content_length_body_is_malformed() {
        let raw = b"HTTP/1.1 200 OK\r\nContent-Length: 10\r\n\r\nshort";
        assert!(matches!(
            read_response(Cursor::new(&raw[..]), 1024),
            Err(HttpError::Malformed(_))
        ));
    }

    #[test]
    fn pacer_enforces_spacing_per_key() {
        let pacer = Pacer::new(Duration::from_millis(60));
        let start = Instant::now();
        pacer.pace("a:443");
        pacer.pace("b:443");
        assert!(start.elapsed() < Duration::from_millis(50), "distinct keys must not wait");
        pacer.pace("a:443");
        assert!(start.elapsed() >= Duration::from_millis(60), "same key must wait");
    }

    #[test]
    fn zero_interval_pacer_never_waits() {
        let pacer = Pacer::new(Duration::ZERO);
        let start = Instant::now();
        for _ in 0..100 {
            pacer.pace("a:443");
        }
        assert!(start.elapsed() < Duration::from_millis(50));
    }

    #[test]
    fn empty_trust_configuration_is_rejected() {
        let trust = TlsTrust::default();
        assert!(matches!(
            trust.build_client_config(),
            Err(HttpError::TrustRoots { .. })
        ));
    }

    #[test]
    fn web_pki_trust_builds() {
        TlsTrust::web_pki_only().build_client_config().unwrap();
    }
}
