//! The fronting test itself.
//!
//! A test tuple names a target customer domain `d_t`, a front domain
//! `d_f` on the same CDN, and a URL path that is known to be live on the
//! target. Three probes decide the verdict:
//!
//! 1. baseline — resolve `d_t`, SNI `d_t`, Host `d_t`;
//! 2. fronted — resolve `d_f`, SNI `d_f`, Host `d_t`;
//! 3. control — resolve `d_f`, SNI `d_f`, Host `d_f`, same path.
//!
//! The tuple succeeds when the baseline is an HTTP 200, the fronted
//! response is a 200 with the baseline's body hash, and the control did
//! *not* return that same body (otherwise front and target are serving
//! one shared resource and the comparison proves nothing).
//!
//! Pairs whose domains are operationally related — same registrable
//! domain, or one certificate covering both — are skipped before any
//! probe: a front that legitimately shares infrastructure with the
//! target would not demonstrate fronting.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};
use thiserror::Error;

use crate::http::{FetchSpec, HttpClient, TlsTrust};
use crate::psl::{effective_sld, SuffixRules};
use crate::resolver::Resolver;
use crate::seeding::derive_seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestTuple {
    pub cdn: String,
    pub target: String,
    pub front: String,
    pub path: String,
}

/// What one probe saw. `transport_ok` means a complete HTTP response was
/// read, whatever its status; everything short of that is a transport
/// failure with the reason preserved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub transport_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub body_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub body_length: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub served_by: Option<String>,
}

impl ProbeResult {
    pub fn completed(
        status: u16,
        body: &[u8],
        served_by: Option<String>,
    ) -> ProbeResult {
        ProbeResult {
            transport_ok: true,
            failure: None,
            status: Some(status),
            body_hash: Some(hash_body(body)),
            body_length: Some(body.len()),
            served_by,
        }
    }

    pub fn failed(reason: String) -> ProbeResult {
        ProbeResult {
            transport_ok: false,
            failure: Some(reason),
            status: None,
            body_hash: None,
            body_length: None,
            served_by: None,
        }
    }

    fn is_http_200(&self) -> bool {
        self.transport_ok && self.status == Some(200)
    }

    /// "Empty" in the sense of the control condition: no usable body
    /// came back — transport failure, a non-200, or a zero-length 200.
    fn is_empty(&self) -> bool {
        !self.is_http_200() || self.body_length == Some(0)
    }
}

pub fn hash_body(body: &[u8]) -> String {
    hex::encode(Sha1::digest(body))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// The fronted request fetched the target's resource through the front.
    Success,
    /// The target itself did not serve the resource; nothing to compare.
    FailBaseline,
    /// The fronted request did not return the target's resource.
    FailFrontBlocked,
    /// The control returned the same body as the target, so the tuple
    /// cannot distinguish fronting from a shared resource.
    InvalidSharedResource,
    /// Skipped before probing: the pair is (or may be) related.
    SkippedRelated,
}

/// Pure verdict over three completed probe results. The runner avoids
/// issuing probes 2 and 3 when the baseline already failed; this
/// function gives the same answer either way.
pub fn evaluate(baseline: &ProbeResult, fronted: &ProbeResult, control: &ProbeResult) -> Verdict {
    if !baseline.is_http_200() {
        return Verdict::FailBaseline;
    }
    let fronted_matches = fronted.is_http_200() && fronted.body_hash == baseline.body_hash;
    if !fronted_matches {
        return Verdict::FailFrontBlocked;
    }
    if control.is_empty() || control.body_hash != baseline.body_hash {
        Verdict::Success
    } else {
        Verdict::InvalidSharedResource
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TupleOutcome {
    pub tuple: TestTuple,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<ProbeResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fronted: Option<ProbeResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<ProbeResult>,
}

#[derive(Debug, Error)]
#[error("request budget of {limit} exhausted")]
pub struct BudgetExhausted {
    pub limit: usize,
}

/// Hard per-CDN cap on HTTP requests. Every probe spends one unit before
/// it is attempted, so failed exchanges count too. Certificate fetches
/// are handshake-only sessions, not HTTP requests, and are not charged.
#[derive(Debug)]
pub struct RequestBudget {
    limit: usize,
    spent: usize,
}

impl RequestBudget {
    pub fn new(limit: usize) -> RequestBudget {
        RequestBudget { limit, spent: 0 }
    }

    pub fn try_spend(&mut self) -> Result<(), BudgetExhausted> {
        if self.spent >= self.limit {
            return Err(BudgetExhausted { limit: self.limit });
        }
        self.spent += 1;
        Ok(())
    }

    pub fn spent(&self) -> usize {
        self.spent
    }

    pub fn remaining(&self) -> usize {
        self.limit - self.spent
    }
}

/// One budgeted probe. The budget is charged before the exchange;
/// transport failures come back as data, never as errors.
pub fn probe(
    client: &HttpClient,
    budget: &mut RequestBudget,
    spec: &FetchSpec,
) -> Result<ProbeResult, BudgetExhausted> {
    budget.try_spend()?;
    Ok(match client.fetch(spec) {
        Ok(resp) => ProbeResult::completed(resp.status, &resp.body, resp.server().map(String::from)),
        Err(e) => ProbeResult::failed(e.to_string()),
    })
}

fn probe_spec(resolve_and_sni: &str, host: &str, path: &str) -> FetchSpec {
    FetchSpec {
        resolve_host: resolve_and_sni.to_string(),
        port: 443,
        sni_host: resolve_and_sni.to_string(),
        host_header: host.to_string(),
        path: path.to_string(),
    }
}

/// Runs the three-step protocol for one tuple. A failed baseline settles
/// the verdict without touching the front.
pub fn run_tuple(
    client: &HttpClient,
    budget: &mut RequestBudget,
    tuple: &TestTuple,
) -> Result<TupleOutcome, BudgetExhausted> {
    let baseline = probe(client, budget, &probe_spec(&tuple.target, &tuple.target, &tuple.path))?;
    if !baseline.is_http_200() {
        return Ok(TupleOutcome {
            tuple: tuple.clone(),
            verdict: Verdict::FailBaseline,
            skip_reason: None,
            baseline: Some(baseline),
            fronted: None,
            control: None,
        });
    }
    let fronted = probe(client, budget, &probe_spec(&tuple.front, &tuple.target, &tuple.path))?;
    let control = probe(client, budget, &probe_spec(&tuple.front, &tuple.front, &tuple.path))?;
    let verdict = evaluate(&baseline, &fronted, &control);
    Ok(TupleOutcome {
        tuple: tuple.clone(),
        verdict,
        skip_reason: None,
        baseline: Some(baseline),
        fronted: Some(fronted),
        control: Some(control),
    })
}

// ---------------------------------------------------------------------
// Relatedness screening

/// Certificate name matching: exact, or a leftmost `*` standing for
/// exactly one label.
pub fn san_covers(pattern: &str, host: &str) -> bool {
    let pattern = pattern.to_ascii_lowercase();
    let host = host.to_ascii_lowercase();
    if let Some(suffix) = pattern.strip_prefix("*.") {
        match host.strip_suffix(suffix) {
            Some(prefix) => {
                prefix.len() > 1
                    && prefix.ends_with('.')
                    && !prefix[..prefix.len() - 1].contains('.')
            }
            None => false,
        }
    } else {
        pattern == host
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Relatedness {
    Unrelated,
    /// Same registrable domain.
    SiblingSld,
    /// One certificate covers both names.
    SharedCertificate,
    /// Could not be established; callers skip conservatively.
    Unknown(String),
}

/// Looks up the SAN list a server presents for a host. Implementations
/// must not issue HTTP requests: the TLS handshake alone yields the
/// certificate, which keeps certificate screening outside the request
/// budget and invisible to origin access logs.
pub trait CertificateFetcher: Send + Sync {
    fn san_list(&self, host: &str) -> Result<Vec<String>, String>;
}

/// Table-driven fetcher for tests. Records how many lookups were made.
pub struct StaticCertFetcher {
    table: BTreeMap<String, Result<Vec<String>, String>>,
    calls: Mutex<usize>,
}

impl StaticCertFetcher {
    pub fn new(table: BTreeMap<String, Result<Vec<String>, String>>) -> Self {
        StaticCertFetcher {
            table,
            calls: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().expect("calls poisoned")
    }
}

impl CertificateFetcher for StaticCertFetcher {
    fn san_list(&self, host: &str) -> Result<Vec<String>, String> {
        *self.calls.lock().expect("calls poisoned") += 1;
        self.table
            .get(host)
            .cloned()
            .unwrap_or_else(|| Err(format!("no certificate table entry for {host}")))
    }
}

/// Fetches the leaf certificate over a real TLS handshake (no HTTP).
/// Verification runs against the fetched name with the client's trust
/// roots; a name the trust store cannot verify comes back as an error,
/// which screening treats as "unknown" and skips.
pub struct LiveCertFetcher {
    resolver: std::sync::Arc<dyn Resolver>,
    tls: std::sync::Arc<rustls::ClientConfig>,
    timeout: Duration,
}

impl LiveCertFetcher {
    pub fn new(
        trust: &TlsTrust,
        resolver: std::sync::Arc<dyn Resolver>,
        timeout: Duration,
    ) -> Result<Self, crate::http::HttpError> {
        Ok(LiveCertFetcher {
            resolver,
            tls: trust.build_client_config()?,
            timeout,
        })
    }
}

pub fn san_names_from_der(der: &[u8]) -> Result<Vec<String>, String> {
    let (_, cert) = x509_parser::parse_x509_certificate(der).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for ext in cert.extensions() {
        if let x509_parser::extensions::ParsedExtension::SubjectAlternativeName(san) =
            ext.parsed_extension()
        {
            for name in &san.general_names {
                if let x509_parser::extensions::GeneralName::DNSName(d) = name {
                    out.push(d.to_ascii_lowercase());
                }
            }
        }
    }
    Ok(out)
}

impl CertificateFetcher for LiveCertFetcher {
    fn san_list(&self, host: &str) -> Result<Vec<String>, String> {
        let addrs = self.resolver.resolve(host, 443).map_err(|e| e.to_string())?;
        let mut last = String::from("no addresses");
        for addr in &addrs {
            match std::net::TcpStream::connect_timeout(addr, self.timeout) {
                Ok(mut tcp) => {
                    let _ = tcp.set_read_timeout(Some(self.timeout));
                    let _ = tcp.set_write_timeout(Some(self.timeout));
                    let name = rustls::pki_types::ServerName::try_from(host.to_string())
                        .map_err(|e| e.to_string())?;
                    let mut conn = rustls::ClientConnection::new(self.tls.clone(), name)
                        .map_err(|e| e.to_string())?;
                    let result = (|| -> Result<Vec<String>, String> {
                        while conn.is_handshaking() {
                            conn.complete_io(&mut tcp).map_err(|e| e.to_string())?;
                        }
                        let chain = conn
                            .peer_certificates()
                            .ok_or_else(|| "no certificate presented".to_string())?;
                        san_names_from_der(chain[0].as_ref())
                    })();
                    conn.send_close_notify();
                    let _ = conn.complete_io(&mut tcp);
                    return result;
                }
                Err(e) => last = format!("{addr}: {e}"),
            }
        }
        Err(format!("cannot connect to {host}: {last}"))
    }
}

/// Caches SAN lookups (successes and failures) per host for the duration
/// of a run, so each endpoint sees at most one screening handshake.
pub struct CachingCertFetcher<F: CertificateFetcher> {
    inner: F,
    cache: Mutex<BTreeMap<String, Result<Vec<String>, String>>>,
}

impl<F: CertificateFetcher> CachingCertFetcher<F> {
    pub fn new(inner: F) -> Self {
        CachingCertFetcher {
            inner,
            cache: Mutex::new(BTreeMap::new()),
        }
    }
}

impl<F: CertificateFetcher> CertificateFetcher for CachingCertFetcher<F> {
    fn san_list(&self, host: &str) -> Result<Vec<String>, String> {
        if let Some(hit) = self.cache.lock().expect("cache poisoned").get(host) {
            return hit.clone();
        }
        let result = self.inner.san_list(host);
        self.cache
            .lock()
            .expect("cache poisoned")
            .insert(host.to_string(), result.clone());
        result
    }
}

/// Decides whether two names share operational control.
pub fn are_related(
    a: &str,
    b: &str,
    rules: &SuffixRules,
    fetcher: &dyn CertificateFetcher,
) -> Relatedness {
    match (effective_sld(a, rules), effective_sld(b, rules)) {
        (Ok(x), Ok(y)) => {
            if x == y {
                return Relatedness::SiblingSld;
            }
        }
        (Err(e), _) | (_, Err(e)) => {
            return Relatedness::Unknown(format!("no registrable domain: {e}"));
        }
    }
    let covers_both =
        |sans: &[String]| sans.iter().any(|s| san_covers(s, a)) && sans.iter().any(|s| san_covers(s, b));
    let ra = fetcher.san_list(a);
    if matches!(&ra, Ok(sans) if covers_both(sans)) {
        return Relatedness::SharedCertificate;
    }
    let rb = fetcher.san_list(b);
    if matches!(&rb, Ok(sans) if covers_both(sans)) {
        return Relatedness::SharedCertificate;
    }
    match (ra, rb) {
        (Ok(_), Ok(_)) => Relatedness::Unrelated,
        (Err(e), _) | (_, Err(e)) => {
            Relatedness::Unknown(format!("certificate fetch failed: {e}"))
        }
    }
}

// ---------------------------------------------------------------------
// Tuple generation

/// Sampling and budget caps for one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCaps {
    pub max_slds_per_cdn: usize,
    pub max_domains_per_cdn: usize,
    pub max_urls_per_domain: usize,
    pub max_requests_per_cdn: usize,
}

impl Default for SampleCaps {
    fn default() -> Self {
        SampleCaps {
            max_slds_per_cdn: 100,
            max_domains_per_cdn: 25,
            max_urls_per_domain: 10,
            max_requests_per_cdn: 4000,
        }
    }
}

/// Picks up to `take` indices of `len`, returned in ascending order so
/// downstream iteration stays sorted.
pub(crate) fn sample_sorted_indices(
    rng: &mut ChaCha20Rng,
    len: usize,
    take: usize,
) -> Vec<usize> {
    if len <= take {
        return (0..len).collect();
    }
    let mut picked = rand::seq::index::sample(rng, len, take).into_vec();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TupleGenError {
    #[error("fronting needs at least 2 domains to pair, got {have}")]
    NotEnoughDomains { have: usize },
    #[error("no URLs to test")]
    NoUrls,
}

/// Builds the tuple list for one CDN. Domain sampling runs over the full
/// domain set — a domain with no URLs of its own still serves as front
/// material. Each sampled domain that has URLs becomes a target for up
/// to the per-domain cap of them, and every (target, path) pair gets a
/// front drawn from the other sampled domains; fronts may repeat.
pub fn generate_tuples(
    cdn: &str,
    domains: &BTreeSet<String>,
    urls_by_domain: &BTreeMap<String, Vec<String>>,
    caps: &SampleCaps,
    seed: u64,
) -> Result<Vec<TestTuple>, TupleGenError> {
    if urls_by_domain.values().all(|paths| paths.is_empty()) {
        return Err(TupleGenError::NoUrls);
    }
    let all: Vec<&String> = domains.iter().collect();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("tuples:{cdn}")));
    let selected = sample_sorted_indices(&mut rng, all.len(), caps.max_domains_per_cdn);
    if selected.len() < 2 {
        return Err(TupleGenError::NotEnoughDomains {
            have: selected.len(),
        });
    }
    let selected_names: Vec<&String> = selected.iter().map(|&i| all[i]).collect();

    let mut tuples = Vec::new();
    for target in &selected_names {
        let Some(paths) = urls_by_domain.get(*target).filter(|p| !p.is_empty()) else {
            continue;
        };
        let path_idx = sample_sorted_indices(&mut rng, paths.len(), caps.max_urls_per_domain);
        let others: Vec<&&String> = selected_names.iter().filter(|d| *d != target).collect();
        for &pi in &path_idx {
            let front = others
                .choose(&mut rng)
                .expect("at least two sampled domains");
            tuples.push(TestTuple {
                cdn: cdn.to_string(),
                target: (**target).clone(),
                front: (**front).clone(),
                path: paths[pi].clone(),
            });
        }
    }
    Ok(tuples)
}

// ---------------------------------------------------------------------
// Per-CDN run

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CdnRunResult {
    pub cdn: String,
    pub outcomes: Vec<TupleOutcome>,
    /// True when the request budget ran out before the tuple list did.
    /// The partially probed tuple is discarded; its requests still count.
    pub truncated: bool,
    pub requests_spent: usize,
}

pub struct RelatednessChecker<'a> {
    pub rules: &'a SuffixRules,
    pub fetcher: &'a dyn CertificateFetcher,
}

impl RelatednessChecker<'_> {
    pub fn check(&self, a: &str, b: &str) -> Relatedness {
        are_related(a, b, self.rules, self.fetcher)
    }
}

/// Runs a CDN's tuples in order: screening first (free), then the three
/// probes. Stops at budget exhaustion and marks the run truncated.
pub fn test_cdn(
    client: &HttpClient,
    budget: &mut RequestBudget,
    tuples: &[TestTuple],
    checker: &RelatednessChecker<'_>,
) -> CdnRunResult {
    let cdn = tuples.first().map(|t| t.cdn.clone()).unwrap_or_default();
    let mut outcomes = Vec::new();
    let mut truncated = false;
    for tuple in tuples {
        let relatedness = checker.check(&tuple.target, &tuple.front);
        if relatedness != Relatedness::Unrelated {
            let reason = match &relatedness {
                Relatedness::SiblingSld => "same registrable domain".to_string(),
                Relatedness::SharedCertificate => "one certificate covers both names".to_string(),
                Relatedness::Unknown(why) => format!("relatedness unknown ({why})"),
                Relatedness::Unrelated => unreachable!(),
            };
            outcomes.push(TupleOutcome {
                tuple: tuple.clone(),
                verdict: Verdict::SkippedRelated,
                skip_reason: Some(reason),
                baseline: None,
                fronted: None,
                control: None,
            });
            continue;
        }
        match run_tuple(client, budget, tuple) {
            Ok(outcome) => outcomes.push(outcome),
            Err(_) => {
                truncated = true;
                break;
            }
        }
    }
    CdnRunResult {
        cdn,
        outcomes,
        truncated,
        requests_spent: budget.spent(),
    }
}
