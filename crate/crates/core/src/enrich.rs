//! Domain enrichment: popularity ranks from a `rank,domain` CSV and
//! maliciousness flags from a pluggable reputation service with a
//! TTL'd on-disk cache.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{FetchSpec, HttpClient};
use crate::psl::{effective_sld, SuffixRules};

#[derive(Debug, Error)]
pub enum EnrichError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{bad} of {total} ranking rows are unparsable (tolerance is 1%)")]
    TooManyBadRows { bad: usize, total: usize },
    #[error("ranking file has no usable rows")]
    EmptyRanking,
    #[error("band thresholds must be nonempty")]
    EmptyBands,
    #[error("band thresholds must be strictly increasing, got {prev} then {next}")]
    BandsNotIncreasing { prev: u64, next: u64 },
}

// ---------------------------------------------------------------------
// Popularity

/// Immutable domain → rank map (1 = most popular).
#[derive(Debug, Clone)]
pub struct RankingTable {
    ranks: BTreeMap<String, u64>,
    pub provenance: String,
}

impl RankingTable {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, u64)>, provenance: &str) -> Self {
        let mut ranks = BTreeMap::new();
        for (domain, rank) in pairs {
            ranks.entry(normalize_domain(&domain)).or_insert(rank);
        }
        RankingTable {
            ranks,
            provenance: provenance.to_string(),
        }
    }

    pub fn rank(&self, domain: &str) -> Option<u64> {
        self.ranks.get(&normalize_domain(domain)).copied()
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

fn normalize_domain(d: &str) -> String {
    d.trim().trim_end_matches('.').to_ascii_lowercase()
}

/// Loads a `rank,domain` CSV. A leading header row is recognized by its
/// non-numeric rank column and skipped; duplicate domains keep their
/// first (best) rank; more than 1% unparsable data rows aborts the load.
pub fn load_ranking(path: &Path) -> Result<RankingTable, EnrichError> {
    let io_err = |source| EnrichError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => io_err(source),
            other => io_err(std::io::Error::other(format!("{other:?}"))),
        })?;

    let mut ranks: BTreeMap<String, u64> = BTreeMap::new();
    let mut total = 0usize;
    let mut bad = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                total += 1;
                bad += 1;
                continue;
            }
        };
        let rank_field = record.get(0).unwrap_or("").trim();
        let domain_field = record.get(1).unwrap_or("").trim();
        if i == 0 && rank_field.parse::<u64>().is_err() {
            // Header row; not counted against the tolerance.
            continue;
        }
        total += 1;
        let (Ok(rank), false) = (rank_field.parse::<u64>(), domain_field.is_empty()) else {
            bad += 1;
            continue;
        };
        let domain = normalize_domain(domain_field);
        if let Some(existing) = ranks.get(&domain) {
            log::warn!("duplicate ranking row for {domain}: keeping rank {existing}, ignoring {rank}");
            continue;
        }
        ranks.insert(domain, rank);
    }
    if total == 0 {
        return Err(EnrichError::EmptyRanking);
    }
    if bad * 100 > total {
        return Err(EnrichError::TooManyBadRows { bad, total });
    }
    Ok(RankingTable {
        ranks,
        provenance: path.display().to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainPopularity {
    pub fqdn_rank: Option<u64>,
    pub sld_rank: Option<u64>,
}

/// Exact FQDN rank plus the rank of its registrable domain. Absent ranks
/// are ordinary; this never errors.
pub fn popularity_of(fqdn: &str, table: &RankingTable, rules: &SuffixRules) -> DomainPopularity {
    let fqdn_rank = table.rank(fqdn);
    let sld_rank = effective_sld(fqdn, rules)
        .ok()
        .and_then(|sld| table.rank(&sld));
    DomainPopularity { fqdn_rank, sld_rank }
}

// ---------------------------------------------------------------------
// Band histograms

/// Which rank feeds the histogram when both are known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankBasis {
    #[default]
    Sld,
    Fqdn,
}

pub const DEFAULT_BANDS: [u64; 4] = [10_000, 100_000, 500_000, 1_000_000];

/// Per-CDN domain counts per popularity band. Counts line up with
/// [`BandHistogram::labels`]: one bucket per threshold, then ranks past
/// the last threshold, then unranked domains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandHistogram {
    pub bands: Vec<u64>,
    pub basis: RankBasis,
    pub per_cdn: BTreeMap<String, Vec<u64>>,
}

impl BandHistogram {
    pub fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.bands.iter().map(|b| format!("<={b}")).collect();
        labels.push(format!(">{}", self.bands.last().expect("validated nonempty")));
        labels.push("unranked".to_string());
        labels
    }
}

/// Buckets CDN-labeled domains by popularity band: each ranked domain
/// lands in the first band whose threshold covers its rank. Row sums
/// always equal the per-CDN input counts.
pub fn band_histogram(
    domains: &[(String, String)],
    table: &RankingTable,
    rules: &SuffixRules,
    bands: &[u64],
    basis: RankBasis,
) -> Result<BandHistogram, EnrichError> {
    if bands.is_empty() {
        return Err(EnrichError::EmptyBands);
    }
    for pair in bands.windows(2) {
        if pair[1] <= pair[0] {
            return Err(EnrichError::BandsNotIncreasing {
                prev: pair[0],
                next: pair[1],
            });
        }
    }
    let buckets = bands.len() + 2;
    let overflow = bands.len();
    let unranked = bands.len() + 1;

    let mut per_cdn: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for (fqdn, cdn) in domains {
        let pop = popularity_of(fqdn, table, rules);
        let rank = match basis {
            RankBasis::Sld => pop.sld_rank,
            RankBasis::Fqdn => pop.fqdn_rank,
        };
        let bucket = match rank {
            Some(r) => bands
                .iter()
                .position(|&threshold| r <= threshold)
                .unwrap_or(overflow),
            None => unranked,
        };
        per_cdn.entry(cdn.clone()).or_insert_with(|| vec![0; buckets])[bucket] += 1;
    }
    Ok(BandHistogram {
        bands: bands.to_vec(),
        basis,
        per_cdn,
    })
}

// ---------------------------------------------------------------------
// Reputation

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReputationVerdict {
    pub domain: String,
    /// How many vendors flagged the domain; absent when no lookup could
    /// be made (cache-only miss, service unavailable).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vendor_flags: Option<u32>,
    pub checked_at: DateTime<Utc>,
    pub source: String,
}

/// One reputation lookup. Implementations return the number of vendors
/// flagging the domain.
pub trait ReputationClient: Send + Sync {
    fn vendor_flags(&self, domain: &str) -> Result<u32, String>;
    fn source(&self) -> &str;
}

/// Table-driven client for tests: unknown domains report zero flags,
/// every lookup is counted so cache behavior can be asserted.
pub struct StubReputation {
    flags: BTreeMap<String, u32>,
    failing: BTreeSet<String>,
    calls: AtomicUsize,
}

impl StubReputation {
    pub fn new(flags: impl IntoIterator<Item = (String, u32)>) -> Self {
        StubReputation {
            flags: flags.into_iter().collect(),
            failing: BTreeSet::new(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn failing_for(mut self, domain: &str) -> Self {
        self.failing.insert(domain.to_string());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ReputationClient for StubReputation {
    fn vendor_flags(&self, domain: &str) -> Result<u32, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.failing.contains(domain) {
            return Err("stub outage".to_string());
        }
        Ok(self.flags.get(domain).copied().unwrap_or(0))
    }

    fn source(&self) -> &str {
        "stub"
    }
}

/// Lookup client against an HTTPS reputation service:
/// `GET {path_prefix}{domain}[?key={credential}]` returning a JSON body
/// with a `vendor_flags` count.
pub struct HttpReputationClient {
    client: HttpClient,
    host: String,
    port: u16,
    path_prefix: String,
    credential: Option<String>,
}

impl HttpReputationClient {
    pub fn new(
        client: HttpClient,
        host: &str,
        port: u16,
        path_prefix: &str,
        credential: Option<String>,
    ) -> Self {
        HttpReputationClient {
            client,
            host: host.to_string(),
            port,
            path_prefix: path_prefix.to_string(),
            credential,
        }
    }
}

#[derive(Deserialize)]
struct ReputationBody {
    vendor_flags: u32,
}

impl ReputationClient for HttpReputationClient {
    fn vendor_flags(&self, domain: &str) -> Result<u32, String> {
        let mut spec = FetchSpec::simple(&self.host, &format!("{}{domain}", self.path_prefix));
        spec.port = self.port;
        if let Some(credential) = &self.credential {
            spec.path.push_str(&format!("?key={credential}"));
        }
        let response = self.client.fetch(&spec).map_err(|e| e.to_string())?;
        if response.status != 200 {
            return Err(format!("lookup returned status {}", response.status));
        }
        let body: ReputationBody =
            serde_json::from_slice(&response.body).map_err(|e| format!("bad response: {e}"))?;
        Ok(body.vendor_flags)
    }

    fn source(&self) -> &str {
        "http"
    }
}

/// Domain-keyed verdict cache with a freshness TTL, persisted as
/// line-JSON. Only verdicts that actually carry vendor counts are
/// stored; an outage is returned to the caller but never cached, so the
/// next run retries.
pub struct VerdictCache {
    entries: BTreeMap<String, ReputationVerdict>,
    ttl: Duration,
}

pub const DEFAULT_REPUTATION_TTL_DAYS: i64 = 7;

impl VerdictCache {
    pub fn new(ttl: Duration) -> Self {
        VerdictCache {
            entries: BTreeMap::new(),
            ttl,
        }
    }

    pub fn with_default_ttl() -> Self {
        Self::new(Duration::days(DEFAULT_REPUTATION_TTL_DAYS))
    }

    /// Missing file → empty cache; a malformed line is dropped rather
    /// than poisoning the run.
    pub fn load(path: &Path, ttl: Duration) -> Result<Self, EnrichError> {
        let mut cache = Self::new(ttl);
        let file = match std::fs::File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(cache),
            Err(source) => {
                return Err(EnrichError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|source| EnrichError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<ReputationVerdict>(&line) {
                Ok(v) => {
                    cache.entries.insert(v.domain.clone(), v);
                }
                Err(e) => log::warn!("dropping malformed cache line: {e}"),
            }
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnrichError> {
        let io_err = |source| EnrichError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        for v in self.entries.values() {
            serde_json::to_writer(&mut out, v).map_err(|e| io_err(e.into()))?;
            out.write_all(b"\n").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    pub fn fresh(&self, domain: &str, now: DateTime<Utc>) -> Option<&ReputationVerdict> {
        self.entries
            .get(domain)
            .filter(|v| now - v.checked_at <= self.ttl)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn verdicts(&self) -> impl Iterator<Item = &ReputationVerdict> {
        self.entries.values()
    }
}

/// Cache-first reputation check. Without a client (cache-only mode) a
/// miss yields an absent vendor count; a client failure yields source
/// "unavailable". Neither is fatal and neither is cached.
pub fn check_reputation(
    domain: &str,
    client: Option<&dyn ReputationClient>,
    cache: &mut VerdictCache,
    now: DateTime<Utc>,
) -> ReputationVerdict {
    if let Some(hit) = cache.fresh(domain, now) {
        return hit.clone();
    }
    let Some(client) = client else {
        return ReputationVerdict {
            domain: domain.to_string(),
            vendor_flags: None,
            checked_at: now,
            source: "cache-only".to_string(),
        };
    };
    match client.vendor_flags(domain) {
        Ok(flags) => {
            let verdict = ReputationVerdict {
                domain: domain.to_string(),
                vendor_flags: Some(flags),
                checked_at: now,
                source: client.source().to_string(),
            };
            cache.entries.insert(domain.to_string(), verdict.clone());
            verdict
        }
        Err(reason) => {
            log::warn!("reputation lookup for {domain} failed: {reason}");
            ReputationVerdict {
                domain: domain.to_string(),
                vendor_flags: None,
                checked_at: now,
                source: "unavailable".to_string(),
            }
        }
    }
}

pub const DEFAULT_MALICIOUS_THRESHOLD: u32 = 2;

pub fn is_malicious(verdict: &ReputationVerdict, threshold: u32) -> bool {
    verdict.vendor_flags.is_some_and(|f| f >= threshold)
}

/// Pure post-filter over already-collected verdicts: re-thresholding
/// never triggers lookups.
pub fn flag_malicious<'a>(
    verdicts: impl IntoIterator<Item = &'a ReputationVerdict>,
    threshold: u32,
) -> BTreeSet<String> {
    verdicts
        .into_iter()
        .filter(|v| is_malicious(v, threshold))
        .map(|v| v.domain.clone())
        .collect()
}
