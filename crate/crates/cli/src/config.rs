//! Run configuration: a TOML file plus command-line overrides resolve
//! into one validated [`PipelineConfig`] that every stage reads.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use serde::Deserialize;

use frontcheck_core::crawl::CrawlLimits;
use frontcheck_core::enrich::{
    RankBasis, DEFAULT_BANDS, DEFAULT_MALICIOUS_THRESHOLD, DEFAULT_REPUTATION_TTL_DAYS,
};
use frontcheck_core::http::{HttpClient, HttpClientOptions, TlsTrust};
use frontcheck_core::mapping::Window;
use frontcheck_core::resolver::{OverrideResolver, Resolver};
use frontcheck_core::tester::SampleCaps;

/// The largest per-CDN request budget a run may use without the operator
/// explicitly acknowledging it on the command line.
pub const REQUEST_CAP_GUARD: usize = 4000;

// ---------------------------------------------------------------------
// Raw file shape

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    catalog: Option<PathBuf>,
    #[serde(default)]
    dns_logs: Vec<PathBuf>,
    window: Option<WindowEntry>,
    ranking: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    #[serde(default)]
    caps: CapsEntry,
    #[serde(default)]
    politeness: PolitenessEntry,
    #[serde(default)]
    crawl: CrawlEntry,
    #[serde(default)]
    resolver: ResolverEntry,
    #[serde(default)]
    tls: TlsEntry,
    #[serde(default)]
    reputation: ReputationEntry,
    #[serde(default)]
    report: ReportEntry,
}

/// Dates are quoted `YYYY-MM-DD` strings.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowEntry {
    start: String,
    end: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CapsEntry {
    slds_per_cdn: Option<usize>,
    domains_per_cdn: Option<usize>,
    urls_per_domain: Option<usize>,
    requests_per_cdn: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolitenessEntry {
    min_request_interval_ms: Option<u64>,
    connect_timeout_s: Option<u64>,
    io_timeout_s: Option<u64>,
    cert_timeout_s: Option<u64>,
    user_agent: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CrawlEntry {
    page_budget: Option<usize>,
    depth_limit: Option<usize>,
    max_redirects: Option<usize>,
    honor_robots: Option<bool>,
    /// External fetcher argv; when set, site crawling shells out to it.
    external_fetcher: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResolverEntry {
    /// `host=ip:port` pins applied before the system resolver.
    #[serde(default)]
    overrides: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TlsEntry {
    web_pki: Option<bool>,
    #[serde(default)]
    extra_ca_pem: Vec<PathBuf>,
}

impl Default for TlsEntry {
    fn default() -> Self {
        TlsEntry {
            web_pki: None,
            extra_ca_pem: Vec::new(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReputationEntry {
    cache_file: Option<PathBuf>,
    ttl_days: Option<i64>,
    threshold: Option<u32>,
    /// Lookup service host; without it the stage runs cache-only.
    endpoint_host: Option<String>,
    endpoint_port: Option<u16>,
    path_prefix: Option<String>,
    /// Environment variable holding the API credential.
    credential_env: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportEntry {
    bands: Option<Vec<u64>>,
    rank_basis: Option<RankBasis>,
}

// ---------------------------------------------------------------------
// Resolved configuration

#[derive(Debug, Clone)]
pub struct Politeness {
    pub min_request_interval: Duration,
    pub connect_timeout: Duration,
    pub io_timeout: Duration,
    pub cert_timeout: Duration,
    pub user_agent: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ReputationSettings {
    pub cache_file: PathBuf,
    pub ttl_days: i64,
    pub threshold: u32,
    pub endpoint_host: Option<String>,
    pub endpoint_port: u16,
    pub path_prefix: String,
    pub credential_env: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub catalog: Option<PathBuf>,
    pub dns_logs: Vec<PathBuf>,
    pub window: Option<Window>,
    pub ranking: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub caps: SampleCaps,
    pub politeness: Politeness,
    pub crawl_limits: CrawlLimits,
    pub external_fetcher: Option<Vec<String>>,
    pub resolver_overrides: Vec<String>,
    pub web_pki: bool,
    pub extra_ca_pem: Vec<PathBuf>,
    pub reputation: ReputationSettings,
    pub bands: Vec<u64>,
    pub rank_basis: RankBasis,
}

/// Command-line values that override or extend the file.
#[derive(Debug, Default, Clone)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub resolver_overrides: Vec<String>,
    pub acknowledge_request_cap: bool,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>, cli: &CliOverrides) -> Result<PipelineConfig> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => FileConfig::default(),
        };
        Self::resolve(file, cli, path.and_then(Path::parent))
    }

    pub fn from_toml_str(text: &str, cli: &CliOverrides) -> Result<PipelineConfig> {
        let file = toml::from_str(text).context("parsing config")?;
        Self::resolve(file, cli, None)
    }

    fn resolve(
        file: FileConfig,
        cli: &CliOverrides,
        base_dir: Option<&Path>,
    ) -> Result<PipelineConfig> {
        let anchor = |p: PathBuf| -> PathBuf {
            match base_dir {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p,
            }
        };

        let window = match file.window {
            Some(w) => {
                let parse = |label: &str, text: &str| -> Result<NaiveDate> {
                    NaiveDate::parse_from_str(text, "%Y-%m-%d")
                        .with_context(|| format!("window.{label} `{text}` (want YYYY-MM-DD)"))
                };
                let start = parse("start", &w.start)?;
                let end = parse("end", &w.end)?;
                Some(Window::new(start, end).context("window")?)
            }
            None => None,
        };

        let defaults = SampleCaps::default();
        let caps = SampleCaps {
            max_slds_per_cdn: file.caps.slds_per_cdn.unwrap_or(defaults.max_slds_per_cdn),
            max_domains_per_cdn: file
                .caps
                .domains_per_cdn
                .unwrap_or(defaults.max_domains_per_cdn),
            max_urls_per_domain: file
                .caps
                .urls_per_domain
                .unwrap_or(defaults.max_urls_per_domain),
            max_requests_per_cdn: file
                .caps
                .requests_per_cdn
                .unwrap_or(defaults.max_requests_per_cdn),
        };
        for (label, value) in [
            ("caps.slds_per_cdn", caps.max_slds_per_cdn),
            ("caps.domains_per_cdn", caps.max_domains_per_cdn),
            ("caps.urls_per_domain", caps.max_urls_per_domain),
            ("caps.requests_per_cdn", caps.max_requests_per_cdn),
        ] {
            if value == 0 {
                bail!("{label} must be positive");
            }
        }
        if caps.max_requests_per_cdn > REQUEST_CAP_GUARD && !cli.acknowledge_request_cap {
            bail!(
                "caps.requests_per_cdn = {} exceeds the {} guard; rerun with \
                 --acknowledge-request-cap if the measurement really needs that volume",
                caps.max_requests_per_cdn,
                REQUEST_CAP_GUARD
            );
        }

        let bands = file.report.bands.unwrap_or_else(|| DEFAULT_BANDS.to_vec());
        if bands.is_empty() {
            bail!("report.bands must list at least one threshold");
        }
        for pair in bands.windows(2) {
            if pair[1] <= pair[0] {
                bail!(
                    "report.bands must be strictly increasing ({} then {})",
                    pair[0],
                    pair[1]
                );
            }
        }

        let politeness = Politeness {
            min_request_interval: Duration::from_millis(
                file.politeness.min_request_interval_ms.unwrap_or(500),
            ),
            connect_timeout: Duration::from_secs(file.politeness.connect_timeout_s.unwrap_or(15)),
            io_timeout: Duration::from_secs(file.politeness.io_timeout_s.unwrap_or(15)),
            cert_timeout: Duration::from_secs(file.politeness.cert_timeout_s.unwrap_or(10)),
            user_agent: file.politeness.user_agent,
        };

        let limit_defaults = CrawlLimits::default();
        let crawl_limits = CrawlLimits {
            page_budget: file.crawl.page_budget.unwrap_or(limit_defaults.page_budget),
            depth_limit: file.crawl.depth_limit.unwrap_or(limit_defaults.depth_limit),
            max_redirects: file
                .crawl
                .max_redirects
                .unwrap_or(limit_defaults.max_redirects),
            honor_robots: file
                .crawl
                .honor_robots
                .unwrap_or(limit_defaults.honor_robots),
        };

        let out_dir = cli
            .out_dir
            .clone()
            .or(file.out_dir.map(&anchor))
            .unwrap_or_else(|| PathBuf::from("out"));

        let mut resolver_overrides = file.resolver.overrides;
        resolver_overrides.extend(cli.resolver_overrides.iter().cloned());

        let reputation = ReputationSettings {
            cache_file: file
                .reputation
                .cache_file
                .map(&anchor)
                .unwrap_or_else(|| out_dir.join("reputation_cache.jsonl")),
            ttl_days: file
                .reputation
                .ttl_days
                .unwrap_or(DEFAULT_REPUTATION_TTL_DAYS),
            threshold: file
                .reputation
                .threshold
                .unwrap_or(DEFAULT_MALICIOUS_THRESHOLD),
            endpoint_host: file.reputation.endpoint_host,
            endpoint_port: file.reputation.endpoint_port.unwrap_or(443),
            path_prefix: file
                .reputation
                .path_prefix
                .unwrap_or_else(|| "/v1/domain/".to_string()),
            credential_env: file.reputation.credential_env,
        };

        Ok(PipelineConfig {
            catalog: file.catalog.map(&anchor),
            dns_logs: file.dns_logs.into_iter().map(&anchor).collect(),
            window,
            ranking: file.ranking.map(&anchor),
            out_dir,
            seed: cli.seed.or(file.seed).unwrap_or(0),
            caps,
            politeness,
            crawl_limits,
            external_fetcher: file.crawl.external_fetcher,
            resolver_overrides,
            web_pki: file.tls.web_pki.unwrap_or(true),
            extra_ca_pem: file.tls.extra_ca_pem.into_iter().map(&anchor).collect(),
            reputation,
            bands,
            rank_basis: file.report.rank_basis.unwrap_or_default(),
        })
    }

    pub fn resolver(&self) -> Result<Arc<dyn Resolver>> {
        let resolver = OverrideResolver::with_specs(self.resolver_overrides.iter())
            .context("resolver overrides")?;
        Ok(Arc::new(resolver))
    }

    pub fn tls_trust(&self) -> TlsTrust {
        TlsTrust {
            web_pki: self.web_pki,
            extra_pem_files: self.extra_ca_pem.clone(),
        }
    }

    pub fn http_options(&self) -> HttpClientOptions {
        let mut opts = HttpClientOptions {
            connect_timeout: self.politeness.connect_timeout,
            io_timeout: self.politeness.io_timeout,
            min_request_interval: self.politeness.min_request_interval,
            ..HttpClientOptions::default()
        };
        if let Some(agent) = &self.politeness.user_agent {
            opts.user_agent = agent.clone();
        }
        opts
    }

    pub fn http_client(&self) -> Result<HttpClient> {
        let client = HttpClient::new(&self.tls_trust(), self.resolver()?, self.http_options())
            .context("building HTTP client")?;
        Ok(client)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_resolves_to_defaults() {
        let cfg = PipelineConfig::from_toml_str("", &CliOverrides::default()).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.out_dir, PathBuf::from("out"));
        assert_eq!(cfg.caps, SampleCaps::default());
        assert_eq!(cfg.bands, DEFAULT_BANDS.to_vec());
        assert!(cfg.web_pki);
        assert_eq!(cfg.politeness.min_request_interval, Duration::from_millis(500));
        assert_eq!(cfg.reputation.ttl_days, 7);
        assert_eq!(cfg.reputation.threshold, 2);
    }

    #[test]
    fn cli_values_win_over_file_values() {
        let cli = CliOverrides {
            seed: Some(9),
            out_dir: Some(PathBuf::from("elsewhere")),
            resolver_overrides: vec!["b.test=127.0.0.1:2".into()],
            acknowledge_request_cap: false,
        };
        let cfg = PipelineConfig::from_toml_str(
            "seed = 4\nout_dir = \"file-dir\"\n[resolver]\noverrides = [\"a.test=127.0.0.1:1\"]\n",
            &cli,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(
            cfg.resolver_overrides,
            vec!["a.test=127.0.0.1:1".to_string(), "b.test=127.0.0.1:2".into()]
        );
    }

    #[test]
    fn oversized_request_cap_needs_acknowledgement() {
        let toml = "[caps]\nrequests_per_cdn = 4001\n";
        let err = PipelineConfig::from_toml_str(toml, &CliOverrides::default()).unwrap_err();
        assert!(err.to_string().contains("--acknowledge-request-cap"), "{err}");

        let cli = CliOverrides {
            acknowledge_request_cap: true,
            ..CliOverrides::default()
        };
        let cfg = PipelineConfig::from_toml_str(toml, &cli).unwrap();
        assert_eq!(cfg.caps.max_requests_per_cdn, 4001);
    }

    #[test]
    fn cap_at_the_guard_needs_no_flag() {
        let toml = "[caps]\nrequests_per_cdn = 4000\n";
        assert!(PipelineConfig::from_toml_str(toml, &CliOverrides::default()).is_ok());
    }

    #[test]
    fn zero_caps_are_rejected() {
        let err = PipelineConfig::from_toml_str("[caps]\nurls_per_domain = 0\n", &CliOverrides::default())
            .unwrap_err();
        assert!(err.to_string().contains("urls_per_domain"), "{err}");
    }

    #[test]
    fn window_parses_and_validates_order() {
        let cfg = PipelineConfig::from_toml_str(
            "[window]\nstart = \"2026-01-01\"\nend = \"2026-01-31\"\n",
            &CliOverrides::default(),
        )
        .unwrap();
        let w = cfg.window.unwrap();
        assert_eq!(w.start, NaiveDate::from_ymd_opt(2026, 1, 1).unwrap());
        assert_eq!(w.end, NaiveDate::from_ymd_opt(2026, 1, 31).unwrap());

        assert!(PipelineConfig::from_toml_str(
            "[window]\nstart = \"2026-02-01\"\nend = \"2026-01-31\"\n",
            &CliOverrides::default(),
        )
        .is_err());
    }

    #[test]
    fn bands_must_increase() {
        let err = PipelineConfig::from_toml_str(
            "[report]\nbands = [10, 10]\n",
            &CliOverrides::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("strictly increasing"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml_str("tyop = 1\n", &CliOverrides::default()).is_err());
    }

    #[test]
    fn relative_paths_anchor_to_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "catalog = \"cat.txt\"\ndns_logs = [\"log.jsonl\"]\n").unwrap();
        let cfg = PipelineConfig::load(Some(&path), &CliOverrides::default()).unwrap();
        assert_eq!(cfg.catalog.unwrap(), dir.path().join("cat.txt"));
        assert_eq!(cfg.dns_logs, vec![dir.path().join("log.jsonl")]);
    }
}
