//! The five pipeline stages and the artifact files they exchange.
//!
//! Each stage reads the previous stage's output from the run directory
//! and writes its own, so a run can be resumed, re-reported with
//! different settings, or inspected between steps. A missing input names
//! both the file and the stage that produces it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::Utc;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use frontcheck_core::catalog::load_catalog;
use frontcheck_core::crawl::{
    build_url_sets, check_root_liveness, crawl_site, eligible_slds, external_crawl,
    paths_by_host, sample_slds_for_cdn, DiscoveredUrl, SiteLiveness,
};
use frontcheck_core::dnslog::DnsLogReader;
use frontcheck_core::enrich::{
    band_histogram, check_reputation, flag_malicious, load_ranking, BandHistogram,
    HttpReputationClient, ReputationClient, ReputationVerdict, VerdictCache,
};
use frontcheck_core::mapping::{
    extract_mappings, filter_stable, read_stable_mappings, write_stable_mappings, IngestStats,
    StabilityStats,
};
use frontcheck_core::psl::SuffixRules;
use frontcheck_core::report::{
    aggregate, emit, CdnReport, EnrichmentOverlay, ReportFormat,
};
use frontcheck_core::tester::{
    generate_tuples, test_cdn, CachingCertFetcher, CdnRunResult, LiveCertFetcher,
    RelatednessChecker, RequestBudget, TupleOutcome,
};

use crate::config::PipelineConfig;

// ---------------------------------------------------------------------
// Artifact layout

pub struct Artifacts {
    out_dir: PathBuf,
}

impl Artifacts {
    pub fn new(out_dir: &Path) -> Artifacts {
        Artifacts {
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn stable_mappings(&self) -> PathBuf {
        self.out_dir.join("stable_mappings.jsonl")
    }

    pub fn ingest_stats(&self) -> PathBuf {
        self.out_dir.join("ingest_stats.json")
    }

    pub fn liveness(&self) -> PathBuf {
        self.out_dir.join("liveness.jsonl")
    }

    pub fn urls(&self) -> PathBuf {
        self.out_dir.join("urls.jsonl")
    }

    pub fn url_sets(&self) -> PathBuf {
        self.out_dir.join("url_sets.json")
    }

    pub fn outcomes(&self) -> PathBuf {
        self.out_dir.join("outcomes.jsonl")
    }

    pub fn runs(&self) -> PathBuf {
        self.out_dir.join("runs.json")
    }

    pub fn enrichment(&self) -> PathBuf {
        self.out_dir.join("enrichment.json")
    }

    pub fn report_file(&self, format: ReportFormat) -> PathBuf {
        let name = match format {
            ReportFormat::Json => "report.jsonl",
            ReportFormat::Table => "report.txt",
            ReportFormat::PlotData => "report.csv",
        };
        self.out_dir.join(name)
    }

    /// Checks a required input exists; the error names the stage to run.
    fn require(&self, path: PathBuf, producer: &str) -> Result<PathBuf> {
        if !path.is_file() {
            bail!(
                "missing artifact {}: run the `{producer}` stage first",
                path.display()
            );
        }
        Ok(path)
    }

    fn ensure_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)
        .with_context(|| format!("serializing {}", path.display()))?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    use std::io::Write;
    let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item)
            .with_context(|| format!("serializing {}", path.display()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    use std::io::BufRead;
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut items = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{} line {}", path.display(), idx + 1))?,
        );
    }
    Ok(items)
}

// ---------------------------------------------------------------------
// ingest

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestSummary {
    pub stats: IngestStats,
    pub stability: StabilityStats,
    pub malformed_lines: usize,
    pub log_lines: usize,
}

/// DNS logs + catalog → stable FQDN→CDN mappings.
pub fn run_ingest(cfg: &PipelineConfig) -> Result<IngestSummary> {
    let catalog_path = cfg
        .catalog
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("ingest needs `catalog = \"...\"` in the config"))?;
    let catalog = load_catalog(catalog_path)?;
    if cfg.dns_logs.is_empty() {
        bail!("ingest needs at least one entry in `dns_logs`");
    }

    let mut readers = Vec::with_capacity(cfg.dns_logs.len());
    for path in &cfg.dns_logs {
        let file =
            File::open(path).with_context(|| format!("opening DNS log {}", path.display()))?;
        readers.push(DnsLogReader::new(BufReader::new(file)));
    }
    let (map, stats) = extract_mappings(readers.iter_mut().flatten(), &catalog, cfg.window)
        .context("reading DNS logs")?;
    let (stable, stability) = filter_stable(&map);

    let artifacts = Artifacts::new(&cfg.out_dir);
    artifacts.ensure_dir()?;
    let out_path = artifacts.stable_mappings();
    let out = File::create(&out_path).with_context(|| format!("writing {}", out_path.display()))?;
    write_stable_mappings(BufWriter::new(out), &stable)?;

    let summary = IngestSummary {
        stats,
        stability,
        malformed_lines: readers.iter().map(|r| r.malformed_count()).sum(),
        log_lines: readers.iter().map(|r| r.total_lines()).sum(),
    };
    write_json(&artifacts.ingest_stats(), &summary)?;
    log::info!(
        "ingest: {} stable of {} fqdns ({} multi-CDN), {} malformed lines",
        summary.stability.stable_fqdns,
        summary.stability.total_fqdns,
        summary.stability.multi_cdn_fqdns,
        summary.malformed_lines
    );
    Ok(summary)
}

// ---------------------------------------------------------------------
// discover

#[derive(Debug, Serialize, Deserialize)]
pub struct DiscoverSummary {
    pub slds_checked: usize,
    pub slds_live: usize,
    pub slds_crawled: usize,
    pub urls_found: usize,
    /// Testable URL count per CDN.
    pub set_sizes: BTreeMap<String, usize>,
}

/// Liveness screen, seeded crawl of sampled sites, and per-CDN URL sets.
pub fn run_discover(cfg: &PipelineConfig) -> Result<DiscoverSummary> {
    let artifacts = Artifacts::new(&cfg.out_dir);
    let stable_path = artifacts.require(artifacts.stable_mappings(), "ingest")?;
    let stable = read_stable_mappings(BufReader::new(
        File::open(&stable_path).with_context(|| format!("reading {}", stable_path.display()))?,
    ))?;

    let rules = SuffixRules::bundled();
    let client = cfg.http_client()?;
    let cdns: BTreeSet<&str> = stable.iter().map(|m| m.cdn.as_str()).collect();

    // Every SLD is checked and crawled once, even when several CDNs
    // share it.
    let mut candidates: BTreeSet<String> = BTreeSet::new();
    for cdn in &cdns {
        candidates.extend(eligible_slds(&stable, cdn, &rules));
    }

    let mut liveness: Vec<SiteLiveness> = Vec::with_capacity(candidates.len());
    let mut live: BTreeSet<String> = BTreeSet::new();
    for sld in &candidates {
        let check = check_root_liveness(&client, sld);
        if check.live {
            live.insert(sld.clone());
        }
        liveness.push(check);
    }

    let mut to_crawl: BTreeSet<String> = BTreeSet::new();
    for cdn in &cdns {
        to_crawl.extend(sample_slds_for_cdn(
            &live,
            &stable,
            cdn,
            cfg.caps.max_slds_per_cdn,
            cfg.seed,
            &rules,
        ));
    }

    let mut discovered: BTreeMap<String, DiscoveredUrl> = BTreeMap::new();
    for sld in &to_crawl {
        match &cfg.external_fetcher {
            Some(command) => {
                let urls = external_crawl(command, &format!("https://{sld}/"))
                    .with_context(|| format!("external fetcher on {sld}"))?;
                for url in urls {
                    discovered.entry(url.url.clone()).or_insert(url);
                }
            }
            None => {
                let result = crawl_site(&client, sld, &cfg.crawl_limits, &rules);
                for note in &result.diagnostics {
                    log::debug!("crawl {sld}: {note}");
                }
                for url in result.urls {
                    discovered.entry(url.url.clone()).or_insert(url);
                }
            }
        }
    }
    let discovered: Vec<DiscoveredUrl> = discovered.into_values().collect();

    let mut sets: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for cdn in &cdns {
        sets.insert(cdn.to_string(), build_url_sets(&discovered, &stable, cdn));
    }

    artifacts.ensure_dir()?;
    write_jsonl(&artifacts.liveness(), &liveness)?;
    write_jsonl(&artifacts.urls(), &discovered)?;
    write_json(&artifacts.url_sets(), &sets)?;

    let summary = DiscoverSummary {
        slds_checked: candidates.len(),
        slds_live: live.len(),
        slds_crawled: to_crawl.len(),
        urls_found: discovered.len(),
        set_sizes: sets.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
    };
    log::info!(
        "discover: {}/{} sites live, {} crawled, {} urls",
        summary.slds_live,
        summary.slds_checked,
        summary.slds_crawled,
        summary.urls_found
    );
    Ok(summary)
}

// ---------------------------------------------------------------------
// test

/// Per-run bookkeeping that the flat outcome log cannot carry.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub cdn: String,
    pub truncated: bool,
    pub requests_spent: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TestSummary {
    pub cdns_tested: usize,
    pub tuples_run: usize,
    pub requests_spent: usize,
}

/// Three-probe fronting tests over every CDN's URL set.
pub fn run_test(cfg: &PipelineConfig) -> Result<TestSummary> {
    let artifacts = Artifacts::new(&cfg.out_dir);
    let sets_path = artifacts.require(artifacts.url_sets(), "discover")?;
    let sets: BTreeMap<String, BTreeSet<String>> = read_json(&sets_path)?;

    let rules = SuffixRules::bundled();
    let client = cfg.http_client()?;
    let fetcher = CachingCertFetcher::new(LiveCertFetcher::new(
        &cfg.tls_trust(),
        cfg.resolver()?,
        cfg.politeness.cert_timeout,
    )?);
    let checker = RelatednessChecker {
        rules: &rules,
        fetcher: &fetcher,
    };

    let mut runs: Vec<CdnRunResult> = Vec::new();
    for (cdn, urls) in &sets {
        let by_host = paths_by_host(urls);
        let domains: BTreeSet<String> = by_host.keys().cloned().collect();
        let tuples = match generate_tuples(cdn, &domains, &by_host, &cfg.caps, cfg.seed) {
            Ok(tuples) => tuples,
            Err(reason) => {
                log::warn!("skipping {cdn}: {reason}");
                continue;
            }
        };
        let mut budget = RequestBudget::new(cfg.caps.max_requests_per_cdn);
        runs.push(test_cdn(&client, &mut budget, &tuples, &checker));
    }

    artifacts.ensure_dir()?;
    let outcomes: Vec<&TupleOutcome> = runs.iter().flat_map(|r| &r.outcomes).collect();
    write_jsonl(&artifacts.outcomes(), outcomes.iter().copied())?;
    let records: Vec<RunRecord> = runs
        .iter()
        .map(|r| RunRecord {
            cdn: r.cdn.clone(),
            truncated: r.truncated,
            requests_spent: r.requests_spent,
        })
        .collect();
    write_json(&artifacts.runs(), &records)?;

    let summary = TestSummary {
        cdns_tested: runs.len(),
        tuples_run: outcomes.len(),
        requests_spent: runs.iter().map(|r| r.requests_spent).sum(),
    };
    log::info!(
        "test: {} cdns, {} tuples, {} requests",
        summary.cdns_tested,
        summary.tuples_run,
        summary.requests_spent
    );
    Ok(summary)
}

// ---------------------------------------------------------------------
// enrich

#[derive(Debug, Serialize, Deserialize)]
pub struct EnrichmentArtifact {
    pub histogram: Option<BandHistogram>,
    pub malicious: BTreeSet<String>,
    pub verdicts: Vec<ReputationVerdict>,
}

/// Popularity bands and reputation verdicts for the tested targets.
pub fn run_enrich(cfg: &PipelineConfig) -> Result<EnrichmentArtifact> {
    let artifacts = Artifacts::new(&cfg.out_dir);
    let outcomes_path = artifacts.require(artifacts.outcomes(), "test")?;
    let outcomes: Vec<TupleOutcome> = read_jsonl(&outcomes_path)?;

    // (cdn, target) pairs that actually got probed.
    let pairs: BTreeSet<(String, String)> = outcomes
        .iter()
        .filter(|o| o.baseline.is_some())
        .map(|o| (o.tuple.cdn.clone(), o.tuple.target.clone()))
        .collect();

    let rules = SuffixRules::bundled();
    let histogram = match &cfg.ranking {
        Some(path) => {
            let table = load_ranking(path)?;
            let labeled: Vec<(String, String)> = pairs
                .iter()
                .map(|(cdn, target)| (target.clone(), cdn.clone()))
                .collect();
            Some(band_histogram(
                &labeled,
                &table,
                &rules,
                &cfg.bands,
                cfg.rank_basis,
            )?)
        }
        None => None,
    };

    let settings = &cfg.reputation;
    let mut cache = VerdictCache::load(
        &settings.cache_file,
        chrono::Duration::days(settings.ttl_days),
    )?;
    let http_client;
    let client: Option<&dyn ReputationClient> = match &settings.endpoint_host {
        Some(host) => {
            let credential = settings
                .credential_env
                .as_ref()
                .and_then(|var| std::env::var(var).ok());
            http_client = HttpReputationClient::new(
                cfg.http_client()?,
                host,
                settings.endpoint_port,
                &settings.path_prefix,
                credential,
            );
            Some(&http_client)
        }
        None => None,
    };

    let now = Utc::now();
    let targets: BTreeSet<&str> = pairs.iter().map(|(_, d)| d.as_str()).collect();
    let mut verdicts = Vec::with_capacity(targets.len());
    for domain in targets {
        verdicts.push(check_reputation(domain, client, &mut cache, now));
    }
    if let Some(parent) = settings.cache_file.parent() {
        fs::create_dir_all(parent)?;
    }
    cache.save(&settings.cache_file)?;

    let enrichment = EnrichmentArtifact {
        histogram,
        malicious: flag_malicious(&verdicts, settings.threshold),
        verdicts,
    };
    artifacts.ensure_dir()?;
    write_json(&artifacts.enrichment(), &enrichment)?;
    log::info!(
        "enrich: {} targets, {} flagged, histogram {}",
        enrichment.verdicts.len(),
        enrichment.malicious.len(),
        if enrichment.histogram.is_some() { "built" } else { "skipped (no ranking)" }
    );
    Ok(enrichment)
}

// ---------------------------------------------------------------------
// report

/// Rebuilds per-CDN runs from the artifacts, aggregates them, writes all
/// three report files, and returns the requested rendering.
pub fn run_report(cfg: &PipelineConfig, format: ReportFormat) -> Result<Vec<u8>> {
    let (reports, artifacts) = build_reports(cfg)?;
    artifacts.ensure_dir()?;
    for fmt in [ReportFormat::Json, ReportFormat::Table, ReportFormat::PlotData] {
        fs::write(artifacts.report_file(fmt), emit(&reports, fmt)?)?;
    }
    Ok(emit(&reports, format)?)
}

pub fn build_reports(cfg: &PipelineConfig) -> Result<(Vec<CdnReport>, Artifacts)> {
    let artifacts = Artifacts::new(&cfg.out_dir);
    let outcomes_path = artifacts.require(artifacts.outcomes(), "test")?;
    let runs_path = artifacts.require(artifacts.runs(), "test")?;
    let outcomes: Vec<TupleOutcome> = read_jsonl(&outcomes_path)?;
    let records: Vec<RunRecord> = read_json(&runs_path)?;

    let mut by_cdn: BTreeMap<String, Vec<TupleOutcome>> = BTreeMap::new();
    for outcome in outcomes {
        by_cdn
            .entry(outcome.tuple.cdn.clone())
            .or_default()
            .push(outcome);
    }
    let mut runs: Vec<CdnRunResult> = records
        .into_iter()
        .map(|record| CdnRunResult {
            outcomes: by_cdn.remove(&record.cdn).unwrap_or_default(),
            cdn: record.cdn,
            truncated: record.truncated,
            requests_spent: record.requests_spent,
        })
        .collect();
    for (cdn, outcomes) in by_cdn {
        log::warn!("outcomes for {cdn} have no run record; spend unknown");
        runs.push(CdnRunResult {
            cdn,
            outcomes,
            truncated: false,
            requests_spent: 0,
        });
    }

    let overlay = if artifacts.enrichment().is_file() {
        let enrichment: EnrichmentArtifact = read_json(&artifacts.enrichment())?;
        Some(EnrichmentOverlay {
            histogram: enrichment.histogram,
            malicious: enrichment.malicious,
        })
    } else {
        None
    };

    let reports = aggregate(&runs, overlay.as_ref());
    Ok((reports, artifacts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CliOverrides;

    fn config_in(dir: &Path) -> PipelineConfig {
        let cli = CliOverrides {
            out_dir: Some(dir.to_path_buf()),
            ..CliOverrides::default()
        };
        PipelineConfig::from_toml_str("", &cli).unwrap()
    }

    #[test]
    fn missing_inputs_name_file_and_producing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config_in(dir.path());

        let err = run_discover(&cfg).unwrap_err().to_string();
        assert!(err.contains("stable_mappings.jsonl"), "{err}");
        assert!(err.contains("`ingest`"), "{err}");

        let err = run_test(&cfg).unwrap_err().to_string();
        assert!(err.contains("url_sets.json"), "{err}");
        assert!(err.contains("`discover`"), "{err}");

        let err = run_enrich(&cfg).unwrap_err().to_string();
        assert!(err.contains("outcomes.jsonl"), "{err}");
        assert!(err.contains("`test`"), "{err}");

        let err = run_report(&cfg, ReportFormat::Table).unwrap_err().to_string();
        assert!(err.contains("outcomes.jsonl"), "{err}");
    }

    #[test]
    fn ingest_requires_catalog_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config_in(dir.path());
        let err = run_ingest(&cfg).unwrap_err().to_string();
        assert!(err.contains("catalog"), "{err}");
    }

    #[test]
    fn jsonl_round_trips_and_skips_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let items = vec!["a".to_string(), "b".to_string()];
        write_jsonl(&path, &items).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push('\n');
        fs::write(&path, text).unwrap();
        let back: Vec<String> = read_jsonl(&path).unwrap();
        assert_eq!(back, items);
    }
}
