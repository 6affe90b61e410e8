//! Self-contained offline demo: spins up a loopback CDN fleet from a
//! bundled harness file, runs the whole pipeline against it, and checks
//! that the verdicts come out the way the fleet's policy dictates.
//!
//! Three scenarios ship with the binary:
//!
//! * `allow`   — no edge checks SNI against Host; fronting succeeds.
//! * `enforce` — every edge rejects mismatches with 421; fronting fails.
//! * `split`   — half the fleet enforces; both outcomes appear and the
//!   report flags the partial-enforcement pattern.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;

use frontcheck_core::dnslog::{format_log_line, DnsObservation, RecordType};
use frontcheck_core::report::{CdnReport, ReportFormat};
use frontcheck_mock_cdn::{parse_harness, MockFleet};

use crate::config::{CliOverrides, PipelineConfig};
use crate::stages::{build_reports, run_discover, run_enrich, run_ingest, run_report, run_test};

const PIPELINE_TOML: &str = include_str!("../demo/pipeline.toml");

struct Scenario {
    name: &'static str,
    headline: &'static str,
    harness: &'static str,
    check: fn(&CdnReport) -> Vec<String>,
}

const SCENARIOS: [Scenario; 3] = [
    Scenario {
        name: "allow",
        headline: "no edge enforces SNI/Host agreement",
        harness: include_str!("../demo/allow.toml"),
        check: check_allow,
    },
    Scenario {
        name: "enforce",
        headline: "every edge answers mismatches with 421",
        harness: include_str!("../demo/enforce.toml"),
        check: check_enforce,
    },
    Scenario {
        name: "split",
        headline: "half the fleet enforces, half does not",
        harness: include_str!("../demo/split.toml"),
        check: check_split,
    },
];

fn check_allow(r: &CdnReport) -> Vec<String> {
    let mut bad = Vec::new();
    expect(&mut bad, r.prone, "prone should be true");
    expect(&mut bad, !r.partial_enforcement_hint, "no partial-enforcement hint expected");
    expect(&mut bad, r.tuples_success > 0, "some tuples should succeed");
    expect(&mut bad, r.tuples_failed_front == 0, "no tuple should be blocked");
    expect(&mut bad, r.tuples_skipped == 0, "no tuple should be skipped");
    bad
}

fn check_enforce(r: &CdnReport) -> Vec<String> {
    let mut bad = Vec::new();
    expect(&mut bad, !r.prone, "prone should be false");
    expect(&mut bad, r.tuples_success == 0, "no tuple should succeed");
    expect(&mut bad, r.tuples_failed_front > 0, "tuples should be blocked");
    expect(&mut bad, r.tuples_failed_baseline == 0, "baselines should still work");
    bad
}

fn check_split(r: &CdnReport) -> Vec<String> {
    let mut bad = Vec::new();
    expect(&mut bad, r.prone, "prone should be true");
    expect(&mut bad, r.tuples_success > 0, "tuples fronted via lax edges should succeed");
    expect(&mut bad, r.tuples_failed_front > 0, "tuples fronted via strict edges should fail");
    expect(&mut bad, r.partial_enforcement_hint, "partial-enforcement hint should fire");
    bad
}

fn expect(violations: &mut Vec<String>, ok: bool, what: &str) {
    if !ok {
        violations.push(what.to_string());
    }
}

/// Runs one named scenario, or all three in order.
pub fn run_demo(only: Option<&str>) -> Result<()> {
    let selected: Vec<&Scenario> = match only {
        Some(name) => {
            let Some(s) = SCENARIOS.iter().find(|s| s.name == name) else {
                bail!(
                    "unknown scenario `{name}` (available: {})",
                    SCENARIOS.map(|s| s.name).join(", ")
                );
            };
            vec![s]
        }
        None => SCENARIOS.iter().collect(),
    };
    for scenario in selected {
        run_scenario(scenario)?;
    }
    println!("demo: every scenario behaved as its fleet policy dictates");
    Ok(())
}

fn run_scenario(scenario: &Scenario) -> Result<()> {
    println!("=== scenario {}: {} ===", scenario.name, scenario.headline);

    let dir = tempfile::tempdir().context("creating demo workspace")?;
    let fleet = MockFleet::spawn(parse_harness(scenario.harness, dir.path())?)
        .context("spawning demo fleet")?;

    let ca_path = dir.path().join("ca.pem");
    fleet.write_ca_pem(&ca_path)?;
    let cfg = demo_config(dir.path(), &fleet, &ca_path)?;

    let ingest = run_ingest(&cfg)?;
    if ingest.stability.stable_fqdns == 0 {
        bail!("demo fixture produced no stable mappings");
    }
    run_discover(&cfg)?;
    run_test(&cfg)?;
    let enrichment = run_enrich(&cfg)?;
    let histogram = enrichment
        .histogram
        .context("demo ranking fixture should produce a histogram")?;
    let bands = histogram
        .per_cdn
        .get("mockcdn")
        .context("histogram should be keyed by the demo CDN")?;
    if bands != &[1, 1, 1, 1, 0] {
        bail!("demo popularity bands came out as {bands:?}, expected [1, 1, 1, 1, 0]");
    }
    if !enrichment.malicious.contains("cdn.site3.demo") {
        bail!("the demo's one bad-reputation domain was not flagged");
    }
    let table = run_report(&cfg, ReportFormat::Table)?;
    print!("{}", String::from_utf8_lossy(&table));

    let (reports, _) = build_reports(&cfg)?;
    let report = reports
        .iter()
        .find(|r| r.cdn == "mockcdn")
        .context("report is missing the demo CDN")?;
    let violations = (scenario.check)(report);
    if !violations.is_empty() {
        bail!("scenario {}: {}", scenario.name, violations.join("; "));
    }
    println!("scenario {}: verdicts as expected\n", scenario.name);
    Ok(())
}

/// Fixture inputs plus the bundled pipeline settings, wired to the
/// fleet's ephemeral ports.
fn demo_config(dir: &Path, fleet: &MockFleet, ca_path: &Path) -> Result<PipelineConfig> {
    let catalog = dir.join("catalog.txt");
    fs::write(&catalog, "mockcdn: mockcdn-demo.example\n")?;

    let dns_log = dir.join("cname.log");
    let mut lines = String::new();
    for day in 1..=3u32 {
        let day = NaiveDate::from_ymd_opt(2026, 8, day).unwrap();
        for family in 0..4 {
            let qname = format!("cdn.site{family}.demo");
            lines.push_str(&format_log_line(&DnsObservation {
                day,
                qname: qname.clone(),
                record_name: qname,
                record_type: RecordType::Cname,
                record_data: format!("edge-{family}.mockcdn-demo.example"),
            }));
            lines.push('\n');
        }
    }
    fs::write(&dns_log, lines)?;

    let ranking = dir.join("ranking.csv");
    fs::write(
        &ranking,
        "rank,domain\n500,site0.demo\n50000,site1.demo\n200000,site2.demo\n2000000,site3.demo\n",
    )?;

    let mut cfg = PipelineConfig::from_toml_str(PIPELINE_TOML, &CliOverrides::default())?;
    cfg.catalog = Some(catalog);
    cfg.dns_logs = vec![dns_log];
    cfg.ranking = Some(ranking);
    cfg.out_dir = dir.join("out");
    cfg.web_pki = false;
    cfg.extra_ca_pem = vec![ca_path.to_path_buf()];
    cfg.resolver_overrides = fleet.resolver_specs()?;
    cfg.reputation.cache_file = dir.join("reputation_cache.jsonl");
    cfg.reputation.endpoint_host = Some("rep.mockcdn-demo.example".to_string());
    Ok(cfg)
}
