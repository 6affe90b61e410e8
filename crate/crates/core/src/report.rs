//! Aggregation of tuple outcomes into per-CDN findings, and their
//! serialization as JSON, a human-readable table, or plot-ready CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enrich::BandHistogram;
use crate::tester::{CdnRunResult, TupleOutcome, Verdict};

/// Marker in an outcome's `skip_reason` for responses traced to a
/// different CDN than the one under test. The pipeline never sets it
/// itself — attribution of a response to another CDN needs operator
/// review — but once set, aggregation moves the outcome from its verdict
/// bucket into `tuples_invalid` under this reason code.
pub const REASON_CROSS_CDN: &str = "cross-cdn";

pub fn mark_cross_cdn(outcome: &mut TupleOutcome, note: &str) {
    outcome.skip_reason = Some(if note.is_empty() {
        REASON_CROSS_CDN.to_string()
    } else {
        format!("{REASON_CROSS_CDN}: {note}")
    });
}

fn is_cross_cdn(outcome: &TupleOutcome) -> bool {
    outcome
        .skip_reason
        .as_deref()
        .is_some_and(|r| r == REASON_CROSS_CDN || r.starts_with("cross-cdn:"))
}

/// Extra per-CDN annotations merged into reports when enrichment ran.
#[derive(Debug, Clone, Default)]
pub struct EnrichmentOverlay {
    pub histogram: Option<BandHistogram>,
    /// FQDNs flagged malicious at the configured vendor threshold.
    pub malicious: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdnReport {
    pub cdn: String,
    /// Distinct target domains with at least one probed (non-skipped)
    /// tuple.
    pub domains_tested: usize,
    pub domains_with_success: usize,
    pub tuples_total: usize,
    pub tuples_success: usize,
    pub tuples_failed_baseline: usize,
    pub tuples_failed_front: usize,
    pub tuples_invalid: usize,
    pub tuples_skipped: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub invalid_reasons: BTreeMap<String, usize>,
    pub prone: bool,
    pub partial_enforcement_hint: bool,
    /// Distinct responding-server identities of the fronted probe, keyed
    /// by verdict.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub served_by_clusters: BTreeMap<String, BTreeSet<String>>,
    pub requests_spent: usize,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub popularity_bands: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub malicious_targets: Option<usize>,
}

impl CdnReport {
    pub fn domain_success_rate(&self) -> f64 {
        if self.domains_tested == 0 {
            0.0
        } else {
            self.domains_with_success as f64 / self.domains_tested as f64
        }
    }

    /// Success rate over probed tuples (skips excluded from the
    /// denominator).
    pub fn tuple_success_rate(&self) -> f64 {
        let attempted = self.tuples_total - self.tuples_skipped;
        if attempted == 0 {
            0.0
        } else {
            self.tuples_success as f64 / attempted as f64
        }
    }
}

fn verdict_label(v: Verdict) -> &'static str {
    match v {
        Verdict::Success => "success",
        Verdict::FailBaseline => "fail_baseline",
        Verdict::FailFrontBlocked => "fail_front_blocked",
        Verdict::InvalidSharedResource => "invalid_shared_resource",
        Verdict::SkippedRelated => "skipped_related",
    }
}

/// Folds per-CDN run records into reports, one per CDN, sorted by name.
/// Multiple runs for the same CDN merge: outcome counters add up,
/// request spend adds up, truncation is sticky.
pub fn aggregate(runs: &[CdnRunResult], enrichment: Option<&EnrichmentOverlay>) -> Vec<CdnReport> {
    #[derive(Default)]
    struct Acc {
        outcomes: Vec<TupleOutcome>,
        requests_spent: usize,
        truncated: bool,
    }
    let mut by_cdn: BTreeMap<&str, Acc> = BTreeMap::new();
    for run in runs {
        let acc = by_cdn.entry(run.cdn.as_str()).or_default();
        acc.outcomes.extend(run.outcomes.iter().cloned());
        acc.requests_spent += run.requests_spent;
        acc.truncated |= run.truncated;
    }

    let mut reports = Vec::new();
    for (cdn, acc) in by_cdn {
        let mut report = CdnReport {
            cdn: cdn.to_string(),
            domains_tested: 0,
            domains_with_success: 0,
            tuples_total: acc.outcomes.len(),
            tuples_success: 0,
            tuples_failed_baseline: 0,
            tuples_failed_front: 0,
            tuples_invalid: 0,
            tuples_skipped: 0,
            invalid_reasons: BTreeMap::new(),
            prone: false,
            partial_enforcement_hint: false,
            served_by_clusters: BTreeMap::new(),
            requests_spent: acc.requests_spent,
            truncated: acc.truncated,
            popularity_bands: None,
            malicious_targets: None,
        };

        let mut tested_domains: BTreeSet<&str> = BTreeSet::new();
        let mut successful_domains: BTreeSet<&str> = BTreeSet::new();
        for o in &acc.outcomes {
            if o.verdict != Verdict::SkippedRelated {
                tested_domains.insert(o.tuple.target.as_str());
            }
            if let Some(identity) = o.fronted.as_ref().and_then(|p| p.served_by.clone()) {
                report
                    .served_by_clusters
                    .entry(verdict_label(o.verdict).to_string())
                    .or_default()
                    .insert(identity);
            }
            if is_cross_cdn(o) {
                report.tuples_invalid += 1;
                *report
                    .invalid_reasons
                    .entry(REASON_CROSS_CDN.to_string())
                    .or_default() += 1;
                continue;
            }
            match o.verdict {
                Verdict::Success => {
                    report.tuples_success += 1;
                    successful_domains.insert(o.tuple.target.as_str());
                }
                Verdict::FailBaseline => report.tuples_failed_baseline += 1,
                Verdict::FailFrontBlocked => report.tuples_failed_front += 1,
                Verdict::InvalidSharedResource => {
                    report.tuples_invalid += 1;
                    *report
                        .invalid_reasons
                        .entry("shared-resource".to_string())
                        .or_default() += 1;
                }
                Verdict::SkippedRelated => report.tuples_skipped += 1,
            }
        }
        report.domains_tested = tested_domains.len();
        report.domains_with_success = successful_domains.len();
        report.prone = report.domains_with_success >= 1;

        let empty = BTreeSet::new();
        let success_ids = report.served_by_clusters.get("success").unwrap_or(&empty);
        let blocked_ids = report
            .served_by_clusters
            .get("fail_front_blocked")
            .unwrap_or(&empty);
        report.partial_enforcement_hint = report.tuples_success > 0
            && report.tuples_failed_front > 0
            && !success_ids.is_empty()
            && !blocked_ids.is_empty()
            && success_ids.is_disjoint(blocked_ids);

        if let Some(overlay) = enrichment {
            report.popularity_bands = overlay
                .histogram
                .as_ref()
                .and_then(|h| h.per_cdn.get(cdn).cloned());
            report.malicious_targets = Some(
                tested_domains
                    .iter()
                    .filter(|d| overlay.malicious.contains(**d))
                    .count(),
            );
        }
        reports.push(report);
    }
    reports
}

// ---------------------------------------------------------------------
// Emission

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Table,
    PlotData,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("unknown report format `{0}` (expected json, table, or plotdata)")]
    UnknownFormat(String),
    #[error("nothing to report")]
    NoReports,
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl std::str::FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "table" => Ok(ReportFormat::Table),
            "plotdata" => Ok(ReportFormat::PlotData),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }
}

pub fn emit(reports: &[CdnReport], format: ReportFormat) -> Result<Vec<u8>, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::NoReports);
    }
    match format {
        ReportFormat::Json => {
            let mut out = Vec::new();
            for r in reports {
                serde_json::to_writer(&mut out, r)?;
                out.push(b'\n');
            }
            Ok(out)
        }
        ReportFormat::Table => Ok(render_table(reports).into_bytes()),
        ReportFormat::PlotData => {
            let mut out = String::from("cdn,domains_tested,domains_with_success,success_rate\n");
            for r in reports {
                writeln!(
                    out,
                    "{},{},{},{:.4}",
                    r.cdn,
                    r.domains_tested,
                    r.domains_with_success,
                    r.domain_success_rate()
                )
                .expect("writing to a String cannot fail");
            }
            Ok(out.into_bytes())
        }
    }
}

fn render_table(reports: &[CdnReport]) -> String {
    let name_width = reports
        .iter()
        .map(|r| r.cdn.len())
        .chain(std::iter::once("CDN".len()))
        .max()
        .unwrap_or(3);
    let mut out = String::new();
    writeln!(
        out,
        "{:<name_width$}  {:>7}  {:>7}  {:>6}  {:>7}  {:>8}  {:>7}  {:>7}  {:>8}  {:>8}  {:>5}  {:>4}  {:>6}",
        "CDN", "DOMAINS", "OK-DOMS", "TUPLES", "SUCCESS", "BLOCKED", "INVALID", "SKIPPED",
        "DOM-RATE", "TUP-RATE", "PRONE", "HINT", "SPENT",
    )
    .unwrap();
    for r in reports {
        writeln!(
            out,
            "{:<name_width$}  {:>7}  {:>7}  {:>6}  {:>7}  {:>8}  {:>7}  {:>7}  {:>8.4}  {:>8.4}  {:>5}  {:>4}  {:>6}{}",
            r.cdn,
            r.domains_tested,
            r.domains_with_success,
            r.tuples_total,
            r.tuples_success,
            r.tuples_failed_front,
            r.tuples_invalid,
            r.tuples_skipped,
            r.domain_success_rate(),
            r.tuple_success_rate(),
            if r.prone { "yes" } else { "no" },
            if r.partial_enforcement_hint { "yes" } else { "no" },
            r.requests_spent,
            if r.truncated { "  (truncated)" } else { "" },
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tester::{ProbeResult, TestTuple};
    use proptest::prelude::*;

    fn outcome(target: &str, verdict: Verdict, fronted_server: Option<&str>) -> TupleOutcome {
        let fronted = match verdict {
            Verdict::SkippedRelated | Verdict::FailBaseline => None,
            _ => Some(ProbeResult::completed(
                if verdict == Verdict::FailFrontBlocked { 421 } else { 200 },
                b"body",
                fronted_server.map(String::from),
            )),
        };
        TupleOutcome {
            tuple: TestTuple {
                cdn: "acme".into(),
                target: target.into(),
                front: "front.example".into(),
                path: "/x".into(),
            },
            verdict,
            skip_reason: None,
            baseline: None,
            fronted,
            control: None,
        }
    }

    fn run(outcomes: Vec<TupleOutcome>, spent: usize) -> CdnRunResult {
        CdnRunResult {
            cdn: "acme".into(),
            outcomes,
            truncated: false,
            requests_spent: spent,
        }
    }

    #[test]
    fn prone_needs_one_successful_domain() {
        use Verdict::*;
        let r = aggregate(
            &[run(
                vec![
                    outcome("a.test", Success, Some("edge-0")),
                    outcome("a.test", FailFrontBlocked, Some("edge-1")),
                    outcome("b.test", FailFrontBlocked, Some("edge-1")),
                ],
                9,
            )],
            None,
        );
        assert_eq!(r.len(), 1);
        let r = &r[0];
        assert!(r.prone);
        assert_eq!(r.domains_tested, 2);
        assert_eq!(r.domains_with_success, 1);
        assert_eq!(r.requests_spent, 9);

        let blocked_only = aggregate(
            &[run(vec![outcome("a.test", FailFrontBlocked, None)], 3)],
            None,
        );
        assert!(!blocked_only[0].prone);
    }

    #[test]
    fn all_domains_succeeding_matches_tested_count() {
        use Verdict::*;
        let r = aggregate(
            &[run(
                vec![
                    outcome("a.test", Success, Some("edge-0")),
                    outcome("b.test", Success, Some("edge-0")),
                    outcome("c.test", Success, Some("edge-0")),
                ],
                9,
            )],
            None,
        )
        .remove(0);
        assert_eq!(r.domains_with_success, r.domains_tested);
        assert_eq!(r.domain_success_rate(), 1.0);
    }

    #[test]
    fn hint_requires_disjoint_nonempty_identity_sets() {
        use Verdict::*;
        let disjoint = aggregate(
            &[run(
                vec![
                    outcome("a.test", Success, Some("edge-0")),
                    outcome("b.test", FailFrontBlocked, Some("edge-2")),
                ],
                6,
            )],
            None,
        )
        .remove(0);
        assert!(disjoint.partial_enforcement_hint);
        assert_eq!(disjoint.served_by_clusters["success"].len(), 1);
        assert_eq!(disjoint.served_by_clusters["fail_front_blocked"].len(), 1);

        let overlapping = aggregate(
            &[run(
                vec![
                    outcome("a.test", Success, Some("edge-0")),
                    outcome("b.test", FailFrontBlocked, Some("edge-0")),
                ],
                6,
            )],
            None,
        )
        .remove(0);
        assert!(!overlapping.partial_enforcement_hint);

        let blind_failures = aggregate(
            &[run(
                vec![
                    outcome("a.test", Success, Some("edge-0")),
                    outcome("b.test", FailFrontBlocked, None),
                ],
                6,
            )],
            None,
        )
        .remove(0);
        assert!(
            !blind_failures.partial_enforcement_hint,
            "closed connections leave no identities, so no evidence of a split"
        );
    }

    #[test]
    fn cross_cdn_marks_move_outcomes_to_invalid() {
        use Verdict::*;
        let mut crossed = outcome("a.test", Success, Some("edge-9"));
        mark_cross_cdn(&mut crossed, "traced to otherCDN");
        let r = aggregate(
            &[run(vec![crossed, outcome("b.test", Success, Some("edge-0"))], 6)],
            None,
        )
        .remove(0);
        assert_eq!(r.tuples_success, 1);
        assert_eq!(r.tuples_invalid, 1);
        assert_eq!(r.invalid_reasons[REASON_CROSS_CDN], 1);
        assert_eq!(r.domains_with_success, 1, "the crossed domain is not a success");
        assert_eq!(r.domains_tested, 2, "it was still probed");
    }

    #[test]
    fn runs_for_the_same_cdn_merge() {
        use Verdict::*;
        let mut second = run(vec![outcome("b.test", Success, Some("edge-1"))], 3);
        second.truncated = true;
        let r = aggregate(
            &[
                run(vec![outcome("a.test", Success, Some("edge-0"))], 3),
                second,
            ],
            None,
        )
        .remove(0);
        assert_eq!(r.tuples_total, 2);
        assert_eq!(r.requests_spent, 6);
        assert!(r.truncated);
    }

    fn arbitrary_verdict() -> impl Strategy<Value = Verdict> {
        prop_oneof![
            Just(Verdict::Success),
            Just(Verdict::FailBaseline),
            Just(Verdict::FailFrontBlocked),
            Just(Verdict::InvalidSharedResource),
            Just(Verdict::SkippedRelated),
        ]
    }

    proptest! {
        #[test]
        fn counts_partition_the_total_and_order_is_irrelevant(
            entries in proptest::collection::vec(
                (0u8..6, arbitrary_verdict(), proptest::option::of(0u8..3)),
                0..60,
            )
        ) {
            let outcomes: Vec<TupleOutcome> = entries
                .iter()
                .map(|(d, v, s)| {
                    outcome(
                        &format!("domain{d}.test"),
                        *v,
                        s.map(|i| format!("edge-{i}")).as_deref(),
                    )
                })
                .collect();
            let spent = outcomes.len() * 3;
            let forward = aggregate(&[run(outcomes.clone(), spent)], None);
            let mut reversed_outcomes = outcomes.clone();
            reversed_outcomes.reverse();
            let reversed = aggregate(&[run(reversed_outcomes, spent)], None);
            prop_assert_eq!(&forward, &reversed);

            if let Some(r) = forward.first() {
                prop_assert_eq!(
                    r.tuples_total,
                    r.tuples_success
                        + r.tuples_failed_baseline
                        + r.tuples_failed_front
                        + r.tuples_invalid
                        + r.tuples_skipped
                );
                prop_assert!(r.domains_with_success <= r.domains_tested);
                prop_assert_eq!(r.prone, r.domains_with_success >= 1);
            }

            // prone is monotone under added successes
            let mut extended = outcomes;
            extended.push(outcome("extra.test", Verdict::Success, Some("edge-0")));
            let bigger = aggregate(&[run(extended, spent + 3)], None);
            if let Some(r) = forward.first() {
                prop_assert!(bigger[0].prone >= r.prone);
            }
        }
    }

    #[test]
    fn json_emission_round_trips() {
        let reports = aggregate(
            &[run(vec![outcome("a.test", Verdict::Success, Some("edge-0"))], 3)],
            None,
        );
        let bytes = emit(&reports, ReportFormat::Json).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), 1);
        let parsed: CdnReport = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(parsed, reports[0]);
    }

    #[test]
    fn plotdata_has_the_fixed_schema_and_four_decimals() {
        use Verdict::*;
        let reports = aggregate(
            &[run(
                vec![
                    outcome("a.test", Success, Some("edge-0")),
                    outcome("b.test", FailFrontBlocked, Some("edge-1")),
                    outcome("c.test", FailFrontBlocked, Some("edge-1")),
                ],
                9,
            )],
            None,
        );
        let text = String::from_utf8(emit(&reports, ReportFormat::PlotData).unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("cdn,domains_tested,domains_with_success,success_rate")
        );
        assert_eq!(lines.next(), Some("acme,3,1,0.3333"));
    }

    #[test]
    fn table_renders_and_format_parsing_rejects_unknowns() {
        let reports = aggregate(
            &[run(vec![outcome("a.test", Verdict::Success, Some("edge-0"))], 3)],
            None,
        );
        let table = String::from_utf8(emit(&reports, ReportFormat::Table).unwrap()).unwrap();
        assert!(table.contains("acme"));
        assert!(table.starts_with("CDN"));

        assert!(matches!("json".parse(), Ok(ReportFormat::Json)));
        assert!(matches!("plotdata".parse(), Ok(ReportFormat::PlotData)));
        assert!(matches!(
            "yaml".parse::<ReportFormat>(),
            Err(ReportError::UnknownFormat(_))
        ));
        assert!(matches!(
            emit(&[], ReportFormat::Json),
            Err(ReportError::NoReports)
        ));
    }

    #[test]
    fn enrichment_overlay_annotates_reports() {
        use crate::enrich::{band_histogram, RankBasis, RankingTable, DEFAULT_BANDS};
        use crate::psl::SuffixRules;
        let table = RankingTable::from_pairs([("a.test".to_string(), 100)], "test");
        let histogram = band_histogram(
            &[("a.test".to_string(), "acme".to_string())],
            &table,
            &SuffixRules::bundled(),
            &DEFAULT_BANDS,
            RankBasis::Sld,
        )
        .unwrap();
        let overlay = EnrichmentOverlay {
            histogram: Some(histogram),
            malicious: ["a.test".to_string()].into_iter().collect(),
        };
        let r = aggregate(
            &[run(
                vec![
                    outcome("a.test", Verdict::Success, Some("edge-0")),
                    outcome("b.test", Verdict::Success, Some("edge-0")),
                ],
                6,
            )],
            Some(&overlay),
        )
        .remove(0);
        assert_eq!(r.popularity_bands, Some(vec![1, 0, 0, 0, 0, 0]));
        assert_eq!(r.malicious_targets, Some(1));
    }
}
