//! Deriving customer-domain → CDN mappings from DNS observations.
//!
//! CNAME answers whose target falls under a catalog suffix tie the query
//! name to that CDN. Query names that themselves sit under a catalog
//! suffix are CDN-internal and excluded. Names seen on more than one CDN
//! within the window are dropped by the stability filter, since a probe
//! against a name that moves between providers does not attribute
//! cleanly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::dnslog::{DnsObservation, RecordType};

/// Inclusive day range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Window {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Window, MappingError> {
        if start > end {
            return Err(MappingError::InvalidWindow { start, end });
        }
        Ok(Window { start, end })
    }

    pub fn contains(&self, day: NaiveDate) -> bool {
        self.start <= day && day <= self.end
    }
}

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("window start {start} is after end {end}")]
    InvalidWindow { start: NaiveDate, end: NaiveDate },
}

/// fqdn → cdn name → days on which the mapping was observed.
///
/// Merging two maps unions the day sets, so accumulation is independent
/// of input order and of how the stream was partitioned.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DomainCdnMap {
    entries: BTreeMap<String, BTreeMap<String, BTreeSet<NaiveDate>>>,
}

impl DomainCdnMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, fqdn: &str, cdn: &str, day: NaiveDate) {
        self.entries
            .entry(fqdn.to_string())
            .or_default()
            .entry(cdn.to_string())
            .or_default()
            .insert(day);
    }

    pub fn merge(mut self, other: DomainCdnMap) -> DomainCdnMap {
        for (fqdn, cdns) in other.entries {
            let slot = self.entries.entry(fqdn).or_default();
            for (cdn, days) in cdns {
                slot.entry(cdn).or_default().extend(days);
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cdns_for(&self, fqdn: &str) -> Option<&BTreeMap<String, BTreeSet<NaiveDate>>> {
        self.entries.get(fqdn)
    }

    pub fn iter(
        &self,
    ) -> impl Iterator<Item = (&String, &BTreeMap<String, BTreeSet<NaiveDate>>)> {
        self.entries.iter()
    }
}

/// Counters for one ingest pass. All counts are over non-empty,
/// well-formed log lines; the reader reports malformed lines separately.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub observations_total: usize,
    pub cname_observations: usize,
    pub matched: usize,
    pub excluded_internal: usize,
    pub out_of_window: usize,
    pub distinct_fqdns: usize,
    /// Day span of the stream (all observations, not just matches).
    pub first_day: Option<NaiveDate>,
    pub last_day: Option<NaiveDate>,
}

impl IngestStats {
    fn absorb_day(&mut self, day: NaiveDate) {
        self.first_day = Some(match self.first_day {
            Some(d) if d <= day => d,
            _ => day,
        });
        self.last_day = Some(match self.last_day {
            Some(d) if d >= day => d,
            _ => day,
        });
    }

    fn merge(mut self, other: IngestStats) -> IngestStats {
        self.observations_total += other.observations_total;
        self.cname_observations += other.cname_observations;
        self.matched += other.matched;
        self.excluded_internal += other.excluded_internal;
        self.out_of_window += other.out_of_window;
        if let Some(d) = other.first_day {
            self.absorb_day(d);
        }
        if let Some(d) = other.last_day {
            self.absorb_day(d);
        }
        self
    }
}

#[derive(Debug, Default)]
struct Partial {
    map: DomainCdnMap,
    stats: IngestStats,
}

impl Partial {
    fn merge(self, other: Partial) -> Partial {
        Partial {
            map: self.map.merge(other.map),
            stats: self.stats.merge(other.stats),
        }
    }

    /// Classification order: window first, then record type, then suffix
    /// match on the CNAME target, then the internal-name exclusion on the
    /// query name.
    fn absorb(&mut self, obs: &DnsObservation, catalog: &Catalog, window: Option<&Window>) {
        self.stats.observations_total += 1;
        self.stats.absorb_day(obs.day);
        if let Some(w) = window {
            if !w.contains(obs.day) {
                self.stats.out_of_window += 1;
                return;
            }
        }
        if obs.record_type != RecordType::Cname {
            return;
        }
        self.stats.cname_observations += 1;
        let Some(cdn) = catalog.match_cname(&obs.record_data) else {
            return;
        };
        if catalog.match_cname(&obs.qname).is_some() {
            self.stats.excluded_internal += 1;
            return;
        }
        self.stats.matched += 1;
        self.map.record(&obs.qname, cdn, obs.day);
    }
}

fn finish(mut partial: Partial) -> (DomainCdnMap, IngestStats) {
    partial.stats.distinct_fqdns = partial.map.len();
    (partial.map, partial.stats)
}

/// Single-threaded ingest pass. Produces exactly the same map and stats
/// as the parallel path.
pub fn extract_mappings_sequential<I, E>(
    observations: I,
    catalog: &Catalog,
    window: Option<Window>,
) -> Result<(DomainCdnMap, IngestStats), E>
where
    I: Iterator<Item = Result<DnsObservation, E>>,
{
    let mut partial = Partial::default();
    for obs in observations {
        partial.absorb(&obs?, catalog, window.as_ref());
    }
    Ok(finish(partial))
}

/// Data-parallel ingest pass over a bridged iterator. The fold/reduce is
/// over an order-independent merge, so the result matches the sequential
/// path bit for bit.
#[cfg(feature = "parallel")]
pub fn extract_mappings_parallel<I, E>(
    observations: I,
    catalog: &Catalog,
    window: Option<Window>,
) -> Result<(DomainCdnMap, IngestStats), E>
where
    I: Iterator<Item = Result<DnsObservation, E>> + Send,
    E: Send,
{
    use rayon::iter::{ParallelBridge, ParallelIterator};

    let window = window.as_ref();
    let partial = observations
        .par_bridge()
        .try_fold(Partial::default, |mut acc, obs| {
            acc.absorb(&obs?, catalog, window);
            Ok(acc)
        })
        .try_reduce(Partial::default, |a, b| Ok(a.merge(b)))?;
    Ok(finish(partial))
}

/// Ingest entry point; uses the parallel path when the `parallel` feature
/// is enabled and the sequential one otherwise.
pub fn extract_mappings<I, E>(
    observations: I,
    catalog: &Catalog,
    window: Option<Window>,
) -> Result<(DomainCdnMap, IngestStats), E>
where
    I: Iterator<Item = Result<DnsObservation, E>> + Send,
    E: Send,
{
    #[cfg(feature = "parallel")]
    {
        extract_mappings_parallel(observations, catalog, window)
    }
    #[cfg(not(feature = "parallel"))]
    {
        extract_mappings_sequential(observations, catalog, window)
    }
}

/// A name that stayed on a single CDN for the whole window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StableMapping {
    pub fqdn: String,
    pub cdn: String,
    /// Number of distinct days the mapping was observed on.
    pub days: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StabilityStats {
    pub total_fqdns: usize,
    pub stable_fqdns: usize,
    pub multi_cdn_fqdns: usize,
    /// stable_fqdns / total_fqdns; 0.0 for an empty map.
    pub stable_ratio: f64,
}

/// Keeps names observed on exactly one CDN; drops names seen on several.
/// Output is sorted by fqdn.
pub fn filter_stable(map: &DomainCdnMap) -> (Vec<StableMapping>, StabilityStats) {
    let mut stable = Vec::new();
    let mut multi = 0usize;
    for (fqdn, cdns) in map.iter() {
        if cdns.len() == 1 {
            let (cdn, days) = cdns.iter().next().expect("len checked");
            stable.push(StableMapping {
                fqdn: fqdn.clone(),
                cdn: cdn.clone(),
                days: days.len(),
            });
        } else {
            multi += 1;
        }
    }
    let total = map.len();
    let stats = StabilityStats {
        total_fqdns: total,
        stable_fqdns: stable.len(),
        multi_cdn_fqdns: multi,
        stable_ratio: if total == 0 {
            0.0
        } else {
            stable.len() as f64 / total as f64
        },
    };
    (stable, stats)
}

/// Writes stable mappings as one JSON object per line.
pub fn write_stable_mappings<W: Write>(
    mut out: W,
    mappings: &[StableMapping],
) -> std::io::Result<()> {
    for m in mappings {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_stable_mappings<R: BufRead>(reader: R) -> std::io::Result<Vec<StableMapping>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: StableMapping = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.push(m);
    }
    Ok(out)
}
