//! Assembling a whole mock CDN: one CA, several edges sharing an origin
//! set and a request log, and helpers to point a client's resolver at
//! the right loopback ports.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use crate::cert::MockCa;
use crate::edge::{
    spawn_edge, EdgeConfig, EdgePolicy, MockOrigin, RejectStyle, RequestLog, RequestLogEntry,
    RunningEdge,
};
use crate::MockCdnError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FleetPolicy {
    /// Every edge serves any hosted origin regardless of SNI.
    Allow,
    /// Every edge drops SNI/Host mismatches without a response.
    EnforceClose,
    /// Every edge answers mismatches with 421.
    Enforce421,
    /// Only part of the fleet enforces: with n edges, the last
    /// `round(n × enforcing_fraction)` of them answer mismatches with
    /// 421 and the rest allow. Rounding is half-away-from-zero.
    Split { enforcing_fraction: f64 },
}

/// Per-edge policies implied by a fleet policy. Pure so the index rule
/// is testable on its own.
pub fn effective_policies(
    edge_count: usize,
    policy: FleetPolicy,
) -> Result<Vec<EdgePolicy>, MockCdnError> {
    let all = |p: EdgePolicy| Ok(vec![p; edge_count]);
    match policy {
        FleetPolicy::Allow => all(EdgePolicy::Allow),
        FleetPolicy::EnforceClose => {
            all(EdgePolicy::EnforceSniHostMatch(RejectStyle::CloseConnection))
        }
        FleetPolicy::Enforce421 => all(EdgePolicy::EnforceSniHostMatch(RejectStyle::Status421)),
        FleetPolicy::Split { enforcing_fraction } => {
            if !(0.0..=1.0).contains(&enforcing_fraction) {
                return Err(MockCdnError::BadFraction(enforcing_fraction));
            }
            let enforcing = (edge_count as f64 * enforcing_fraction).round() as usize;
            let mut policies = vec![EdgePolicy::Allow; edge_count];
            for p in policies.iter_mut().skip(edge_count - enforcing.min(edge_count)) {
                *p = EdgePolicy::EnforceSniHostMatch(RejectStyle::Status421);
            }
            Ok(policies)
        }
    }
}

#[derive(Debug, Clone)]
pub struct EdgeSpec {
    /// DNS names this edge's certificate covers. Wildcards in the form
    /// `*.example.test` are allowed and match one extra label.
    pub sans: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FleetSpec {
    pub ca_name: String,
    pub name_prefix: String,
    pub policy: FleetPolicy,
    pub edges: Vec<EdgeSpec>,
    pub origins: Vec<MockOrigin>,
}

impl FleetSpec {
    /// A fleet where every edge's certificate covers every origin host.
    pub fn uniform(
        edge_count: usize,
        policy: FleetPolicy,
        origins: Vec<MockOrigin>,
    ) -> FleetSpec {
        let sans: Vec<String> = origins.iter().map(|o| o.host.clone()).collect();
        FleetSpec {
            ca_name: "mock cdn ca".to_string(),
            name_prefix: "edge".to_string(),
            policy,
            edges: vec![EdgeSpec { sans }; edge_count],
            origins,
        }
    }
}

pub struct MockFleet {
    ca: MockCa,
    pub edges: Vec<RunningEdge>,
    log: RequestLog,
    origin_hosts: Vec<String>,
}

impl MockFleet {
    pub fn spawn(spec: FleetSpec) -> Result<MockFleet, MockCdnError> {
        if spec.edges.is_empty() {
            return Err(MockCdnError::EmptyFleet);
        }
        if spec.origins.is_empty() {
            return Err(MockCdnError::NoOrigins);
        }
        let policies = effective_policies(spec.edges.len(), spec.policy)?;
        let ca = MockCa::new(&spec.ca_name)?;
        let mut origins = BTreeMap::new();
        let mut origin_hosts = Vec::new();
        for origin in spec.origins {
            origin_hosts.push(origin.host.clone());
            if origins.insert(origin.host.clone(), origin).is_some() {
                let host = origin_hosts.pop().unwrap();
                return Err(MockCdnError::DuplicateOrigin(host));
            }
        }
        let origins = Arc::new(origins);
        let log: RequestLog = Arc::new(Mutex::new(Vec::new()));

        let mut edges = Vec::with_capacity(spec.edges.len());
        for (i, (edge_spec, policy)) in spec.edges.iter().zip(policies).enumerate() {
            let identity = ca.mint(&edge_spec.sans)?;
            let edge = spawn_edge(
                EdgeConfig {
                    name: format!("{}-{}", spec.name_prefix, i),
                    policy,
                    identity,
                    origins: origins.clone(),
                },
                log.clone(),
            )?;
            edges.push(edge);
        }
        Ok(MockFleet {
            ca,
            edges,
            log,
            origin_hosts,
        })
    }

    pub fn ca_pem(&self) -> String {
        self.ca.ca_pem()
    }

    pub fn write_ca_pem(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.ca_pem())
    }

    pub fn edge_addr(&self, index: usize) -> SocketAddr {
        self.edges[index].addr
    }

    /// host → index of the first edge whose certificate covers it.
    pub fn assignment(&self) -> Result<Vec<(String, usize)>, MockCdnError> {
        let mut out = Vec::new();
        for host in &self.origin_hosts {
            let edge = self
                .edges
                .iter()
                .position(|e| e.sans.iter().any(|san| san_matches(san, host)))
                .ok_or_else(|| MockCdnError::HostNotCovered(host.clone()))?;
            out.push((host.clone(), edge));
        }
        Ok(out)
    }

    /// `host=127.0.0.1:port` lines for a client's resolver overrides,
    /// derived from [`MockFleet::assignment`].
    pub fn resolver_specs(&self) -> Result<Vec<String>, MockCdnError> {
        Ok(self
            .assignment()?
            .into_iter()
            .map(|(host, edge)| format!("{host}={}", self.edge_addr(edge)))
            .collect())
    }

    pub fn resolver_specs_with(&self, assignment: &[(String, usize)]) -> Vec<String> {
        assignment
            .iter()
            .map(|(host, edge)| format!("{host}={}", self.edge_addr(*edge)))
            .collect()
    }

    pub fn log_snapshot(&self) -> Vec<RequestLogEntry> {
        self.log.lock().expect("request log poisoned").clone()
    }

    pub fn request_count(&self) -> usize {
        self.log.lock().expect("request log poisoned").len()
    }

    pub fn clear_log(&self) {
        self.log.lock().expect("request log poisoned").clear();
    }

    pub fn shutdown(mut self) {
        for edge in &mut self.edges {
            edge.stop();
        }
    }
}

/// Certificate name matching: exact, or a leftmost `*` covering exactly
/// one label.
pub fn san_matches(pattern: &str, host: &str) -> bool {
    let pattern = pattern.to_ascii_lowercase();
    let host = host.to_ascii_lowercase();
    if let Some(suffix) = pattern.strip_prefix("*.") {
        match host.strip_suffix(suffix) {
            Some(prefix) => {
                prefix.len() > 1 && prefix.ends_with('.') && !prefix[..prefix.len() - 1].contains('.')
            }
            None => false,
        }
    } else {
        pattern == host
    }
}
