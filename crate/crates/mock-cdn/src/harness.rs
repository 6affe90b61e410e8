//! File-driven fleet construction. A TOML harness file declares the
//! origins, their routes (inline or file-referenced bodies), the edge
//! certificates, and the fleet-wide policy, so a demo or an ad-hoc
//! experiment can stand up a fleet without writing Rust:
//!
//! ```toml
//! policy = "allow"              # or "enforce-close", "enforce-421",
//!                               # or { split = 0.5 }
//!
//! [[edge]]
//! sans = ["www.example.test", "cdn.example.test"]
//!
//! [[origin]]
//! host = "cdn.example.test"
//!
//! [[origin.route]]
//! path = "/app.js"
//! content_type = "application/javascript"
//! body = "console.log(1)"       # or body_file = "app.js"
//! ```

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::edge::MockOrigin;
use crate::fleet::{EdgeSpec, FleetPolicy, FleetSpec};
use crate::MockCdnError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    #[serde(default = "default_ca_name")]
    pub ca_name: String,
    #[serde(default = "default_name_prefix")]
    pub name_prefix: String,
    pub policy: PolicyEntry,
    #[serde(rename = "edge", default)]
    pub edges: Vec<EdgeEntry>,
    #[serde(rename = "origin", default)]
    pub origins: Vec<OriginEntry>,
}

fn default_ca_name() -> String {
    "harness ca".to_string()
}

fn default_name_prefix() -> String {
    "edge".to_string()
}

/// `policy = "allow"` or `policy = { split = 0.5 }`.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum PolicyEntry {
    Named(String),
    Split { split: f64 },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub sans: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OriginEntry {
    pub host: String,
    #[serde(rename = "route", default)]
    pub routes: Vec<RouteEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteEntry {
    pub path: String,
    #[serde(default = "default_status")]
    pub status: u16,
    #[serde(default = "default_content_type")]
    pub content_type: String,
    pub body: Option<String>,
    /// Path to a body file, resolved against the harness file's directory.
    pub body_file: Option<String>,
    /// Turns the route into a redirect; `status` should then be a 3xx.
    pub location: Option<String>,
}

fn default_status() -> u16 {
    200
}

fn default_content_type() -> String {
    "application/octet-stream".to_string()
}

impl HarnessConfig {
    /// Resolves the declaration into a spawnable [`FleetSpec`].
    /// `base_dir` anchors relative `body_file` references.
    pub fn into_fleet_spec(self, base_dir: &Path) -> Result<FleetSpec, MockCdnError> {
        let policy = match self.policy {
            PolicyEntry::Named(name) => match name.as_str() {
                "allow" => FleetPolicy::Allow,
                "enforce-close" => FleetPolicy::EnforceClose,
                "enforce-421" => FleetPolicy::Enforce421,
                other => {
                    return Err(MockCdnError::Harness(format!(
                        "unknown policy `{other}` (expected allow, enforce-close, \
                         enforce-421, or {{ split = fraction }})"
                    )))
                }
            },
            PolicyEntry::Split { split } => FleetPolicy::Split {
                enforcing_fraction: split,
            },
        };

        let mut origins = Vec::with_capacity(self.origins.len());
        for entry in self.origins {
            let mut origin = MockOrigin::new(&entry.host);
            for route in entry.routes {
                if let Some(location) = &route.location {
                    if route.body.is_some() || route.body_file.is_some() {
                        return Err(MockCdnError::Harness(format!(
                            "route {} on {} is a redirect and cannot also carry a body",
                            route.path, entry.host
                        )));
                    }
                    origin = origin.redirect(&route.path, route.status, location);
                    continue;
                }
                let body = match (&route.body, &route.body_file) {
                    (Some(inline), None) => inline.clone().into_bytes(),
                    (None, Some(file)) => fs::read(base_dir.join(file))?,
                    (None, None) => Vec::new(),
                    (Some(_), Some(_)) => {
                        return Err(MockCdnError::Harness(format!(
                            "route {} on {} declares both body and body_file",
                            route.path, entry.host
                        )))
                    }
                };
                origin = origin.route(&route.path, route.status, &route.content_type, &body);
            }
            origins.push(origin);
        }

        Ok(FleetSpec {
            ca_name: self.ca_name,
            name_prefix: self.name_prefix,
            policy,
            edges: self
                .edges
                .into_iter()
                .map(|e| EdgeSpec { sans: e.sans })
                .collect(),
            origins,
        })
    }
}

/// Parses harness TOML; `base_dir` anchors relative `body_file` paths.
pub fn parse_harness(text: &str, base_dir: &Path) -> Result<FleetSpec, MockCdnError> {
    let config: HarnessConfig =
        toml::from_str(text).map_err(|e| MockCdnError::Harness(e.to_string()))?;
    config.into_fleet_spec(base_dir)
}

/// Loads and resolves a harness file.
pub fn load_harness(path: &Path) -> Result<FleetSpec, MockCdnError> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_harness(&text, base)
}
