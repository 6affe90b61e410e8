//! Name resolution with local overrides.
//!
//! Overrides are consulted before the system resolver and are how tests
//! and demos steer probe traffic at loopback edges: `--resolver-override
//! site-a.test=127.0.0.1:8443` makes every connection for that host land
//! on the given address, port included.

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr, ToSocketAddrs};

use thiserror::Error;

use crate::catalog::{is_valid_dns_name, normalize_dns_name};

#[derive(Debug, Error)]
pub enum ResolveError {
    #[error("cannot resolve `{host}`: {source}")]
    Lookup {
        host: String,
        #[source]
        source: std::io::Error,
    },
    #[error("`{host}` did not resolve to any address")]
    NoAddress { host: String },
    #[error("bad resolver override `{input}`: {reason}")]
    BadOverride { input: String, reason: String },
}

pub trait Resolver: Send + Sync {
    fn resolve(&self, host: &str, port: u16) -> Result<Vec<SocketAddr>, ResolveError>;
}

/// Plain `getaddrinfo`-backed resolution.
#[derive(Debug, Default)]
pub struct SystemResolver;

impl Resolver for SystemResolver {
    fn resolve(&self, host: &str, port: u16) -> Result<Vec<SocketAddr>, ResolveError> {
        let addrs: Vec<SocketAddr> = (host, port)
            .to_socket_addrs()
            .map_err(|source| ResolveError::Lookup {
                host: host.to_string(),
                source,
            })?
            .collect();
        if addrs.is_empty() {
            return Err(ResolveError::NoAddress {
                host: host.to_string(),
            });
        }
        Ok(addrs)
    }
}

/// One `host=addr` mapping. A port in the address overrides the port the
/// caller asked for; without one, the requested port is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverrideTarget {
    pub ip: IpAddr,
    pub port: Option<u16>,
}

/// Resolver that answers from a fixed host table first and defers
/// everything else to an inner resolver.
pub struct OverrideResolver {
    table: BTreeMap<String, OverrideTarget>,
    fallback: Box<dyn Resolver>,
}

impl OverrideResolver {
    pub fn new(fallback: Box<dyn Resolver>) -> Self {
        OverrideResolver {
            table: BTreeMap::new(),
            fallback,
        }
    }

    pub fn system() -> Self {
        Self::new(Box::new(SystemResolver))
    }

    pub fn insert(&mut self, host: &str, target: OverrideTarget) {
        self.table.insert(normalize_dns_name(host), target);
    }

    /// Parses `host=ip` or `host=ip:port` and adds it to the table.
    pub fn add_spec(&mut self, spec: &str) -> Result<(), ResolveError> {
        let (host, target) = parse_override(spec)?;
        self.insert(&host, target);
        Ok(())
    }

    pub fn with_specs<I, S>(specs: I) -> Result<Self, ResolveError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut r = Self::system();
        for spec in specs {
            r.add_spec(spec.as_ref())?;
        }
        Ok(r)
    }

    pub fn overridden_hosts(&self) -> impl Iterator<Item = &String> {
        self.table.keys()
    }
}

impl Resolver for OverrideResolver {
    fn resolve(&self, host: &str, port: u16) -> Result<Vec<SocketAddr>, ResolveError> {
        let key = normalize_dns_name(host);
        if let Some(t) = self.table.get(&key) {
            return Ok(vec![SocketAddr::new(t.ip, t.port.unwrap_or(port))]);
        }
        self.fallback.resolve(host, port)
    }
}

pub fn parse_override(spec: &str) -> Result<(String, OverrideTarget), ResolveError> {
    let bad = |reason: &str| ResolveError::BadOverride {
        input: spec.to_string(),
        reason: reason.to_string(),
    };
    let (host, addr) = spec.split_once('=').ok_or_else(|| bad("expected host=addr"))?;
    let host = normalize_dns_name(host);
    if !is_valid_dns_name(&host) {
        return Err(bad("left side is not a DNS name"));
    }
    let addr = addr.trim();
    // A bare IPv6 address contains colons, so only treat `:` as a port
    // separator for bracketed-v6 and v4 forms.
    if let Ok(sa) = addr.parse::<SocketAddr>() {
        return Ok((
            host,
            OverrideTarget {
                ip: sa.ip(),
                port: Some(sa.port()),
            },
        ));
    }
    if let Ok(ip) = addr.parse::<IpAddr>() {
        return Ok((host, OverrideTarget { ip, port: None }));
    }
    Err(bad("right side is neither ip nor ip:port"))
}

/// Resolver for tests: every host resolves to the same address.
pub struct FixedResolver(pub SocketAddr);

impl Resolver for FixedResolver {
    fn resolve(&self, _host: &str, _port: u16) -> Result<Vec<SocketAddr>, ResolveError> {
        Ok(vec![self.0])
    }
}
