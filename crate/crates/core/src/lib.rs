//! Core library for measuring whether CDNs serve fronted HTTPS requests:
//! catalog handling, DNS log ingestion, URL discovery, the probe
//! protocol itself, enrichment, and report assembly.

pub mod catalog;
pub mod crawl;
pub mod dnslog;
pub mod enrich;
pub mod http;
pub mod mapping;
pub mod psl;
pub mod report;
pub mod resolver;
pub mod seeding;
pub mod tester;
