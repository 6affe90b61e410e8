//! Seed list of CDNs and the CNAME second-level-domain suffixes they assign
//! to customers, plus suffix matching to attribute a CNAME target to a CDN.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// A named CDN and the effective second-level domains it uses for customer
/// CNAMEs (e.g. `akamai` -> {`edgekey.net`, `edgesuite.net`}).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdnProfile {
    pub name: String,
    pub sld_suffixes: BTreeSet<String>,
}

/// The full seed list, loaded from a catalog file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    profiles: Vec<CdnProfile>,
    source_path: String,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read catalog {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("catalog parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("suffix {suffix} appears under both {first} and {second}")]
    DuplicateSuffix {
        suffix: String,
        first: String,
        second: String,
    },
    #[error("duplicate CDN name {0}")]
    DuplicateName(String),
    #[error("catalog {0} defines no CDNs")]
    Empty(String),
}

/// Lowercases and strips the trailing dot. DNS names are case-insensitive,
/// so this happens once at load and once per queried name.
pub fn normalize_dns_name(name: &str) -> String {
    name.trim().trim_end_matches('.').to_ascii_lowercase()
}

/// Syntactic DNS name check: non-empty dot-separated labels of LDH
/// characters, each label 1..=63 bytes, total <= 253.
pub fn is_valid_dns_name(name: &str) -> bool {
    if name.is_empty() || name.len() > 253 {
        return false;
    }
    name.split('.').all(|label| {
        !label.is_empty()
            && label.len() <= 63
            && !label.starts_with('-')
            && !label.ends_with('-')
            && label
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '*')
    })
}

impl Catalog {
    /// Builds a catalog from already-parsed profiles, enforcing the
    /// uniqueness invariants.
    pub fn new(profiles: Vec<CdnProfile>, source: &str) -> Result<Self, CatalogError> {
        if profiles.is_empty() {
            return Err(CatalogError::Empty(source.to_string()));
        }
        let mut seen_names: BTreeSet<&str> = BTreeSet::new();
        let mut seen_suffixes: std::collections::BTreeMap<&str, &str> = Default::default();
        for profile in &profiles {
            if !seen_names.insert(&profile.name) {
                return Err(CatalogError::DuplicateName(profile.name.clone()));
            }
            for suffix in &profile.sld_suffixes {
                if let Some(first) = seen_suffixes.insert(suffix, &profile.name) {
                    return Err(CatalogError::DuplicateSuffix {
                        suffix: suffix.clone(),
                        first: first.to_string(),
                        second: profile.name.clone(),
                    });
                }
            }
        }
        Ok(Catalog {
            profiles,
            source_path: source.to_string(),
        })
    }

    pub fn profiles(&self) -> &[CdnProfile] {
        &self.profiles
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn cdn_names(&self) -> impl Iterator<Item = &str> {
        self.profiles.iter().map(|p| p.name.as_str())
    }

    /// Attributes a CNAME target to a CDN by suffix match on a label
    /// boundary. When suffixes of different lengths both match, the longest
    /// suffix wins. `None` means no catalog suffix matched.
    pub fn match_cname(&self, cname_target: &str) -> Option<&str> {
        let target = normalize_dns_name(cname_target);
        let mut best: Option<(&str, usize)> = None;
        for profile in &self.profiles {
            for suffix in &profile.sld_suffixes {
                let matches = target == *suffix
                    || (target.len() > suffix.len()
                        && target.ends_with(suffix.as_str())
                        && target.as_bytes()[target.len() - suffix.len() - 1] == b'.');
                if matches && best.map_or(true, |(_, len)| suffix.len() > len) {
                    best = Some((profile.name.as_str(), suffix.len()));
                }
            }
        }
        best.map(|(name, _)| name)
    }

    /// Renders the catalog back into its file format. Loading the output
    /// yields an equal catalog.
    pub fn to_catalog_string(&self) -> String {
        let mut out = String::new();
        for profile in &self.profiles {
            let suffixes: Vec<&str> = profile.sld_suffixes.iter().map(|s| s.as_str()).collect();
            let _ = writeln!(out, "{}: {}", profile.name, suffixes.join(", "));
        }
        out
    }
}

/// Loads a catalog file: one CDN per line, `name: suffix[, suffix]*`,
/// `#` comments and blank lines ignored. Suffixes are normalized to
/// lowercase with trailing dots stripped.
pub fn load_catalog(path: &Path) -> Result<Catalog, CatalogError> {
    let text = fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_catalog(&text, &path.display().to_string())
}

/// Parses catalog text; `source` is recorded as provenance.
pub fn parse_catalog(text: &str, source: &str) -> Result<Catalog, CatalogError> {
    let mut profiles: Vec<CdnProfile> = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (name, rest) = line.split_once(':').ok_or_else(|| CatalogError::Parse {
            line: line_no,
            reason: "expected `name: suffix[, suffix]*`".into(),
        })?;
        let name = name.trim();
        if name.is_empty() {
            return Err(CatalogError::Parse {
                line: line_no,
                reason: "empty CDN name".into(),
            });
        }
        let mut suffixes = BTreeSet::new();
        for part in rest.split(',') {
            let suffix = normalize_dns_name(part);
            if suffix.is_empty() {
                return Err(CatalogError::Parse {
                    line: line_no,
                    reason: "empty suffix".into(),
                });
            }
            if !is_valid_dns_name(&suffix) || !suffix.contains('.') {
                return Err(CatalogError::Parse {
                    line: line_no,
                    reason: format!("`{suffix}` is not a DNS name with at least two labels"),
                });
            }
            suffixes.insert(suffix);
        }
        if suffixes.is_empty() {
            return Err(CatalogError::Parse {
                line: line_no,
                reason: format!("CDN {name} lists no suffixes"),
            });
        }
        profiles.push(CdnProfile {
            name: name.to_string(),
            sld_suffixes: suffixes,
        });
    }
    Catalog::new(profiles, source)
}

/// Bundled fixture catalog of well-known CDN suffix sets. Illustrative seed
/// data for demos and tests, not verified ground truth.
pub fn bundled_catalog() -> Catalog {
    parse_catalog(include_str!("data/cdn_catalog.txt"), "bundled")
        .expect("bundled catalog is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog_from(text: &str) -> Catalog {
        parse_catalog(text, "test").unwrap()
    }

    #[test]
    fn loads_profile_with_two_suffixes() {
        let catalog = catalog_from("akamai: edgekey.net, edgesuite.net");
        assert_eq!(catalog.profiles().len(), 1);
        assert_eq!(catalog.profiles()[0].sld_suffixes.len(), 2);
    }

    #[test]
    fn duplicate_suffix_across_cdns_is_an_error_naming_both() {
        let err = parse_catalog("fastly: cdn.example\nother: cdn.example", "test").unwrap_err();
        match err {
            CatalogError::DuplicateSuffix {
                suffix,
                first,
                second,
            } => {
                assert_eq!(suffix, "cdn.example");
                assert_eq!(first, "fastly");
                assert_eq!(second, "other");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn suffixes_normalize_case_and_trailing_dot() {
        let catalog = catalog_from("akamai: EdgeKey.NET.");
        assert!(catalog.profiles()[0].sld_suffixes.contains("edgekey.net"));
    }

    #[test]
    fn empty_catalog_is_an_error() {
        assert!(matches!(
            parse_catalog("# nothing here\n", "test"),
            Err(CatalogError::Empty(_))
        ));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let catalog = catalog_from("# seed\n\nakamai: edgekey.net # main\n");
        assert_eq!(catalog.profiles().len(), 1);
    }

    #[test]
    fn single_label_suffix_is_rejected() {
        assert!(matches!(
            parse_catalog("weird: net", "test"),
            Err(CatalogError::Parse { .. })
        ));
    }

    #[test]
    fn match_cname_worked_example() {
        let catalog = catalog_from("akamai: edgekey.net");
        assert_eq!(
            catalog.match_cname("www.microsoft.com-c-3.edgekey.net"),
            Some("akamai")
        );
    }

    #[test]
    fn match_respects_label_boundary() {
        let catalog = catalog_from("akamai: edgekey.net");
        assert_eq!(catalog.match_cname("notedgekey.net"), None);
    }

    #[test]
    fn longest_suffix_wins() {
        let catalog = catalog_from("x: cdn.co\ny: b.cdn.co");
        assert_eq!(catalog.match_cname("a.b.cdn.co"), Some("y"));
        assert_eq!(catalog.match_cname("a.cdn.co"), Some("x"));
    }

    #[test]
    fn suffix_matches_itself() {
        let catalog = catalog_from("akamai: edgekey.net");
        assert_eq!(catalog.match_cname("edgekey.net"), Some("akamai"));
        assert_eq!(catalog.match_cname("EDGEKEY.NET."), Some("akamai"));
    }

    #[test]
    fn serialize_roundtrips_to_equal_profiles() {
        let catalog = catalog_from("akamai: edgekey.net, edgesuite.net\nfastly: fastly.net");
        let reloaded = parse_catalog(&catalog.to_catalog_string(), "test").unwrap();
        assert_eq!(catalog.profiles(), reloaded.profiles());
    }

    #[test]
    fn bundled_catalog_loads_with_at_least_ten_cdns() {
        assert!(bundled_catalog().profiles().len() >= 10);
    }
}
