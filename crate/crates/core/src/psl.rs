//! Effective second-level domain (registrable domain) computation via
//! public-suffix rule matching.
//!
//! Implements the standard publicsuffix.org algorithm: exception rules beat
//! wildcards, otherwise the rule with the most labels prevails, and the
//! implicit `*` rule applies when nothing matches. A snapshot of common
//! rules is bundled; operators can load a full list instead.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::catalog::{is_valid_dns_name, normalize_dns_name};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Rule {
    Plain(Vec<String>),
    Wildcard(Vec<String>),
    Exception(Vec<String>),
}

impl Rule {
    fn labels(&self) -> &[String] {
        match self {
            Rule::Plain(l) | Rule::Wildcard(l) | Rule::Exception(l) => l,
        }
    }
}

/// A loaded public-suffix rule set.
#[derive(Debug, Clone)]
pub struct SuffixRules {
    rules: Vec<Rule>,
    provenance: String,
}

#[derive(Debug, Error)]
pub enum PslError {
    #[error("cannot read suffix rules {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("`{0}` is not a valid DNS name")]
    InvalidName(String),
    #[error("`{0}` is itself a public suffix; it has no registrable domain")]
    IsPublicSuffix(String),
}

impl SuffixRules {
    /// Parses rules in the public-suffix list text format: one rule per
    /// line, `//` comments, `*.` wildcards, `!` exceptions.
    pub fn parse(text: &str, provenance: &str) -> SuffixRules {
        let mut rules = Vec::new();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with("//") {
                continue;
            }
            let (kind, body): (fn(Vec<String>) -> Rule, &str) = if let Some(rest) =
                line.strip_prefix('!')
            {
                (Rule::Exception, rest)
            } else if let Some(rest) = line.strip_prefix("*.") {
                (Rule::Wildcard, rest)
            } else {
                (Rule::Plain, line)
            };
            let labels: Vec<String> = normalize_dns_name(body)
                .split('.')
                .map(str::to_string)
                .collect();
            if labels.iter().any(|l| l.is_empty()) {
                continue;
            }
            rules.push(kind(labels));
        }
        SuffixRules {
            rules,
            provenance: provenance.to_string(),
        }
    }

    pub fn load(path: &Path) -> Result<SuffixRules, PslError> {
        let text = fs::read_to_string(path).map_err(|source| PslError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(SuffixRules::parse(&text, &path.display().to_string()))
    }

    /// The bundled snapshot: common multi-label public suffixes plus the
    /// implicit `*` default for everything else.
    pub fn bundled() -> SuffixRules {
        SuffixRules::parse(include_str!("data/public_suffix_snapshot.dat"), "bundled")
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Number of labels of the public suffix of `labels` (rightmost-first
    /// matching). Falls back to the implicit `*` rule (1 label).
    fn public_suffix_len(&self, labels: &[String]) -> usize {
        let mut exception: Option<usize> = None;
        let mut best: usize = 0;
        for rule in &self.rules {
            let rl = rule.labels();
            if rl.len() > labels.len() {
                continue;
            }
            // wildcard rules match one extra label to the left
            let effective_len = match rule {
                Rule::Wildcard(_) => rl.len() + 1,
                _ => rl.len(),
            };
            if effective_len > labels.len() && !matches!(rule, Rule::Exception(_)) {
                continue;
            }
            let tail = &labels[labels.len() - rl.len()..];
            if tail != rl {
                continue;
            }
            match rule {
                Rule::Exception(_) => {
                    // exception wins; its suffix is the rule minus the leftmost label
                    exception = Some(exception.map_or(rl.len() - 1, |e| e.max(rl.len() - 1)));
                }
                Rule::Wildcard(_) => best = best.max(effective_len),
                Rule::Plain(_) => best = best.max(effective_len),
            }
        }
        if let Some(e) = exception {
            return e;
        }
        best.max(1)
    }

    /// Public suffix of `fqdn` under these rules.
    pub fn public_suffix(&self, fqdn: &str) -> Result<String, PslError> {
        let name = normalize_dns_name(fqdn);
        if !is_valid_dns_name(&name) || name.contains('*') {
            return Err(PslError::InvalidName(fqdn.to_string()));
        }
        let labels: Vec<String> = name.split('.').map(str::to_string).collect();
        let len = self.public_suffix_len(&labels);
        Ok(labels[labels.len() - len.min(labels.len())..].join("."))
    }
}

/// Registrable domain of `fqdn`: public suffix plus one label. Errors when
/// the name is itself a public suffix.
pub fn effective_sld(fqdn: &str, rules: &SuffixRules) -> Result<String, PslError> {
    let name = normalize_dns_name(fqdn);
    if !is_valid_dns_name(&name) || name.contains('*') {
        return Err(PslError::InvalidName(fqdn.to_string()));
    }
    let labels: Vec<String> = name.split('.').map(str::to_string).collect();
    let suffix_len = rules.public_suffix_len(&labels);
    if labels.len() <= suffix_len {
        return Err(PslError::IsPublicSuffix(name));
    }
    Ok(labels[labels.len() - suffix_len - 1..].join("."))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example_assets_example_com() {
        let rules = SuffixRules::bundled();
        assert_eq!(
            effective_sld("assets.example.com", &rules).unwrap(),
            "example.com"
        );
    }

    #[test]
    fn sld_is_a_fixed_point() {
        let rules = SuffixRules::bundled();
        assert_eq!(effective_sld("example.com", &rules).unwrap(), "example.com");
    }

    #[test]
    fn three_rule_fixture_co_uk() {
        let rules = SuffixRules::parse("com\nco.uk\nuk\n", "fixture");
        assert_eq!(
            effective_sld("foo.bar.co.uk", &rules).unwrap(),
            "bar.co.uk"
        );
        assert_eq!(effective_sld("bar.co.uk", &rules).unwrap(), "bar.co.uk");
    }

    #[test]
    fn public_suffix_itself_has_no_registrable_domain() {
        let rules = SuffixRules::bundled();
        assert!(matches!(
            effective_sld("co.uk", &rules),
            Err(PslError::IsPublicSuffix(_))
        ));
        assert!(matches!(
            effective_sld("com", &rules),
            Err(PslError::IsPublicSuffix(_))
        ));
    }

    #[test]
    fn wildcard_and_exception_rules() {
        let rules = SuffixRules::parse("*.ck\n!www.ck\n", "fixture");
        // *.ck makes foo.ck a public suffix, so bar.foo.ck is registrable
        assert_eq!(effective_sld("a.bar.foo.ck", &rules).unwrap(), "bar.foo.ck");
        // the exception makes www.ck registrable under ck
        assert_eq!(effective_sld("www.ck", &rules).unwrap(), "www.ck");
        assert_eq!(effective_sld("a.www.ck", &rules).unwrap(), "www.ck");
    }

    #[test]
    fn unknown_tld_uses_default_rule() {
        let rules = SuffixRules::bundled();
        assert_eq!(
            effective_sld("assets.site-a.test", &rules).unwrap(),
            "site-a.test"
        );
    }

    #[test]
    fn invalid_name_is_rejected() {
        let rules = SuffixRules::bundled();
        assert!(matches!(
            effective_sld("bad..name", &rules),
            Err(PslError::InvalidName(_))
        ));
    }

    proptest! {
        #[test]
        fn effective_sld_is_idempotent(
            labels in proptest::collection::vec("[a-z][a-z0-9-]{0,8}[a-z0-9]", 2..6)
        ) {
            let rules = SuffixRules::bundled();
            let fqdn = labels.join(".");
            if let Ok(sld) = effective_sld(&fqdn, &rules) {
                prop_assert_eq!(effective_sld(&sld, &rules).unwrap(), sld);
            }
        }
    }
}
