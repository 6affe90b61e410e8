//! URL discovery over live sites.
//!
//! For each registrable domain that survived the liveness check, a
//! breadth-first static crawl starts at `https://{domain}/`: HTML pages
//! are parsed for anchor links (followed within the same registrable
//! domain) and for markup-declared subresources, every candidate is
//! fetched exactly once, and every 200 response becomes a
//! [`DiscoveredUrl`]. No JavaScript runs; what the markup declares is
//! what gets found. An operator who needs a real browser can plug one in
//! through the external-fetcher protocol, which consumes the same
//! line-JSON URL log this crawler emits.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::http::{FetchSpec, HttpClient, HttpError, HttpResponse};
use crate::mapping::StableMapping;
use crate::psl::{effective_sld, SuffixRules};
use crate::seeding::derive_seed;
use crate::tester::{hash_body, sample_sorted_indices};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResourceClass {
    Image,
    Script,
    Stylesheet,
    Font,
    OtherStatic,
    NonStatic,
}

impl ResourceClass {
    pub fn is_static(self) -> bool {
        self != ResourceClass::NonStatic
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteLiveness {
    pub sld: String,
    pub status: Option<u16>,
    pub live: bool,
    /// Failure class when no status came back: dns | connect | tls |
    /// redirect-loop | io | http.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveredUrl {
    pub url: String,
    pub host_fqdn: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content_type: Option<String>,
    pub body_hash: String,
    pub resource_class: ResourceClass,
}

#[derive(Debug, Clone)]
pub struct CrawlLimits {
    pub page_budget: usize,
    pub depth_limit: usize,
    pub max_redirects: usize,
    pub honor_robots: bool,
}

impl Default for CrawlLimits {
    fn default() -> Self {
        CrawlLimits {
            page_budget: 20,
            depth_limit: 2,
            max_redirects: 5,
            honor_robots: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrawlResult {
    pub urls: Vec<DiscoveredUrl>,
    pub pages_fetched: usize,
    pub truncated: bool,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CrawlError {
    #[error("external fetcher command is empty")]
    EmptyCommand,
    #[error("external fetcher failed to run: {0}")]
    Spawn(#[from] std::io::Error),
    #[error("external fetcher exited with {status}")]
    ExternalFetcher { status: String },
    #[error("bad URL-log line {line}: {reason}")]
    BadUrlLog { line: usize, reason: String },
}

fn path_and_query(url: &Url) -> String {
    match url.query() {
        Some(q) => format!("{}?{}", url.path(), q),
        None => url.path().to_string(),
    }
}

/// One GET with redirect following (https only, fragment-stripped).
/// Returns the terminal response and the URL it came from.
pub fn follow_fetch(
    client: &HttpClient,
    url: &Url,
    max_redirects: usize,
) -> Result<(HttpResponse, Url), HttpError> {
    let mut current = url.clone();
    for _ in 0..=max_redirects {
        let host = current
            .host_str()
            .ok_or_else(|| HttpError::Malformed(format!("no host in {current}")))?
            .to_string();
        let resp = client.fetch(&FetchSpec {
            resolve_host: host.clone(),
            port: current.port().unwrap_or(443),
            sni_host: host.clone(),
            host_header: host,
            path: path_and_query(&current),
        })?;
        if (300..400).contains(&resp.status) {
            if let Some(next) = resp
                .header("location")
                .and_then(|loc| current.join(loc).ok())
                .filter(|next| next.scheme() == "https")
            {
                let mut next = next;
                next.set_fragment(None);
                current = next;
                continue;
            }
            // A redirect that cannot be followed is terminal data.
            return Ok((resp, current));
        }
        return Ok((resp, current));
    }
    Err(HttpError::TooManyRedirects {
        limit: max_redirects,
    })
}

fn failure_class(e: &HttpError) -> &'static str {
    match e {
        HttpError::Resolve(_) => "dns",
        HttpError::Connect { .. } => "connect",
        HttpError::Tls { .. } => "tls",
        HttpError::TooManyRedirects { .. } => "redirect-loop",
        HttpError::Io { .. } => "io",
        _ => "http",
    }
}

/// `GET /` for the domain itself; live means a (post-redirect) 200.
pub fn check_root_liveness(client: &HttpClient, sld: &str) -> SiteLiveness {
    let url = match Url::parse(&format!("https://{sld}/")) {
        Ok(u) => u,
        Err(e) => {
            return SiteLiveness {
                sld: sld.to_string(),
                status: None,
                live: false,
                note: Some(format!("bad name: {e}")),
            }
        }
    };
    match follow_fetch(client, &url, 5) {
        Ok((resp, _)) => SiteLiveness {
            sld: sld.to_string(),
            status: Some(resp.status),
            live: resp.status == 200,
            note: None,
        },
        Err(e) => SiteLiveness {
            sld: sld.to_string(),
            status: None,
            live: false,
            note: Some(failure_class(&e).to_string()),
        },
    }
}

// ---------------------------------------------------------------------
// Classification

/// Media type decides when it is recognized; text/html (and friends) are
/// definitively non-static with no fallback; an unknown or missing type
/// falls back to the path extension; an unknown extension is non-static.
pub fn classify_resource(url: &str, content_type: Option<&str>) -> ResourceClass {
    use ResourceClass::*;
    if let Some(ct) = content_type {
        let ct = ct.split(';').next().unwrap_or("").trim().to_ascii_lowercase();
        if !ct.is_empty() {
            if ct.starts_with("image/") {
                return Image;
            }
            if ct == "text/css" {
                return Stylesheet;
            }
            if matches!(
                ct.as_str(),
                "application/javascript"
                    | "text/javascript"
                    | "application/x-javascript"
                    | "application/ecmascript"
            ) {
                return Script;
            }
            if ct.starts_with("font/")
                || matches!(
                    ct.as_str(),
                    "application/font-woff"
                        | "application/font-woff2"
                        | "application/x-font-ttf"
                        | "application/vnd.ms-fontobject"
                )
            {
                return Font;
            }
            if ct.starts_with("audio/")
                || ct.starts_with("video/")
                || matches!(
                    ct.as_str(),
                    "application/pdf" | "application/zip" | "application/wasm"
                )
            {
                return OtherStatic;
            }
            if matches!(
                ct.as_str(),
                "text/html"
                    | "application/xhtml+xml"
                    | "application/json"
                    | "text/plain"
                    | "application/xml"
                    | "text/xml"
            ) {
                return NonStatic;
            }
        }
    }
    let ext = Url::parse(url)
        .ok()
        .map(|u| u.path().to_string())
        .unwrap_or_else(|| url.split(['?', '#']).next().unwrap_or("").to_string());
    let ext = ext
        .rsplit('/')
        .next()
        .and_then(|seg| seg.rsplit_once('.'))
        .map(|(_, e)| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" | "jpg" | "jpeg" | "gif" | "webp" | "avif" | "ico" | "svg" | "bmp" => Image,
        "js" | "mjs" => Script,
        "css" => Stylesheet,
        "woff" | "woff2" | "ttf" | "otf" | "eot" => Font,
        "pdf" | "zip" | "wasm" | "mp3" | "mp4" | "webm" | "ogg" | "wav" => OtherStatic,
        _ => NonStatic,
    }
}

// ---------------------------------------------------------------------
// Candidate extraction

fn parse_srcset(value: &str) -> Vec<&str> {
    value
        .split(',')
        .filter_map(|part| part.trim().split_whitespace().next())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Pulls `url(...)` references out of CSS text.
fn extract_css_urls(css: &str) -> Vec<String> {
    let mut out = Vec::new();
    let lower = css.to_ascii_lowercase();
    let bytes = css.as_bytes();
    let mut i = 0;
    while let Some(pos) = lower[i..].find("url(") {
        let start = i + pos + 4;
        let Some(end_rel) = css[start..].find(')') else {
            break;
        };
        let raw = css[start..start + end_rel].trim();
        let unquoted = raw
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .or_else(|| raw.strip_prefix('\'').and_then(|s| s.strip_suffix('\'')))
            .unwrap_or(raw);
        if !unquoted.is_empty() && !unquoted.starts_with("data:") {
            out.push(unquoted.to_string());
        }
        i = start + end_rel + 1;
        if i >= bytes.len() {
            break;
        }
    }
    out
}

/// Candidate URLs from one HTML document, in document order: anchor
/// targets (pages to follow) and subresource references.
fn extract_candidates(html: &str, base: &Url) -> (Vec<Url>, Vec<Url>) {
    use scraper::{Html, Selector};
    let selector = Selector::parse(
        "a[href], img[src], img[srcset], script[src], link[href], source[src], \
         source[srcset], video[src], video[poster], audio[src], object[data], \
         embed[src], style, [style]",
    )
    .expect("static selector parses");
    let doc = Html::parse_document(html);

    let mut links = Vec::new();
    let mut resources = Vec::new();
    let push = |bucket: &mut Vec<Url>, raw: &str| {
        if let Ok(mut u) = base.join(raw) {
            u.set_fragment(None);
            if u.scheme() == "https" {
                bucket.push(u);
            }
        }
    };

    for el in doc.select(&selector) {
        let v = el.value();
        match v.name() {
            "a" => {
                if let Some(href) = v.attr("href") {
                    push(&mut links, href);
                }
            }
            "img" | "source" => {
                if let Some(src) = v.attr("src") {
                    push(&mut resources, src);
                }
                if let Some(srcset) = v.attr("srcset") {
                    for s in parse_srcset(srcset) {
                        push(&mut resources, s);
                    }
                }
            }
            "script" | "audio" | "embed" => {
                if let Some(src) = v.attr("src") {
                    push(&mut resources, src);
                }
            }
            "video" => {
                for attr in ["src", "poster"] {
                    if let Some(val) = v.attr(attr) {
                        push(&mut resources, val);
                    }
                }
            }
            "link" => {
                if let Some(href) = v.attr("href") {
                    push(&mut resources, href);
                }
            }
            "object" => {
                if let Some(data) = v.attr("data") {
                    push(&mut resources, data);
                }
            }
            "style" => {
                let css: String = el.text().collect();
                for raw in extract_css_urls(&css) {
                    push(&mut resources, &raw);
                }
            }
            _ => {}
        }
        if let Some(style) = v.attr("style") {
            for raw in extract_css_urls(style) {
                push(&mut resources, &raw);
            }
        }
    }
    (links, resources)
}

// ---------------------------------------------------------------------
// robots.txt

#[derive(Debug, Clone, Default)]
struct RobotsPolicy {
    disallow: Vec<String>,
}

impl RobotsPolicy {
    fn allows(&self, path: &str) -> bool {
        !self
            .disallow
            .iter()
            .any(|prefix| !prefix.is_empty() && path.starts_with(prefix.as_str()))
    }
}

/// Minimal parser: Disallow prefixes from `User-agent: *` groups.
/// Allow lines and wildcards are not interpreted.
fn parse_robots(text: &str) -> RobotsPolicy {
    let mut policy = RobotsPolicy::default();
    let mut group_applies = false;
    let mut in_group_header = false;
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim();
        match key.as_str() {
            "user-agent" => {
                if !in_group_header {
                    group_applies = false;
                    in_group_header = true;
                }
                if value == "*" {
                    group_applies = true;
                }
            }
            "disallow" => {
                in_group_header = false;
                if group_applies && !value.is_empty() {
                    policy.disallow.push(value.to_string());
                }
            }
            _ => {
                in_group_header = false;
            }
        }
    }
    policy
}

// ---------------------------------------------------------------------
// The crawl

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Page,
    Resource,
}

fn same_site(host: &str, anchor: &str, rules: &SuffixRules) -> bool {
    effective_sld(host, rules).map(|s| s == anchor).unwrap_or(false)
}

/// Breadth-first static crawl of one site. Pages count against
/// `page_budget`; once it is spent the remaining page queue is dropped
/// (and the result flagged truncated) while already-discovered resource
/// candidates still get their single fetch.
pub fn crawl_site(
    client: &HttpClient,
    sld: &str,
    limits: &CrawlLimits,
    rules: &SuffixRules,
) -> CrawlResult {
    let mut result = CrawlResult::default();
    let root = match Url::parse(&format!("https://{sld}/")) {
        Ok(u) => u,
        Err(e) => {
            result.diagnostics.push(format!("bad start domain {sld}: {e}"));
            return result;
        }
    };
    let anchor = effective_sld(sld, rules).unwrap_or_else(|_| sld.to_string());

    let mut robots: BTreeMap<String, RobotsPolicy> = BTreeMap::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut recorded: BTreeSet<String> = BTreeSet::new();
    let mut queue: VecDeque<(Url, usize, Kind)> = VecDeque::new();

    seen.insert(root.as_str().to_string());
    queue.push_back((root, 0, Kind::Page));

    while let Some((url, depth, kind)) = queue.pop_front() {
        if kind == Kind::Page && result.pages_fetched >= limits.page_budget {
            result.truncated = true;
            continue;
        }
        let Some(host) = url.host_str().map(str::to_string) else {
            continue;
        };
        if limits.honor_robots {
            let policy = robots.entry(host.clone()).or_insert_with(|| {
                let mut spec = FetchSpec::simple(&host, "/robots.txt");
                spec.port = url.port().unwrap_or(443);
                match client.fetch(&spec) {
                    Ok(resp) if resp.status == 200 => {
                        parse_robots(&String::from_utf8_lossy(&resp.body))
                    }
                    _ => RobotsPolicy::default(),
                }
            });
            if !policy.allows(&path_and_query(&url)) {
                result.diagnostics.push(format!("robots: skipped {url}"));
                continue;
            }
        }
        if kind == Kind::Page {
            result.pages_fetched += 1;
        }
        let (resp, final_url) = match follow_fetch(client, &url, limits.max_redirects) {
            Ok(r) => r,
            Err(e) => {
                result.diagnostics.push(format!("{url}: {e}"));
                continue;
            }
        };
        if resp.status != 200 {
            continue;
        }
        let Some(final_host) = final_url.host_str().map(str::to_string) else {
            continue;
        };
        let content_type = resp.content_type();
        let class = classify_resource(final_url.as_str(), content_type.as_deref());
        if recorded.insert(final_url.as_str().to_string()) {
            result.urls.push(DiscoveredUrl {
                url: final_url.to_string(),
                host_fqdn: final_host.clone(),
                content_type: content_type.clone(),
                body_hash: hash_body(&resp.body),
                resource_class: class,
            });
        }

        let is_html = matches!(
            content_type.as_deref(),
            Some("text/html") | Some("application/xhtml+xml")
        );
        if kind == Kind::Page && is_html && same_site(&final_host, &anchor, rules) {
            let body = String::from_utf8_lossy(&resp.body);
            let (links, resources) = extract_candidates(&body, &final_url);
            for r in resources {
                if seen.insert(r.as_str().to_string()) {
                    queue.push_back((r, depth, Kind::Resource));
                }
            }
            if depth < limits.depth_limit {
                for l in links {
                    let link_host = l.host_str().unwrap_or("");
                    if same_site(link_host, &anchor, rules) && seen.insert(l.as_str().to_string())
                    {
                        queue.push_back((l, depth + 1, Kind::Page));
                    }
                }
            }
        }
        if class == ResourceClass::Stylesheet {
            let body = String::from_utf8_lossy(&resp.body);
            for raw in extract_css_urls(&body) {
                if let Ok(mut u) = final_url.join(&raw) {
                    u.set_fragment(None);
                    if u.scheme() == "https" && seen.insert(u.as_str().to_string()) {
                        queue.push_back((u, depth, Kind::Resource));
                    }
                }
            }
        }
    }
    result
}

/// Runs a configured external fetcher (`command... start_url`) and reads
/// its line-JSON URL log from standard output, enforcing the same
/// invariants the built-in crawler guarantees.
pub fn external_crawl(command: &[String], start_url: &str) -> Result<Vec<DiscoveredUrl>, CrawlError> {
    let Some((program, args)) = command.split_first() else {
        return Err(CrawlError::EmptyCommand);
    };
    let output = std::process::Command::new(program)
        .args(args)
        .arg(start_url)
        .output()?;
    if !output.status.success() {
        return Err(CrawlError::ExternalFetcher {
            status: output.status.to_string(),
        });
    }
    let text = String::from_utf8_lossy(&output.stdout);
    let mut urls = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| CrawlError::BadUrlLog {
            line: i + 1,
            reason,
        };
        let d: DiscoveredUrl =
            serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let parsed = Url::parse(&d.url).map_err(|e| bad(format!("bad url: {e}")))?;
        if parsed.scheme() != "https" {
            return Err(bad(format!("{} is not https", d.url)));
        }
        if parsed.host_str() != Some(d.host_fqdn.as_str()) {
            return Err(bad(format!(
                "host_fqdn {} does not match url host",
                d.host_fqdn
            )));
        }
        urls.push(d);
    }
    Ok(urls)
}

// ---------------------------------------------------------------------
// Set building and sampling

/// URLs eligible for testing against `cdn`: static class and a host the
/// stable map ties to that CDN.
pub fn build_url_sets(
    discovered: &[DiscoveredUrl],
    stable: &[StableMapping],
    cdn: &str,
) -> BTreeSet<String> {
    let hosts: BTreeSet<&str> = stable
        .iter()
        .filter(|m| m.cdn == cdn)
        .map(|m| m.fqdn.as_str())
        .collect();
    discovered
        .iter()
        .filter(|d| d.resource_class.is_static() && hosts.contains(d.host_fqdn.as_str()))
        .map(|d| d.url.clone())
        .collect()
}

/// Groups a URL set by host into path+query lists, the shape tuple
/// generation consumes.
pub fn paths_by_host(urls: &BTreeSet<String>) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for u in urls {
        if let Ok(parsed) = Url::parse(u) {
            if let Some(host) = parsed.host_str() {
                out.entry(host.to_string())
                    .or_default()
                    .push(path_and_query(&parsed));
            }
        }
    }
    out
}

/// Registrable domains with at least one FQDN stably mapped to `cdn`.
/// Names without a registrable domain (bare public suffixes) are skipped.
pub fn eligible_slds(
    stable: &[StableMapping],
    cdn: &str,
    rules: &SuffixRules,
) -> BTreeSet<String> {
    stable
        .iter()
        .filter(|m| m.cdn == cdn)
        .filter_map(|m| effective_sld(&m.fqdn, rules).ok())
        .collect()
}

/// Seeded uniform sample (without replacement) of up to `cap` live SLDs
/// that are eligible for `cdn`.
pub fn sample_slds_for_cdn(
    live_slds: &BTreeSet<String>,
    stable: &[StableMapping],
    cdn: &str,
    cap: usize,
    seed: u64,
    rules: &SuffixRules,
) -> BTreeSet<String> {
    let eligible = eligible_slds(stable, cdn, rules);
    let candidates: Vec<&String> = live_slds.iter().filter(|s| eligible.contains(*s)).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("slds:{cdn}")));
    sample_sorted_indices(&mut rng, candidates.len(), cap)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_by_media_type() {
        use ResourceClass::*;
        assert_eq!(classify_resource("https://x.test/a.png", Some("image/png")), Image);
        assert_eq!(classify_resource("https://x.test/page", Some("text/html")), NonStatic);
        assert_eq!(
            classify_resource("https://x.test/s", Some("text/css; charset=utf-8")),
            Stylesheet
        );
        assert_eq!(
            classify_resource("https://x.test/j", Some("application/javascript")),
            Script
        );
        assert_eq!(classify_resource("https://x.test/f", Some("font/woff2")), Font);
        assert_eq!(
            classify_resource("https://x.test/v", Some("video/mp4")),
            OtherStatic
        );
        assert_eq!(
            classify_resource("https://x.test/api", Some("application/json")),
            NonStatic
        );
    }

    #[test]
    fn classify_falls_back_to_extension() {
        use ResourceClass::*;
        assert_eq!(classify_resource("https://x.test/bundle.js", None), Script);
        assert_eq!(classify_resource("https://x.test/a/b.woff2?v=3", None), Font);
        assert_eq!(classify_resource("https://x.test/logo.svg", None), Image);
        assert_eq!(classify_resource("https://x.test/style.css", None), Stylesheet);
        assert_eq!(classify_resource("https://x.test/doc.pdf", None), OtherStatic);
        assert_eq!(classify_resource("https://x.test/endpoint", None), NonStatic);
        assert_eq!(
            classify_resource("https://x.test/x.unknownext", Some("application/weird")),
            NonStatic
        );
    }

    #[test]
    fn html_media_type_never_falls_back() {
        // Even with a static-looking extension, HTML is non-static.
        assert_eq!(
            classify_resource("https://x.test/fake.png", Some("text/html")),
            ResourceClass::NonStatic
        );
    }

    #[test]
    fn srcset_takes_first_token_of_each_candidate() {
        assert_eq!(
            parse_srcset("a.png 1x, b.png 2x,  c.png   480w"),
            vec!["a.png", "b.png", "c.png"]
        );
        assert_eq!(parse_srcset(""), Vec::<&str>::new());
    }

    #[test]
    fn css_url_extraction_handles_quotes_and_data_uris() {
        let css = r#"
            body { background: url("bg.png"); }
            .a { background-image: url('/img/x.jpg'); }
            .b { src: url(fonts/f.woff2) format("woff2"); }
            .c { background: url(data:image/png;base64,AAA=); }
        "#;
        assert_eq!(
            extract_css_urls(css),
            vec!["bg.png", "/img/x.jpg", "fonts/f.woff2"]
        );
    }

    #[test]
    fn candidate_extraction_in_document_order() {
        let base = Url::parse("https://site-a.test/").unwrap();
        let html = r#"<html><head>
            <link rel="stylesheet" href="/main.css">
            <script src="/app.js"></script>
            <style>.x { background: url(/inline.png); }</style>
        </head><body>
            <a href="/about">about</a>
            <img src="logo.png" srcset="logo-2x.png 2x">
            <a href="https://other-site.example/">offsite</a>
            <a href="http://site-a.test/insecure">insecure</a>
            <div style="background: url('/styled.gif')"></div>
        </body></html>"#;
        let (links, resources) = extract_candidates(html, &base);
        let links: Vec<String> = links.into_iter().map(String::from).collect();
        let resources: Vec<String> = resources.into_iter().map(String::from).collect();
        assert_eq!(
            links,
            vec![
                "https://site-a.test/about",
                "https://other-site.example/",
            ],
            "http links are dropped at extraction"
        );
        assert_eq!(
            resources,
            vec![
                "https://site-a.test/main.css",
                "https://site-a.test/app.js",
                "https://site-a.test/inline.png",
                "https://site-a.test/logo.png",
                "https://site-a.test/logo-2x.png",
                "https://site-a.test/styled.gif",
            ]
        );
    }

    #[test]
    fn robots_disallow_prefixes_for_star_agent() {
        let policy = parse_robots(
            "# comment\nUser-agent: fancybot\nDisallow: /only-fancy\n\n\
             User-agent: *\nDisallow: /private\nDisallow:\nDisallow: /tmp/\n",
        );
        assert!(policy.allows("/public"));
        assert!(!policy.allows("/private/page"));
        assert!(!policy.allows("/tmp/x"));
        assert!(policy.allows("/only-fancy"), "group for another agent");
        let empty = parse_robots("");
        assert!(empty.allows("/anything"));
    }

    #[test]
    fn robots_grouped_agents_share_rules() {
        let policy = parse_robots("User-agent: a\nUser-agent: *\nDisallow: /x\n");
        assert!(!policy.allows("/x"));
    }

    fn mapping(fqdn: &str, cdn: &str) -> StableMapping {
        StableMapping {
            fqdn: fqdn.into(),
            cdn: cdn.into(),
            days: 1,
        }
    }

    fn durl(url: &str, host: &str, class: ResourceClass) -> DiscoveredUrl {
        DiscoveredUrl {
            url: url.into(),
            host_fqdn: host.into(),
            content_type: None,
            body_hash: hash_body(b"x"),
            resource_class: class,
        }
    }

    #[test]
    fn url_set_keeps_static_urls_on_cdn_hosts_only() {
        let stable = vec![
            mapping("assets.example.com", "fastly"),
            mapping("www.example.com", "akamai"),
        ];
        let discovered = vec![
            durl(
                "https://assets.example.com/app.js",
                "assets.example.com",
                ResourceClass::Script,
            ),
            durl(
                "https://assets.example.com/",
                "assets.example.com",
                ResourceClass::NonStatic,
            ),
            durl(
                "https://www.example.com/logo.png",
                "www.example.com",
                ResourceClass::Image,
            ),
            durl(
                "https://elsewhere.net/x.css",
                "elsewhere.net",
                ResourceClass::Stylesheet,
            ),
        ];
        let set = build_url_sets(&discovered, &stable, "fastly");
        assert_eq!(
            set.into_iter().collect::<Vec<_>>(),
            vec!["https://assets.example.com/app.js"]
        );
        let set = build_url_sets(&discovered, &stable, "akamai");
        assert_eq!(
            set.into_iter().collect::<Vec<_>>(),
            vec!["https://www.example.com/logo.png"]
        );
    }

    #[test]
    fn paths_by_host_groups_and_keeps_query() {
        let urls: BTreeSet<String> = [
            "https://a.test/x/y?v=1",
            "https://a.test/z",
            "https://b.test/",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let grouped = paths_by_host(&urls);
        assert_eq!(grouped["a.test"], vec!["/x/y?v=1", "/z"]);
        assert_eq!(grouped["b.test"], vec!["/"]);
    }

    fn rules() -> SuffixRules {
        SuffixRules::bundled()
    }

    #[test]
    fn eligible_slds_need_a_mapped_fqdn() {
        let stable = vec![
            mapping("cdn.alpha.com", "acme"),
            mapping("deep.sub.beta.org", "acme"),
            mapping("gamma.net", "other"),
        ];
        let slds = eligible_slds(&stable, "acme", &rules());
        assert_eq!(
            slds.into_iter().collect::<Vec<_>>(),
            vec!["alpha.com", "beta.org"]
        );
    }

    #[test]
    fn sld_sample_under_cap_returns_all() {
        let stable = vec![
            mapping("a.alpha.com", "acme"),
            mapping("b.beta.org", "acme"),
            mapping("c.gamma.net", "acme"),
        ];
        let live: BTreeSet<String> = ["alpha.com", "beta.org", "gamma.net"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let sample = sample_slds_for_cdn(&live, &stable, "acme", 100, 1, &rules());
        assert_eq!(sample.len(), 3);
    }

    #[test]
    fn sld_sample_is_capped_and_reproducible() {
        let stable: Vec<StableMapping> = (0..200)
            .map(|i| mapping(&format!("www.site{i:03}.com"), "acme"))
            .collect();
        let live: BTreeSet<String> = (0..200).map(|i| format!("site{i:03}.com")).collect();
        let a = sample_slds_for_cdn(&live, &stable, "acme", 100, 7, &rules());
        let b = sample_slds_for_cdn(&live, &stable, "acme", 100, 7, &rules());
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        let c = sample_slds_for_cdn(&live, &stable, "acme", 100, 8, &rules());
        assert_ne!(a, c, "seeds 7 and 8 are known to diverge on this input");
    }

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into(), "fetcher".into()]
    }

    #[test]
    fn external_fetcher_log_round_trips() {
        let line = serde_json::to_string(&durl(
            "https://cdn.example.com/app.js",
            "cdn.example.com",
            ResourceClass::Script,
        ))
        .unwrap();
        // `$1` is the start URL the runner appends.
        let urls = external_crawl(
            &sh(&format!("test \"$1\" = https://x.test/ && echo '{line}'")),
            "https://x.test/",
        )
        .unwrap();
        assert_eq!(urls.len(), 1);
        assert_eq!(urls[0].url, "https://cdn.example.com/app.js");
    }

    #[test]
    fn external_fetcher_violations_are_rejected() {
        assert!(matches!(
            external_crawl(&[], "https://x.test/"),
            Err(CrawlError::EmptyCommand)
        ));
        assert!(matches!(
            external_crawl(&sh("exit 3"), "https://x.test/"),
            Err(CrawlError::ExternalFetcher { .. })
        ));

        let http_line = serde_json::to_string(&durl(
            "http://plain.example.com/a.js",
            "plain.example.com",
            ResourceClass::Script,
        ))
        .unwrap();
        assert!(matches!(
            external_crawl(&sh(&format!("echo '{http_line}'")), "https://x.test/"),
            Err(CrawlError::BadUrlLog { line: 1, .. })
        ));

        let mismatched = serde_json::to_string(&durl(
            "https://a.example.com/x.js",
            "b.example.com",
            ResourceClass::Script,
        ))
        .unwrap();
        assert!(matches!(
            external_crawl(&sh(&format!("echo '{mismatched}'")), "https://x.test/"),
            Err(CrawlError::BadUrlLog { line: 1, .. })
        ));

        assert!(matches!(
            external_crawl(&sh("echo not-json"), "https://x.test/"),
            Err(CrawlError::BadUrlLog { line: 1, .. })
        ));
    }

    #[test]
    fn sld_sample_ignores_dead_and_foreign_slds() {
        let stable = vec![
            mapping("a.alpha.com", "acme"),
            mapping("b.beta.org", "other-cdn"),
        ];
        let live: BTreeSet<String> = ["alpha.com", "beta.org", "unmapped.net"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let sample = sample_slds_for_cdn(&live, &stable, "acme", 100, 1, &rules());
        assert_eq!(sample.into_iter().collect::<Vec<_>>(), vec!["alpha.com"]);
    }
}
