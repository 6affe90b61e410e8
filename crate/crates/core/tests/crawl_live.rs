//! The static crawler and the liveness check run against the in-process
//! mock fleet over real TLS: discovery across subdomains, redirect
//! following, robots handling, cycle and depth limits, page-budget
//! truncation, and run-to-run determinism.

use std::sync::Arc;
use std::time::Duration;

use frontcheck_core::crawl::{
    check_root_liveness, crawl_site, CrawlLimits, ResourceClass,
};
use frontcheck_core::http::{HttpClient, HttpClientOptions, TlsTrust};
use frontcheck_core::psl::SuffixRules;
use frontcheck_core::resolver::{OverrideResolver, Resolver};
use frontcheck_mock_cdn::{FleetPolicy, FleetSpec, MockFleet, MockOrigin};

struct Rig {
    fleet: MockFleet,
    client: HttpClient,
    _ca_file: tempfile::NamedTempFile,
}

fn rig_with(
    origins: Vec<MockOrigin>,
    extra_overrides: impl Fn(&MockFleet) -> Vec<String>,
) -> Rig {
    let fleet = MockFleet::spawn(FleetSpec::uniform(1, FleetPolicy::Allow, origins)).unwrap();
    let ca_file = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(ca_file.path(), fleet.ca_pem()).unwrap();

    let mut specs = fleet.resolver_specs().unwrap();
    specs.extend(extra_overrides(&fleet));
    let resolver: Arc<dyn Resolver> = Arc::new(OverrideResolver::with_specs(&specs).unwrap());

    let client = HttpClient::new(
        &TlsTrust::pem_file(ca_file.path().to_path_buf()),
        resolver,
        HttpClientOptions {
            connect_timeout: Duration::from_secs(5),
            io_timeout: Duration::from_secs(5),
            min_request_interval: Duration::ZERO,
            ..HttpClientOptions::default()
        },
    )
    .unwrap();

    Rig {
        fleet,
        client,
        _ca_file: ca_file,
    }
}

const HOME: &[u8] = br#"<html><head>
<link rel="stylesheet" href="/style.css">
<script src="https://assets.site-a.test/app.js"></script>
</head><body>
<a href="/about">about</a>
<a href="/catalog">catalog</a>
<a href="/private/secret">secret</a>
<a href="https://other-co.example/">partner</a>
<img src="/logo.png">
</body></html>"#;

const ABOUT: &[u8] = br#"<html><body>
<a href="/">home</a>
<a href="/team">team</a>
<img src="/missing.png">
</body></html>"#;

const TEAM: &[u8] = br#"<html><body><a href="/deep">way down</a></body></html>"#;

fn site_a() -> MockOrigin {
    MockOrigin::new("site-a.test")
        .route(
            "/robots.txt",
            200,
            "text/plain",
            b"User-agent: *\nDisallow: /private\n",
        )
        .route("/", 200, "text/html", HOME)
        .route("/about", 200, "text/html", ABOUT)
        .route("/team", 200, "text/html", TEAM)
        .route("/deep", 200, "text/html", b"<html>too deep</html>")
        .redirect("/catalog", 302, "/catalog/index")
        .route("/catalog/index", 200, "text/html", b"<html>catalog</html>")
        .route("/logo.png", 200, "image/png", b"\x89PNG fake")
        .route(
            "/style.css",
            200,
            "text/css",
            b"h1 { src: url(https://assets.site-a.test/fonts/title.woff2); }",
        )
        .route("/private/secret", 200, "text/html", b"<html>hidden</html>")
}

fn assets_a() -> MockOrigin {
    MockOrigin::new("assets.site-a.test")
        .route("/app.js", 200, "application/javascript", b"console.log(1)")
        .route("/fonts/title.woff2", 200, "font/woff2", b"wOF2 fake")
}

fn fixture_rig() -> Rig {
    rig_with(vec![site_a(), assets_a()], |_| Vec::new())
}

fn discovered_with(limits: &CrawlLimits, rig: &Rig) -> frontcheck_core::crawl::CrawlResult {
    crawl_site(&rig.client, "site-a.test", limits, &SuffixRules::bundled())
}

#[test]
fn crawl_discovers_pages_subresources_and_css_references() {
    let rig = fixture_rig();
    let result = discovered_with(&CrawlLimits::default(), &rig);

    let got: Vec<(&str, ResourceClass)> = result
        .urls
        .iter()
        .map(|d| (d.url.as_str(), d.resource_class))
        .collect();
    assert_eq!(
        got,
        vec![
            ("https://site-a.test/", ResourceClass::NonStatic),
            ("https://site-a.test/style.css", ResourceClass::Stylesheet),
            ("https://assets.site-a.test/app.js", ResourceClass::Script),
            ("https://site-a.test/logo.png", ResourceClass::Image),
            ("https://site-a.test/about", ResourceClass::NonStatic),
            ("https://site-a.test/catalog/index", ResourceClass::NonStatic),
            (
                "https://assets.site-a.test/fonts/title.woff2",
                ResourceClass::Font,
            ),
            ("https://site-a.test/team", ResourceClass::NonStatic),
        ]
    );
    assert_eq!(result.pages_fetched, 4, "root, about, catalog, team");
    assert!(!result.truncated);

    for d in &result.urls {
        assert!(!d.body_hash.is_empty());
        assert!(d.content_type.is_some());
    }

    let log = rig.fleet.log_snapshot();
    assert!(
        log.iter().all(|e| !e.path.starts_with("/private")),
        "robots-disallowed path must never hit the wire"
    );
    assert!(
        log.iter().all(|e| e.host.as_deref() != Some("other-co.example")),
        "foreign registrable domains are not crawled"
    );
    assert!(
        log.iter().all(|e| e.path != "/deep"),
        "links past the depth limit are not followed"
    );
    assert_eq!(
        log.iter()
            .filter(|e| e.host.as_deref() == Some("site-a.test") && e.path == "/")
            .count(),
        1,
        "the home page link cycle collapses to one fetch"
    );
    assert_eq!(
        log.iter()
            .filter(|e| e.host.as_deref() == Some("site-a.test") && e.path == "/missing.png")
            .count(),
        1,
        "a 404 asset is attempted once and simply not recorded"
    );
    assert!(
        result.diagnostics.iter().any(|d| d.contains("/private/secret")),
        "the robots skip is visible in diagnostics"
    );
}

#[test]
fn recrawl_output_is_byte_identical() {
    let rig = fixture_rig();
    let limits = CrawlLimits::default();
    let first = discovered_with(&limits, &rig);
    let second = discovered_with(&limits, &rig);
    assert_eq!(
        serde_json::to_string(&first).unwrap(),
        serde_json::to_string(&second).unwrap()
    );
}

#[test]
fn page_budget_truncates_but_resources_still_fetch() {
    let rig = fixture_rig();
    let result = discovered_with(
        &CrawlLimits {
            page_budget: 2,
            ..CrawlLimits::default()
        },
        &rig,
    );

    assert!(result.truncated);
    assert_eq!(result.pages_fetched, 2, "root and about");
    let urls: Vec<&str> = result.urls.iter().map(|d| d.url.as_str()).collect();
    assert_eq!(
        urls,
        vec![
            "https://site-a.test/",
            "https://site-a.test/style.css",
            "https://assets.site-a.test/app.js",
            "https://site-a.test/logo.png",
            "https://site-a.test/about",
            "https://assets.site-a.test/fonts/title.woff2",
        ],
        "queued resources outlive the page budget; queued pages do not"
    );
}

#[test]
fn robots_can_be_overridden() {
    let rig = fixture_rig();
    let result = discovered_with(
        &CrawlLimits {
            honor_robots: false,
            ..CrawlLimits::default()
        },
        &rig,
    );
    assert!(
        result
            .urls
            .iter()
            .any(|d| d.url == "https://site-a.test/private/secret"),
        "with robots off the disallowed page is crawled"
    );
    let log = rig.fleet.log_snapshot();
    assert!(
        log.iter().all(|e| e.path != "/robots.txt"),
        "robots.txt is not even consulted when disabled"
    );
}

#[test]
fn liveness_classifies_status_and_transport_failures() {
    let origins = vec![
        site_a(),
        MockOrigin::new("root-404.test"),
        MockOrigin::new("loop.test").redirect("/", 302, "/"),
    ];
    // untrusted.test resolves to the edge, whose certificate does not
    // cover that name.
    let rig = rig_with(origins, |fleet| {
        let edge = fleet.edge_addr(0);
        vec![
            "dead.test=127.0.0.1:1".to_string(),
            format!("untrusted.test=127.0.0.1:{}", edge.port()),
        ]
    });

    let live = check_root_liveness(&rig.client, "site-a.test");
    assert_eq!(live.status, Some(200));
    assert!(live.live);
    assert_eq!(live.note, None);

    let dead_status = check_root_liveness(&rig.client, "root-404.test");
    assert_eq!(dead_status.status, Some(404));
    assert!(!dead_status.live);

    let refused = check_root_liveness(&rig.client, "dead.test");
    assert!(!refused.live);
    assert_eq!(refused.note.as_deref(), Some("connect"));

    let looping = check_root_liveness(&rig.client, "loop.test");
    assert!(!looping.live);
    assert_eq!(looping.note.as_deref(), Some("redirect-loop"));

    let mismatched = check_root_liveness(&rig.client, "untrusted.test");
    assert!(!mismatched.live);
    assert_eq!(mismatched.note.as_deref(), Some("tls"));
}
