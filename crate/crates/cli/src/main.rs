use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use frontcheck::config::{CliOverrides, PipelineConfig};
use frontcheck::{demo, stages};
use frontcheck_core::report::ReportFormat;

#[derive(Parser)]
#[command(
    name = "frontcheck",
    version,
    about = "Measures which CDNs let an HTTPS request front one customer's domain behind another's"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root seed for every sampling decision in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory the stage artifacts live in.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// DNS pin as host=ip:port, applied before the system resolver.
    /// Repeatable.
    #[arg(long = "resolver-override", global = true, value_name = "SPEC")]
    resolver_override: Vec<String>,

    /// Accept a per-CDN request budget above the built-in guard.
    #[arg(long, global = true)]
    acknowledge_request_cap: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract stable FQDN-to-CDN mappings from DNS logs.
    Ingest,
    /// Check site liveness and crawl sampled sites for testable URLs.
    Discover,
    /// Run the three-probe fronting tests against each CDN's URL set.
    Test,
    /// Attach popularity bands and reputation verdicts to tested targets.
    Enrich,
    /// Aggregate outcomes into per-CDN reports.
    Report {
        /// json, table, or plotdata.
        #[arg(long, default_value = "table")]
        format: String,
    },
    /// Run the bundled offline demo against a loopback fleet.
    Demo {
        /// allow, enforce, or split; all three when omitted.
        #[arg(long)]
        scenario: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Demo { scenario } = &cli.command {
        return demo::run_demo(scenario.as_deref());
    }

    let overrides = CliOverrides {
        seed: cli.seed,
        out_dir: cli.out_dir.clone(),
        resolver_overrides: cli.resolver_override.clone(),
        acknowledge_request_cap: cli.acknowledge_request_cap,
    };
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;

    match cli.command {
        Command::Ingest => {
            stages::run_ingest(&cfg)?;
        }
        Command::Discover => {
            stages::run_discover(&cfg)?;
        }
        Command::Test => {
            stages::run_test(&cfg)?;
        }
        Command::Enrich => {
            stages::run_enrich(&cfg)?;
        }
        Command::Report { format } => {
            let format: ReportFormat = format.parse()?;
            let rendered = stages::run_report(&cfg, format)?;
            std::io::stdout().write_all(&rendered)?;
        }
        Command::Demo { .. } => unreachable!("handled above"),
    }
    Ok(())
}
