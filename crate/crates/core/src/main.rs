use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use forkvuln::forks::{GitInspector, ManifestInspector, RepositoryInspector, ScopeConfig};
use forkvuln::pipeline::{self, CascadeConfig};
use forkvuln::propagation::{LabelOptions, PropagationOptions, Worklist};
use forkvuln::scan::{self, ScanReport};
use forkvuln::store::{LookupStatus, VulnStore};

#[derive(Parser)]
#[command(name = "forkvuln", version, about = "Track vulnerable commits across fork ecosystems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the commit graph, origins and advisories into a state directory
    Ingest {
        #[arg(long)]
        commits: PathBuf,
        #[arg(long)]
        origins: PathBuf,
        #[arg(long)]
        advisories: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label every commit with the ranges it is vulnerable to
    Propagate {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_enum, default_value_t = WorklistArg::Stack, hide = true)]
        worklist: WorklistArg,
    },
    /// Find unpatched fork heads and run the filter cascade
    Analyze {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = 100)]
        min_stars: u64,
        #[arg(long, default_value_t = 10)]
        min_forks: u64,
        #[arg(long, default_value_t = 7.0)]
        min_severity: f64,
        #[arg(long, default_value = "2023-01-01")]
        date_cutoff: String,
        /// directory with trees/<head>.txt and fixes/<sha>.txt manifests
        #[arg(long, conflicts_with = "git_repo")]
        manifests: Option<PathBuf>,
        /// local clone to inspect with git instead of manifests
        #[arg(long)]
        git_repo: Option<PathBuf>,
        /// directory of *.diffs files for patch-id matching
        #[arg(long)]
        diffs: Option<PathBuf>,
    },
    /// Write the lookup store
    Export {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query the store
    Lookup {
        #[command(subcommand)]
        what: LookupCommand,
    },
    /// Check a dependency manifest against the store
    Scan {
        #[command(subcommand)]
        what: ScanCommand,
    },
}

#[derive(Subcommand)]
enum LookupCommand {
    Commit {
        sha: String,
        #[arg(long)]
        store: PathBuf,
    },
    Origin {
        url: String,
        #[arg(long)]
        store: PathBuf,
    },
}

#[derive(Subcommand)]
enum ScanCommand {
    Gitmodules {
        manifest: PathBuf,
        #[arg(long)]
        pins: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    Gomod {
        manifest: PathBuf,
        #[arg(long)]
        resolution: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WorklistArg {
    Stack,
    Queue,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn fmt_severity(s: Option<f64>) -> String {
    s.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into())
}

fn print_scan(report: &ScanReport) -> u8 {
    for e in &report.entries {
        let commit = e.commit.map(|c| c.to_string()).unwrap_or_else(|| "-".into());
        let hits: Vec<String> = e.hits.iter().map(|h| format!("{}({})", h.vuln_id, fmt_severity(h.severity))).collect();
        println!("{}\t{commit}\t{}\t{}", e.locator, e.status.as_str(), hits.join(","));
    }
    println!(
        "# {}: {} dependencies, {} vulnerable, {} unresolved, {} not indexed",
        report.manifest,
        report.entries.len(),
        report.count(scan::EntryStatus::Vulnerable),
        report.count(scan::EntryStatus::Unresolved),
        report.count(scan::EntryStatus::NotIndexed),
    );
    report.exit_code() as u8
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Ingest { commits, origins, advisories, out } => {
            let s = pipeline::ingest(&commits, &origins, &advisories, &out)?;
            println!(
                "{} commits, {} edges, {} origins, {} vulnerabilities, {} ranges accepted, {} rejected",
                s.commits,
                s.edges,
                s.origins,
                s.vulnerabilities,
                s.report.accepted,
                s.report.rejected.len()
            );
            Ok(0)
        }
        Command::Propagate { state, threads, worklist } => {
            let worklist = match worklist {
                WorklistArg::Stack => Worklist::Stack,
                WorklistArg::Queue => Worklist::Queue,
            };
            let options = LabelOptions { propagation: PropagationOptions { worklist, ..Default::default() }, threads };
            let s = pipeline::propagate(&state, options)?;
            println!("{} ranges, {} labeled commits, {} commit-range pairs", s.ranges, s.labeled_commits, s.pairs);
            Ok(0)
        }
        Command::Analyze { state, min_stars, min_forks, min_severity, date_cutoff, manifests, git_repo, diffs } => {
            let config = CascadeConfig {
                min_stars,
                min_forks,
                scope: ScopeConfig { min_severity, date_cutoff: pipeline::parse_date(&date_cutoff)? },
            };
            let inspector: Option<Box<dyn RepositoryInspector>> = match (manifests, git_repo) {
                (Some(dir), _) => Some(Box::new(ManifestInspector::new(dir))),
                (None, Some(repo)) => Some(Box::new(GitInspector::new(repo))),
                (None, None) => None,
            };
            let result = pipeline::analyze(&state, config, inspector.as_deref(), diffs.as_deref())?;
            let r = &result.report;
            println!("unpatched head pairs: {}", r.input);
            for s in &r.stages {
                let reasons: Vec<String> = s.reasons.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{}: {} in, {} kept, {} dropped [{}]", s.stage, s.input, s.kept, s.dropped, reasons.join(" "));
            }
            for p in &result.survivors {
                println!("{}\t{}\t{}\t{}#{}", p.origin_url, p.branch, p.head, p.vuln_id, p.range_index);
            }
            Ok(u8::from(!result.survivors.is_empty()))
        }
        Command::Export { state, out } => {
            let store = pipeline::export(&state, &out)?;
            println!(
                "{} commit rows, {} origin rows written to {}",
                store.commit_index.len(),
                store.origin_index.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Lookup { what: LookupCommand::Commit { sha, store } } => {
            let store = VulnStore::load(&store)?;
            let found = store.lookup_commit(&sha)?;
            println!("{}\t{}", found.sha, found.status.as_str());
            for h in &found.hits {
                println!("{}\t{}", h.vuln_id, fmt_severity(h.severity));
            }
            Ok(u8::from(!found.hits.is_empty()))
        }
        Command::Lookup { what: LookupCommand::Origin { url, store } } => {
            let store = VulnStore::load(&store)?;
            let found = store.lookup_origin(&url);
            println!("{}\t{}", found.url, found.status.as_str());
            for b in &found.branches {
                let default = if b.is_default { " (default)" } else { "" };
                let status = if b.vulns.is_empty() { "clean" } else { "vulnerable" };
                println!("{}{default}\t{}\t{status}", b.branch, b.head_sha);
                for v in &b.vulns {
                    println!("  {}\t{}\t{}", v.vuln_id, fmt_severity(v.severity), v.survived_filters);
                }
            }
            Ok(u8::from(found.status == LookupStatus::Vulnerable))
        }
        Command::Scan { what: ScanCommand::Gitmodules { manifest, pins, store } } => {
            let subs = scan::parse_gitmodules(open(&manifest)?)?;
            let pins = scan::parse_pins(open(&pins)?)?;
            let store = VulnStore::load(&store)?;
            let report = scan::scan_gitmodules(&manifest.display().to_string(), &subs, &pins, &store)?;
            Ok(print_scan(&report))
        }
        Command::Scan { what: ScanCommand::Gomod { manifest, resolution, store } } => {
            let reqs = scan::parse_gomod(open(&manifest)?)?;
            let resolution = scan::parse_resolution(open(&resolution)?)?;
            let store = VulnStore::load(&store)?;
            let report = scan::scan_gomod(&manifest.display().to_string(), &reqs, &resolution, &store)?;
            Ok(print_scan(&report))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
