//! End-to-end driver: ingest, propagate, analyze and export through a state
//! directory, so each step can be rerun on its own.
//!
//! State directory layout:
//!
//! | file            | written by | content                                  |
//! |-----------------|------------|------------------------------------------|
//! | `inputs.json`   | ingest     | absolute paths of the commit and origin files |
//! | `vulns.jsonl`   | ingest     | cleaned and augmented vulnerabilities    |
//! | `cleaning.json` | ingest     | accepted count and rejected ranges       |
//! | `labeling.tsv`  | propagate  | `vuln_id, range_index, sha`, sorted      |
//! | `pairs.jsonl`   | analyze    | every unpatched head pair with verdicts  |
//! | `cascade.json`  | analyze    | per-stage accounting                     |

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::equivalence::{detect_equivalent_fix, inject_fixes, read_diffs, DiffsFileError};
use crate::forks::{
    filter_divergence, filter_popularity, filter_scope, parse_origins, unpatched_heads, ForkError, Origins, PairRecord,
    RepositoryInspector, ScopeConfig, ScopeContext, Stage, StageOutcome, StageVerdict,
};
use crate::graph::{load_graph, CommitGraph, CommitId, GraphError, Node};
use crate::osv::{parse_vulnerabilities, prepare, CleaningReport, RangeKey, VulnRange, Vulnerability};
use crate::propagation::{
    label_graph_with, propagate_range, LabelOptions, PropagationError, RangeLabel, VulnerabilityLabeling,
};
use crate::store::{export_store, StoreError, VulnStore};

pub const INPUTS: &str = "inputs.json";
pub const VULNS: &str = "vulns.jsonl";
pub const CLEANING: &str = "cleaning.json";
pub const LABELING: &str = "labeling.tsv";
pub const PAIRS: &str = "pairs.jsonl";
pub const CASCADE: &str = "cascade.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}: {source}", path.display())]
    Graph { path: PathBuf, source: GraphError },
    #[error("{}: {source}", path.display())]
    Origins { path: PathBuf, source: ForkError },
    #[error("{}: {source}", path.display())]
    Diffs { path: PathBuf, source: DiffsFileError },
    #[error("{} line {line}: {message}", path.display())]
    Line { path: PathBuf, line: usize, message: String },
    #[error("{}: commit {commit} also appears in an earlier diffs file", path.display())]
    DuplicateDiff { path: PathBuf, commit: CommitId },
    #[error("{} is missing; run propagate first", .0.display())]
    NotPropagated(PathBuf),
    #[error("unknown range {0}")]
    UnknownRange(RangeKey),
    #[error("bad date {0:?}")]
    BadDate(String),
    #[error(transparent)]
    Fork(#[from] ForkError),
    #[error(transparent)]
    Lookup(#[from] GraphError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn json_at(path: &Path) -> impl FnOnce(serde_json::Error) -> PipelineError + '_ {
    move |source| PipelineError::Json { path: path.to_path_buf(), source }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(io_at(path))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_at(path))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Inputs {
    pub commits: PathBuf,
    pub origins: PathBuf,
}

pub fn read_graph(path: &Path) -> Result<CommitGraph> {
    load_graph(BufReader::with_capacity(1 << 20, open(path)?))
        .map_err(|source| PipelineError::Graph { path: path.to_path_buf(), source })
}

pub fn read_origins(path: &Path, graph: &CommitGraph) -> Result<Origins> {
    let origins = parse_origins(BufReader::new(open(path)?))
        .map_err(|source| PipelineError::Origins { path: path.to_path_buf(), source })?;
    origins.validate(graph)?;
    Ok(origins)
}

/// Parses and prepares advisories against the graph and origins.
pub fn prepare_advisories(
    path: &Path,
    graph: &CommitGraph,
    origins: &Origins,
) -> Result<(Vec<Vulnerability>, CleaningReport)> {
    let parsed = parse_vulnerabilities(BufReader::new(open(path)?)).map_err(io_at(path))?;
    for (line, message) in &parsed.skipped {
        log::warn!("{} line {line}: {message}", path.display());
    }
    Ok(prepare(parsed, graph, |url| origins.membership(graph, url).ok()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(json_at(path))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_at(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_reader(BufReader::new(open(path)?)).map_err(json_at(path))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(json_at(path))?;
        w.write_all(b"\n").map_err(io_at(path))?;
    }
    w.flush().map_err(io_at(path))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(open(path)?).lines().enumerate() {
        let line = line.map_err(io_at(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| PipelineError::Line {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestSummary {
    pub commits: usize,
    pub edges: usize,
    pub origins: usize,
    pub vulnerabilities: usize,
    pub report: CleaningReport,
}

pub fn ingest(commits: &Path, origins_path: &Path, advisories: &Path, state: &Path) -> Result<IngestSummary> {
    let graph = read_graph(commits)?;
    let origins = read_origins(origins_path, &graph)?;
    let (vulns, report) = prepare_advisories(advisories, &graph, &origins)?;
    std::fs::create_dir_all(state).map_err(io_at(state))?;
    let inputs = Inputs {
        commits: std::fs::canonicalize(commits).map_err(io_at(commits))?,
        origins: std::fs::canonicalize(origins_path).map_err(io_at(origins_path))?,
    };
    write_json(&state.join(INPUTS), &inputs)?;
    write_jsonl(&state.join(VULNS), &vulns)?;
    write_json(&state.join(CLEANING), &report)?;
    for name in [LABELING, PAIRS, CASCADE] {
        let stale = state.join(name);
        if stale.exists() {
            std::fs::remove_file(&stale).map_err(io_at(&stale))?;
        }
    }
    Ok(IngestSummary {
        commits: graph.len(),
        edges: graph.edge_count(),
        origins: origins.len(),
        vulnerabilities: vulns.len(),
        report,
    })
}

/// Inputs reloaded from a state directory.
pub struct State {
    pub dir: PathBuf,
    pub graph: CommitGraph,
    pub origins: Origins,
    pub vulns: Vec<Vulnerability>,
}

impl State {
    pub fn load(dir: &Path) -> Result<Self> {
        let inputs: Inputs = read_json(&dir.join(INPUTS))?;
        let graph = read_graph(&inputs.commits)?;
        let origins = read_origins(&inputs.origins, &graph)?;
        let vulns = read_jsonl(&dir.join(VULNS))?;
        Ok(State { dir: dir.to_path_buf(), graph, origins, vulns })
    }

    pub fn labeling(&self) -> Result<VulnerabilityLabeling> {
        let path = self.dir.join(LABELING);
        if !path.exists() {
            return Err(PipelineError::NotPropagated(path));
        }
        read_labeling(&path, &self.graph)
    }

    pub fn ranges(&self) -> BTreeMap<RangeKey, &VulnRange> {
        self.vulns.iter().flat_map(|v| v.ranges.iter()).map(|r| (r.key(), r)).collect()
    }
}

pub fn write_labeling(path: &Path, graph: &CommitGraph, labeling: &VulnerabilityLabeling) -> Result<()> {
    let mut w = create(path)?;
    for r in labeling.ranges() {
        let mut ids: Vec<CommitId> = r.commits.iter().map(|n| graph.id(*n)).collect();
        ids.sort_unstable();
        for id in ids {
            writeln!(w, "{}\t{}\t{id}", r.key.vuln_id, r.key.index).map_err(io_at(path))?;
        }
    }
    w.flush().map_err(io_at(path))
}

pub fn read_labeling(path: &Path, graph: &CommitGraph) -> Result<VulnerabilityLabeling> {
    let mut ranges: BTreeMap<RangeKey, Vec<Node>> = BTreeMap::new();
    for (i, line) in BufReader::new(open(path)?).lines().enumerate() {
        let line = line.map_err(io_at(path))?;
        let bad = |message: String| PipelineError::Line { path: path.to_path_buf(), line: i + 1, message };
        let mut f = line.split('\t');
        let (Some(id), Some(idx), Some(sha), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad("expected 3 fields".into()));
        };
        let sha = CommitId::parse(sha).map_err(|e| bad(e.to_string()))?;
        let node = graph.node(&sha).ok_or_else(|| bad(format!("commit {sha} not in graph")))?;
        let index = idx.parse().map_err(|_| bad(format!("bad range index {idx:?}")))?;
        let key = RangeKey { vuln_id: id.to_string(), index };
        ranges.entry(key).or_default().push(node);
    }
    let labels = ranges
        .into_iter()
        .map(|(key, mut commits)| {
            commits.sort_unstable();
            RangeLabel { key, commits }
        })
        .collect();
    Ok(VulnerabilityLabeling::from_ranges(graph, labels))
}

#[derive(Debug, Clone, Serialize)]
pub struct PropagateSummary {
    pub ranges: usize,
    pub labeled_commits: usize,
    pub pairs: usize,
}

pub fn propagate(state_dir: &Path, options: LabelOptions) -> Result<PropagateSummary> {
    let state = State::load(state_dir)?;
    let labeling = label_graph_with(&state.graph, &state.vulns, options)?;
    write_labeling(&state_dir.join(LABELING), &state.graph, &labeling)?;
    Ok(PropagateSummary {
        ranges: labeling.ranges().len(),
        labeled_commits: labeling.labeled_commit_count(),
        pairs: labeling.pair_count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeConfig {
    pub min_stars: u64,
    pub min_forks: u64,
    pub scope: ScopeConfig,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig { min_stars: 100, min_forks: 10, scope: ScopeConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub input: usize,
    pub stages: Vec<StageSummary>,
    pub survivors: usize,
}

impl CascadeReport {
    /// Every stage's input equals kept plus dropped, and feeds the next.
    pub fn reconciles(&self) -> bool {
        let mut expected = self.input;
        for s in &self.stages {
            if s.input != expected || s.kept + s.dropped != s.input {
                return false;
            }
            expected = s.kept;
        }
        expected == self.survivors
    }
}

/// Outcome of the cascade: all pairs (survivors and dropped) with verdicts.
#[derive(Debug, Clone)]
pub struct CascadeResult {
    pub pairs: Vec<PairRecord>,
    pub survivors: Vec<PairRecord>,
    pub report: CascadeReport,
}

fn reason_key(v: &StageVerdict) -> String {
    let r = v.reason.as_deref().unwrap_or("unspecified");
    // "divergent:path" and friends are counted under their prefix
    r.split(':').next().unwrap_or(r).to_string()
}

fn record_stage(stage: Stage, outcome: &StageOutcome, summaries: &mut Vec<StageSummary>) {
    let mut reasons = BTreeMap::new();
    for p in &outcome.dropped {
        if let Some(v) = p.verdicts.last() {
            *reasons.entry(reason_key(v)).or_insert(0) += 1;
        }
    }
    summaries.push(StageSummary {
        stage,
        input: outcome.kept.len() + outcome.dropped.len(),
        kept: outcome.kept.len(),
        dropped: outcome.dropped.len(),
        reasons,
    });
}

/// Inputs of the cascade besides configuration.
pub struct CascadeInputs<'a> {
    pub graph: &'a CommitGraph,
    pub labeling: &'a VulnerabilityLabeling,
    pub origins: &'a Origins,
    pub vulns: &'a [Vulnerability],
    pub inspector: Option<&'a dyn RepositoryInspector>,
    pub diffs: Option<&'a BTreeMap<CommitId, Vec<u8>>>,
}

/// Popularity → scope → divergence (with an inspector) → equivalence (with
/// diffs).
pub fn run_cascade(inputs: &CascadeInputs<'_>, config: CascadeConfig) -> Result<CascadeResult> {
    let pairs = unpatched_heads(inputs.graph, inputs.labeling, inputs.origins)?;
    let input = pairs.len();
    let mut dropped = Vec::new();
    let mut stages = Vec::new();

    let out = filter_popularity(pairs, inputs.origins, config.min_stars, config.min_forks);
    record_stage(Stage::Popularity, &out, &mut stages);
    dropped.extend(out.dropped);

    let ctx =
        ScopeContext { graph: inputs.graph, labeling: inputs.labeling, origins: inputs.origins, vulns: inputs.vulns };
    let out = filter_scope(out.kept, &ctx, config.scope);
    record_stage(Stage::Scope, &out, &mut stages);
    dropped.extend(out.dropped);
    let mut kept = out.kept;

    let ranges: BTreeMap<RangeKey, &VulnRange> =
        inputs.vulns.iter().flat_map(|v| v.ranges.iter()).map(|r| (r.key(), r)).collect();
    if let Some(inspector) = inputs.inspector {
        let out = filter_divergence(kept, &ranges, inspector);
        record_stage(Stage::Divergence, &out, &mut stages);
        dropped.extend(out.dropped);
        kept = out.kept;
    }
    if let Some(diffs) = inputs.diffs {
        let out = filter_equivalence(kept, inputs.graph, inputs.origins, &ranges, diffs)?;
        record_stage(Stage::Equivalence, &out, &mut stages);
        dropped.extend(out.dropped);
        kept = out.kept;
    }

    let report = CascadeReport { input, stages, survivors: kept.len() };
    let mut all: Vec<PairRecord> = kept.iter().cloned().chain(dropped).collect();
    crate::forks::sort_pairs(&mut all);
    Ok(CascadeResult { pairs: all, survivors: kept, report })
}

/// Drops pairs whose head becomes clean once fork commits with the same
/// patch id as a fix are treated as fixes themselves.
///
/// Candidates are the head's history minus the upstream origin's history
/// (the origin whose URL matches the range repository, when known).
pub fn filter_equivalence(
    pairs: Vec<PairRecord>,
    graph: &CommitGraph,
    origins: &Origins,
    ranges: &BTreeMap<RangeKey, &VulnRange>,
    diffs: &BTreeMap<CommitId, Vec<u8>>,
) -> Result<StageOutcome> {
    let mut out = StageOutcome::default();
    let mut upstream_cache: BTreeMap<String, Option<Vec<bool>>> = BTreeMap::new();
    for mut pair in pairs {
        let key = pair.range_key();
        let range = *ranges.get(&key).ok_or_else(|| PipelineError::UnknownRange(key.clone()))?;
        let upstream = upstream_cache
            .entry(range.repo_url.clone())
            .or_insert_with(|| origins.membership_mask(graph, &range.repo_url).ok());
        let head = graph.require(&pair.head)?;
        let candidates = fork_only_commits(graph, head, upstream.as_deref(), diffs);
        let found = detect_equivalent_fix(&[range], diffs, candidates.iter().map(|c| (*c, diffs[c].as_slice())));
        let verdict = if found.skipped.len() == range.fixed.len() {
            StageVerdict { stage: Stage::Equivalence, passed: true, reason: Some("no-fix-diff".into()) }
        } else if found.matches.is_empty() {
            StageVerdict { stage: Stage::Equivalence, passed: true, reason: None }
        } else {
            let mut patched = range.clone();
            inject_fixes(&mut patched, found.matches.iter().map(|m| &m.commit));
            let still = propagate_range(graph, &patched)?.contains(&pair.head);
            if still {
                StageVerdict {
                    stage: Stage::Equivalence,
                    passed: true,
                    reason: Some("equivalent-fix-elsewhere".into()),
                }
            } else {
                let first = found.matches[0].commit;
                StageVerdict {
                    stage: Stage::Equivalence,
                    passed: false,
                    reason: Some(format!("equivalent-fix:{first}")),
                }
            }
        };
        let passed = verdict.passed;
        pair.verdicts.push(verdict);
        if passed {
            out.kept.push(pair);
        } else {
            out.dropped.push(pair);
        }
    }
    Ok(out)
}

fn fork_only_commits(
    graph: &CommitGraph,
    head: Node,
    upstream: Option<&[bool]>,
    diffs: &BTreeMap<CommitId, Vec<u8>>,
) -> BTreeSet<CommitId> {
    let mut seen: FxHashSet<Node> = FxHashSet::default();
    let mut stack = vec![head];
    let mut out = BTreeSet::new();
    while let Some(c) = stack.pop() {
        if upstream.is_some_and(|m| m[c.index()]) || !seen.insert(c) {
            continue;
        }
        let id = graph.id(c);
        if diffs.contains_key(&id) {
            out.insert(id);
        }
        stack.extend_from_slice(graph.parents(c));
    }
    out
}

/// Reads every `*.diffs` file of a directory, in name order.
pub fn read_diffs_dir(dir: &Path) -> Result<BTreeMap<CommitId, Vec<u8>>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_at(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "diffs"))
        .collect();
    files.sort();
    let mut out = BTreeMap::new();
    for f in files {
        let records =
            read_diffs(BufReader::new(open(&f)?)).map_err(|source| PipelineError::Diffs { path: f.clone(), source })?;
        for (commit, diff) in records {
            if out.insert(commit, diff).is_some() {
                return Err(PipelineError::DuplicateDiff { path: f, commit });
            }
        }
    }
    Ok(out)
}

pub fn analyze(
    state_dir: &Path,
    config: CascadeConfig,
    inspector: Option<&dyn RepositoryInspector>,
    diffs_dir: Option<&Path>,
) -> Result<CascadeResult> {
    let state = State::load(state_dir)?;
    let labeling = state.labeling()?;
    let diffs = diffs_dir.map(read_diffs_dir).transpose()?;
    let result = run_cascade(
        &CascadeInputs {
            graph: &state.graph,
            labeling: &labeling,
            origins: &state.origins,
            vulns: &state.vulns,
            inspector,
            diffs: diffs.as_ref(),
        },
        config,
    )?;
    write_jsonl(&state_dir.join(PAIRS), &result.pairs)?;
    write_json(&state_dir.join(CASCADE), &result.report)?;
    Ok(result)
}

/// Writes the store. Uses the analyzed pairs when present, otherwise every
/// unpatched head pair without verdicts.
pub fn export(state_dir: &Path, out: &Path) -> Result<VulnStore> {
    let state = State::load(state_dir)?;
    let labeling = state.labeling()?;
    let pairs_path = state_dir.join(PAIRS);
    let pairs = if pairs_path.exists() {
        read_jsonl(&pairs_path)?
    } else {
        unpatched_heads(&state.graph, &labeling, &state.origins)?
    };
    Ok(export_store(out, &state.graph, &labeling, &state.origins, &state.vulns, &pairs)?)
}

/// `YYYY-MM-DD` as seconds since the epoch at midnight UTC.
pub fn parse_date(s: &str) -> Result<i64> {
    let d = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| PipelineError::BadDate(s.to_string()))?;
    Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn date_parsing() {
        assert_eq!(parse_date("2023-01-01").unwrap(), 1_672_531_200);
        assert!(parse_date("2023-13-01").is_err());
    }

    #[test]
    fn report_reconciliation() {
        let stage = |input, kept| StageSummary {
            stage: Stage::Popularity,
            input,
            kept,
            dropped: input - kept,
            reasons: BTreeMap::new(),
        };
        let ok = CascadeReport { input: 10, stages: vec![stage(10, 6), stage(6, 2)], survivors: 2 };
        assert!(ok.reconciles());
        let bad = CascadeReport { input: 10, stages: vec![stage(10, 6), stage(5, 2)], survivors: 2 };
        assert!(!bad.reconciles());
    }
}
