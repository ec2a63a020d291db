//! Fork ecosystems, unpatched heads, and the high-impact filter cascade.
//!
//! Two origins are forks of each other as soon as their histories share one
//! commit; an ecosystem is the transitive closure of that relation. Pairs of
//! ⟨fork branch head, vulnerability range⟩ whose head is still vulnerable are
//! then pushed through popularity, scope and divergence stages. Every stage
//! appends exactly one verdict to each pair it sees and splits its input into
//! kept and dropped, so counts always reconcile.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::Command;

use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::graph::{CommitGraph, CommitId, Node};
use crate::osv::{severity_of, RangeKey, VulnRange, Vulnerability};
use crate::propagation::VulnerabilityLabeling;

#[derive(Debug, thiserror::Error)]
pub enum ForkError {
    #[error("origins line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("origin {url}: {message}")]
    Inconsistent { url: String, message: String },
    #[error("origin {url}: head {head} of branch {branch} is not in the commit graph")]
    UnknownHead { url: String, branch: String, head: CommitId },
    #[error("unknown origin {0}")]
    UnknownOrigin(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub name: String,
    pub head: CommitId,
    pub is_default: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginRecord {
    pub url: String,
    pub branches: Vec<Branch>,
    pub stars: Option<u64>,
    pub forks_count: Option<u64>,
    pub archived: bool,
    pub last_commit_date: Option<i64>,
}

impl OriginRecord {
    pub fn heads(&self) -> impl Iterator<Item = &CommitId> {
        self.branches.iter().map(|b| &b.head)
    }

    pub fn default_branch(&self) -> Option<&Branch> {
        self.branches.iter().find(|b| b.is_default)
    }

    pub fn branch(&self, name: &str) -> Option<&Branch> {
        self.branches.iter().find(|b| b.name == name)
    }
}

/// Origins keyed by URL, in URL order.
#[derive(Debug, Clone, Default)]
pub struct Origins {
    records: Vec<OriginRecord>,
}

impl Origins {
    pub fn new(mut records: Vec<OriginRecord>) -> Result<Self, ForkError> {
        records.sort_by(|a, b| a.url.cmp(&b.url));
        for w in records.windows(2) {
            if w[0].url == w[1].url {
                return Err(ForkError::Inconsistent { url: w[0].url.clone(), message: "listed twice".into() });
            }
        }
        for r in &mut records {
            r.branches.sort_by(|a, b| a.name.cmp(&b.name));
            if r.branches.iter().filter(|b| b.is_default).count() > 1 {
                return Err(ForkError::Inconsistent {
                    url: r.url.clone(),
                    message: "more than one default branch".into(),
                });
            }
            if r.branches.windows(2).any(|w| w[0].name == w[1].name) {
                return Err(ForkError::Inconsistent { url: r.url.clone(), message: "duplicate branch".into() });
            }
        }
        Ok(Origins { records })
    }

    pub fn records(&self) -> &[OriginRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn position(&self, url: &str) -> Option<usize> {
        self.records.binary_search_by(|r| r.url.as_str().cmp(url)).ok()
    }

    pub fn get(&self, url: &str) -> Option<&OriginRecord> {
        self.position(url).map(|i| &self.records[i])
    }

    /// Every branch head must be a commit of `graph`.
    pub fn validate(&self, graph: &CommitGraph) -> Result<(), ForkError> {
        for r in &self.records {
            for b in &r.branches {
                if !graph.contains(&b.head) {
                    return Err(ForkError::UnknownHead { url: r.url.clone(), branch: b.name.clone(), head: b.head });
                }
            }
        }
        Ok(())
    }

    fn head_nodes(&self, graph: &CommitGraph, origin: &OriginRecord) -> Result<Vec<Node>, ForkError> {
        origin
            .branches
            .iter()
            .map(|b| {
                graph.node(&b.head).ok_or_else(|| ForkError::UnknownHead {
                    url: origin.url.clone(),
                    branch: b.name.clone(),
                    head: b.head,
                })
            })
            .collect()
    }

    /// Commit membership of an origin as a dense mask.
    pub fn membership_mask(&self, graph: &CommitGraph, url: &str) -> Result<Vec<bool>, ForkError> {
        let origin = self.get(url).ok_or_else(|| ForkError::UnknownOrigin(url.to_string()))?;
        Ok(graph.ancestor_mask(&self.head_nodes(graph, origin)?, true))
    }

    pub fn membership(&self, graph: &CommitGraph, url: &str) -> Result<BTreeSet<CommitId>, ForkError> {
        let origin = self.get(url).ok_or_else(|| ForkError::UnknownOrigin(url.to_string()))?;
        graph.reachable_from_heads(origin.heads()).map_err(|_| ForkError::UnknownOrigin(url.to_string()))
    }

    /// Most recent activity: the recorded date, else the newest head commit time.
    pub fn last_activity(&self, graph: &CommitGraph, origin: &OriginRecord) -> Option<i64> {
        origin.last_commit_date.or_else(|| {
            let mut heads: Vec<Node> = origin.heads().filter_map(|h| graph.node(h)).collect();
            graph.sort_by_timestamp(&mut heads);
            heads.iter().filter_map(|n| graph.timestamp(*n)).next_back()
        })
    }
}

fn parse_flag(s: &str) -> Option<bool> {
    match s {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

fn parse_optional(s: &str) -> Option<Option<i64>> {
    let v: i64 = s.parse().ok()?;
    match v {
        -1 => Some(None),
        v if v >= 0 => Some(Some(v)),
        _ => None,
    }
}

/// Reads `origins.tsv`: one line per (origin, branch) with columns
/// url, branch, is_default, head, stars, forks_count, archived,
/// last_commit_date. `-1` marks unknown numbers.
pub fn parse_origins<R: BufRead>(reader: R) -> Result<Origins, ForkError> {
    let mut by_url: BTreeMap<String, OriginRecord> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: &str| ForkError::Malformed { line: line_no, message: message.to_string() };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(bad("expected 8 tab-separated fields"));
        }
        let is_default = parse_flag(f[2]).ok_or_else(|| bad("is_default must be 0 or 1"))?;
        let head = CommitId::parse(f[3]).map_err(|_| bad("bad head sha"))?;
        let stars = parse_optional(f[4]).ok_or_else(|| bad("bad stars"))?.map(|v| v as u64);
        let forks_count = parse_optional(f[5]).ok_or_else(|| bad("bad forks_count"))?.map(|v| v as u64);
        let archived = parse_flag(f[6]).ok_or_else(|| bad("archived must be 0 or 1"))?;
        let last_commit_date = parse_optional(f[7]).ok_or_else(|| bad("bad last_commit_date"))?;
        let branch = Branch { name: f[1].to_string(), head, is_default };
        match by_url.get_mut(f[0]) {
            Some(rec) => {
                if rec.stars != stars
                    || rec.forks_count != forks_count
                    || rec.archived != archived
                    || rec.last_commit_date != last_commit_date
                {
                    return Err(bad("origin metadata differs from an earlier line"));
                }
                rec.branches.push(branch);
            }
            None => {
                by_url.insert(
                    f[0].to_string(),
                    OriginRecord {
                        url: f[0].to_string(),
                        branches: vec![branch],
                        stars,
                        forks_count,
                        archived,
                        last_commit_date,
                    },
                );
            }
        }
    }
    Origins::new(by_url.into_values().collect())
}

/// Shared-commit evidence linking two origins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedCommit {
    pub a: String,
    pub b: String,
    pub commit: CommitId,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EcosystemPartition {
    /// sorted urls per group; groups sorted by first url
    pub groups: Vec<Vec<String>>,
    /// one shared commit for every union that merged two groups
    pub evidence: Vec<SharedCommit>,
}

impl EcosystemPartition {
    pub fn group_of(&self, url: &str) -> Option<&[String]> {
        self.groups.iter().find(|g| g.binary_search_by(|u| u.as_str().cmp(url)).is_ok()).map(Vec::as_slice)
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Groups origins into shared-commit fork ecosystems.
///
/// Each commit is claimed by the first origin whose history walk reaches it.
/// A later walk hitting a claimed commit unions with the owner and stops
/// there, since everything below that commit already belongs to the owner's
/// group. Total work is linear in the graph plus origin heads.
pub fn fork_ecosystems(graph: &CommitGraph, origins: &Origins) -> Result<EcosystemPartition, ForkError> {
    const NONE: u32 = u32::MAX;
    let records = origins.records();
    let mut owner = vec![NONE; graph.len()];
    let mut uf = UnionFind::new(records.len());
    let mut evidence = Vec::new();
    let mut stack: Vec<Node> = Vec::new();
    for (i, origin) in records.iter().enumerate() {
        stack.extend(origins.head_nodes(graph, origin)?);
        while let Some(c) = stack.pop() {
            match owner[c.index()] {
                NONE => {
                    owner[c.index()] = i as u32;
                    stack.extend_from_slice(graph.parents(c));
                }
                o if o as usize == i => {}
                o => {
                    if uf.union(i, o as usize) {
                        evidence.push(SharedCommit {
                            a: records[o as usize].url.clone(),
                            b: origin.url.clone(),
                            commit: graph.id(c),
                        });
                    }
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push(r.url.clone());
    }
    let mut groups: Vec<Vec<String>> = groups.into_values().collect();
    groups.sort();
    Ok(EcosystemPartition { groups, evidence })
}

/// Forks of `upstream_url` holding at least one labeled commit that the
/// upstream history does not contain.
pub fn impacted_forks(
    graph: &CommitGraph,
    labeling: &VulnerabilityLabeling,
    origins: &Origins,
    upstream_url: &str,
) -> Result<Vec<String>, ForkError> {
    let partition = fork_ecosystems(graph, origins)?;
    impacted_forks_in(graph, labeling, origins, &partition, upstream_url)
}

pub fn impacted_forks_in(
    graph: &CommitGraph,
    labeling: &VulnerabilityLabeling,
    origins: &Origins,
    partition: &EcosystemPartition,
    upstream_url: &str,
) -> Result<Vec<String>, ForkError> {
    let upstream = origins.membership_mask(graph, upstream_url)?;
    let group = partition.group_of(upstream_url).ok_or_else(|| ForkError::UnknownOrigin(upstream_url.to_string()))?;
    let mut out = Vec::new();
    for url in group.iter().filter(|u| *u != upstream_url) {
        let origin = origins.get(url).ok_or_else(|| ForkError::UnknownOrigin(url.clone()))?;
        let mut seen: FxHashSet<Node> = FxHashSet::default();
        let mut stack: Vec<Node> = origins.head_nodes(graph, origin)?;
        let mut hit = false;
        while let Some(c) = stack.pop() {
            if upstream[c.index()] || !seen.insert(c) {
                continue;
            }
            if labeling.is_labeled(c) {
                hit = true;
                break;
            }
            stack.extend_from_slice(graph.parents(c));
        }
        if hit {
            out.push(url.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Popularity,
    Scope,
    Divergence,
    Equivalence,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Popularity => "popularity",
            Stage::Scope => "scope",
            Stage::Divergence => "divergence",
            Stage::Equivalence => "equivalence",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageVerdict {
    pub stage: Stage,
    pub passed: bool,
    pub reason: Option<String>,
}

/// A ⟨fork branch head, vulnerability range⟩ candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub origin_url: String,
    pub branch: String,
    pub head: CommitId,
    pub vuln_id: String,
    pub range_index: usize,
    pub verdicts: Vec<StageVerdict>,
    /// Free-form reviewer annotations (e.g. a fix that points at a catch-all
    /// release commit). The cascade never reads or writes them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl PairRecord {
    pub fn range_key(&self) -> RangeKey {
        RangeKey { vuln_id: self.vuln_id.clone(), index: self.range_index }
    }

    fn sort_key(&self) -> (&str, &str, &str, usize) {
        (&self.origin_url, &self.vuln_id, &self.branch, self.range_index)
    }

    pub fn passed(&self, stage: Stage) -> bool {
        self.verdicts.iter().any(|v| v.stage == stage && v.passed)
    }

    pub fn failure(&self) -> Option<&StageVerdict> {
        self.verdicts.iter().find(|v| !v.passed)
    }
}

pub fn sort_pairs(pairs: &mut [PairRecord]) {
    pairs.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

/// One record per (origin, branch, range) whose head is vulnerable.
///
/// All branches are reported; restricting to default branches is left to
/// [`filter_scope`].
pub fn unpatched_heads(
    graph: &CommitGraph,
    labeling: &VulnerabilityLabeling,
    origins: &Origins,
) -> Result<Vec<PairRecord>, ForkError> {
    let mut pairs = Vec::new();
    for origin in origins.records() {
        for b in &origin.branches {
            let node = graph.node(&b.head).ok_or_else(|| ForkError::UnknownHead {
                url: origin.url.clone(),
                branch: b.name.clone(),
                head: b.head,
            })?;
            for key in labeling.ranges_of(node) {
                pairs.push(PairRecord {
                    origin_url: origin.url.clone(),
                    branch: b.name.clone(),
                    head: b.head,
                    vuln_id: key.vuln_id.clone(),
                    range_index: key.index,
                    verdicts: Vec::new(),
                    notes: Vec::new(),
                });
            }
        }
    }
    sort_pairs(&mut pairs);
    Ok(pairs)
}

/// Result of one cascade stage.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageOutcome {
    pub kept: Vec<PairRecord>,
    pub dropped: Vec<PairRecord>,
}

impl StageOutcome {
    fn push(&mut self, mut pair: PairRecord, stage: Stage, failure: Option<String>, note: Option<String>) {
        match failure {
            Some(reason) => {
                pair.verdicts.push(StageVerdict { stage, passed: false, reason: Some(reason) });
                self.dropped.push(pair);
            }
            None => {
                pair.verdicts.push(StageVerdict { stage, passed: true, reason: note });
                self.kept.push(pair);
            }
        }
    }
}

/// Keeps pairs whose origin has strictly more than `min_stars` stars and
/// `min_forks` forks. Unknown metadata fails with `no-metadata`.
pub fn filter_popularity(pairs: Vec<PairRecord>, origins: &Origins, min_stars: u64, min_forks: u64) -> StageOutcome {
    let mut out = StageOutcome::default();
    for pair in pairs {
        let failure = match origins.get(&pair.origin_url) {
            None => Some("no-metadata".to_string()),
            Some(o) => match (o.stars, o.forks_count) {
                (Some(s), Some(f)) if s > min_stars && f > min_forks => None,
                (Some(_), Some(_)) => Some("low-popularity".to_string()),
                _ => Some("no-metadata".to_string()),
            },
        };
        out.push(pair, Stage::Popularity, failure, None);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScopeConfig {
    /// inclusive CVSS gate
    pub min_severity: f64,
    /// origins whose last activity is strictly before this epoch are stale
    pub date_cutoff: i64,
}

impl Default for ScopeConfig {
    fn default() -> Self {
        // 2023-01-01T00:00:00Z
        ScopeConfig { min_severity: 7.0, date_cutoff: 1_672_531_200 }
    }
}

/// Everything [`filter_scope`] consults besides the pairs themselves.
pub struct ScopeContext<'a> {
    pub graph: &'a CommitGraph,
    pub labeling: &'a VulnerabilityLabeling,
    pub origins: &'a Origins,
    pub vulns: &'a [Vulnerability],
}

/// Severity, archived, default-branch, staleness and cross-reference checks,
/// applied in that order; the first failing check names the reason.
pub fn filter_scope(pairs: Vec<PairRecord>, ctx: &ScopeContext<'_>, config: ScopeConfig) -> StageOutcome {
    let vulns: BTreeMap<&str, &Vulnerability> = ctx.vulns.iter().map(|v| (v.id.as_str(), v)).collect();
    let mut out = StageOutcome::default();
    for pair in pairs {
        let failure = scope_failure(&pair, ctx, &vulns, config);
        out.push(pair, Stage::Scope, failure, None);
    }
    out
}

fn scope_failure(
    pair: &PairRecord,
    ctx: &ScopeContext<'_>,
    vulns: &BTreeMap<&str, &Vulnerability>,
    config: ScopeConfig,
) -> Option<String> {
    let vuln = vulns.get(pair.vuln_id.as_str());
    match vuln.and_then(|v| severity_of(v)) {
        None => return Some("no-severity".into()),
        Some(s) if s.score < config.min_severity => return Some("low-severity".into()),
        Some(_) => {}
    }
    let Some(origin) = ctx.origins.get(&pair.origin_url) else {
        return Some("no-metadata".into());
    };
    if origin.archived {
        return Some("archived".into());
    }
    if !origin.branch(&pair.branch).is_some_and(|b| b.is_default) {
        return Some("non-default-branch".into());
    }
    match ctx.origins.last_activity(ctx.graph, origin) {
        None => return Some("no-date".into()),
        Some(d) if d < config.date_cutoff => return Some("stale".into()),
        Some(_) => {}
    }
    let vuln = vuln.expect("severity check passed");
    if let Some(sibling) = cross_reference(pair, ctx, &vuln.ranges) {
        return Some(format!("cross-referenced:{sibling}"));
    }
    None
}

/// A sibling range of the same vulnerability whose introductions reach the
/// head while leaving it patched.
fn cross_reference(pair: &PairRecord, ctx: &ScopeContext<'_>, ranges: &[VulnRange]) -> Option<RangeKey> {
    let siblings: Vec<&VulnRange> = ranges.iter().filter(|r| r.index != pair.range_index).collect();
    if siblings.is_empty() {
        return None;
    }
    let head = ctx.graph.node(&pair.head)?;
    let history = ctx.graph.ancestor_mask(&[head], true);
    siblings.into_iter().find_map(|r| {
        let covers = r.intro.iter().filter_map(|c| ctx.graph.node(c)).any(|n| history[n.index()]);
        (covers && !ctx.labeling.is_vulnerable(head, &r.key())).then(|| r.key())
    })
}

/// A path touched by a fix, with its pre-rename name when known.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TouchedPath {
    pub path: String,
    pub renamed_from: Option<String>,
}

impl TouchedPath {
    pub fn new(path: impl Into<String>) -> Self {
        TouchedPath { path: path.into(), renamed_from: None }
    }

    /// Present when either name exists in the tree (single-hop rename).
    pub fn present_in(&self, tree: &BTreeSet<String>) -> bool {
        tree.contains(&self.path) || self.renamed_from.as_ref().is_some_and(|old| tree.contains(old))
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InspectError(pub String);

/// Source of fix-commit touched paths and fork head trees.
///
/// Implementations are queried from one thread at a time.
pub trait RepositoryInspector {
    fn touched_paths(&self, commit: &CommitId) -> Result<Vec<TouchedPath>, InspectError>;
    fn head_paths(&self, origin_url: &str, head: &CommitId) -> Result<BTreeSet<String>, InspectError>;
}

/// Pre-exported manifests under one directory:
///
/// * `trees/<head sha>.txt` lists every path of a head tree, one per line;
/// * `fixes/<fix sha>.txt` lists touched paths, with renames written as
///   `old -> new` (or `old → new`).
#[derive(Debug, Clone)]
pub struct ManifestInspector {
    root: PathBuf,
}

impl ManifestInspector {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ManifestInspector { root: root.into() }
    }

    fn read_lines(path: &Path) -> Result<Vec<String>, InspectError> {
        let text = std::fs::read_to_string(path).map_err(|e| InspectError(format!("{}: {e}", path.display())))?;
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
    }
}

pub fn parse_touched_line(line: &str) -> TouchedPath {
    for sep in [" -> ", " → "] {
        if let Some((old, new)) = line.split_once(sep) {
            return TouchedPath { path: new.trim().to_string(), renamed_from: Some(old.trim().to_string()) };
        }
    }
    TouchedPath::new(line.trim())
}

impl RepositoryInspector for ManifestInspector {
    fn touched_paths(&self, commit: &CommitId) -> Result<Vec<TouchedPath>, InspectError> {
        let lines = Self::read_lines(&self.root.join("fixes").join(format!("{commit}.txt")))?;
        Ok(lines.iter().map(|l| parse_touched_line(l)).collect())
    }

    fn head_paths(&self, _origin_url: &str, head: &CommitId) -> Result<BTreeSet<String>, InspectError> {
        Ok(Self::read_lines(&self.root.join("trees").join(format!("{head}.txt")))?.into_iter().collect())
    }
}

/// Inspects a local clone holding both the fix commits and the fork heads,
/// by running `git` against it.
#[derive(Debug, Clone)]
pub struct GitInspector {
    repo: PathBuf,
}

impl GitInspector {
    pub fn new(repo: impl Into<PathBuf>) -> Self {
        GitInspector { repo: repo.into() }
    }

    fn git(&self, args: &[&str]) -> Result<String, InspectError> {
        let out = Command::new("git")
            .arg("-C")
            .arg(&self.repo)
            .args(args)
            .output()
            .map_err(|e| InspectError(format!("running git: {e}")))?;
        if !out.status.success() {
            return Err(InspectError(String::from_utf8_lossy(&out.stderr).trim().to_string()));
        }
        String::from_utf8(out.stdout).map_err(|e| InspectError(e.to_string()))
    }
}

impl RepositoryInspector for GitInspector {
    fn touched_paths(&self, commit: &CommitId) -> Result<Vec<TouchedPath>, InspectError> {
        let sha = commit.to_string();
        let text = self.git(&[
            "diff-tree",
            "--no-commit-id",
            "-r",
            "-M",
            "--name-status",
            "--root",
            "-m",
            "--first-parent",
            &sha,
        ])?;
        let mut out = Vec::new();
        for line in text.lines() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                [status, old, new] if status.starts_with('R') => {
                    out.push(TouchedPath { path: new.to_string(), renamed_from: Some(old.to_string()) })
                }
                [_, path, ..] => out.push(TouchedPath::new(*path)),
                _ => {}
            }
        }
        Ok(out)
    }

    fn head_paths(&self, _origin_url: &str, head: &CommitId) -> Result<BTreeSet<String>, InspectError> {
        let text = self.git(&["ls-tree", "-r", "--name-only", &head.to_string()])?;
        Ok(text.lines().map(str::to_string).collect())
    }
}

/// Drops a pair when any path touched by the range's fixed commits is
/// missing from the fork head tree. Inspector failures keep the pair and
/// mark it `inspect-error`.
pub fn filter_divergence(
    pairs: Vec<PairRecord>,
    ranges: &BTreeMap<RangeKey, &VulnRange>,
    inspector: &dyn RepositoryInspector,
) -> StageOutcome {
    let mut out = StageOutcome::default();
    for pair in pairs {
        match divergence_check(&pair, ranges, inspector) {
            Ok(None) => out.push(pair, Stage::Divergence, None, None),
            Ok(Some(path)) => out.push(pair, Stage::Divergence, Some(format!("divergent:{path}")), None),
            Err(e) => {
                log::warn!("{} {}: inspection failed: {e}", pair.origin_url, pair.range_key());
                out.push(pair, Stage::Divergence, None, Some("inspect-error".into()));
            }
        }
    }
    out
}

fn divergence_check(
    pair: &PairRecord,
    ranges: &BTreeMap<RangeKey, &VulnRange>,
    inspector: &dyn RepositoryInspector,
) -> Result<Option<String>, InspectError> {
    let range =
        ranges.get(&pair.range_key()).ok_or_else(|| InspectError(format!("unknown range {}", pair.range_key())))?;
    // Fixes injected from cherry-pick trailers often live only in forks, so
    // one readable fix is enough.
    let mut touched = BTreeSet::new();
    let mut last_err = None;
    let mut inspected = 0;
    for fix in &range.fixed {
        match inspector.touched_paths(fix) {
            Ok(paths) => {
                inspected += 1;
                touched.extend(paths);
            }
            Err(e) => last_err = Some(e),
        }
    }
    if let (0, Some(e)) = (inspected, last_err) {
        return Err(e);
    }
    if touched.is_empty() {
        return Ok(None);
    }
    let tree = inspector.head_paths(&pair.origin_url, &pair.head)?;
    Ok(touched.into_iter().find(|t| !t.present_in(&tree)).map(|t| t.path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CommitNode;

    fn cid(n: u32) -> CommitId {
        let mut b = [0u8; 20];
        b[16..].copy_from_slice(&n.to_be_bytes());
        CommitId::from_bytes(b)
    }

    fn origin(url: &str, heads: &[(&str, u32, bool)]) -> OriginRecord {
        OriginRecord {
            url: url.into(),
            branches: heads
                .iter()
                .map(|(n, h, d)| Branch { name: n.to_string(), head: cid(*h), is_default: *d })
                .collect(),
            stars: Some(500),
            forks_count: Some(50),
            archived: false,
            last_commit_date: Some(1_700_000_000),
        }
    }

    fn pair(url: &str, branch: &str, head: u32, vuln: &str) -> PairRecord {
        PairRecord {
            origin_url: url.into(),
            branch: branch.into(),
            head: cid(head),
            vuln_id: vuln.into(),
            range_index: 0,
            verdicts: vec![],
            notes: vec![],
        }
    }

    #[test]
    fn parse_origins_file() {
        let text = format!(
            "# url\tbranch\t...\nhttps://a\tmain\t1\t{}\t150\t12\t0\t1700000000\nhttps://a\tdev\t0\t{}\t150\t12\t0\t1700000000\nhttps://b\tmain\t1\t{}\t-1\t-1\t1\t-1\n",
            cid(1),
            cid(2),
            cid(3)
        );
        let o = parse_origins(text.as_bytes()).unwrap();
        assert_eq!(o.len(), 2);
        let a = o.get("https://a").unwrap();
        assert_eq!(a.branches.len(), 2);
        assert_eq!(a.default_branch().unwrap().name, "main");
        let b = o.get("https://b").unwrap();
        assert_eq!((b.stars, b.forks_count, b.archived, b.last_commit_date), (None, None, true, None));
    }

    #[test]
    fn parse_origins_rejects_bad_lines() {
        let two_defaults = format!("u\tmain\t1\t{}\t1\t1\t0\t1\nu\tdev\t1\t{}\t1\t1\t0\t1\n", cid(1), cid(2));
        assert!(matches!(parse_origins(two_defaults.as_bytes()), Err(ForkError::Inconsistent { .. })));
        let short = "u\tmain\t1\n";
        assert!(matches!(parse_origins(short.as_bytes()), Err(ForkError::Malformed { line: 1, .. })));
        let conflicting = format!("u\tmain\t1\t{}\t1\t1\t0\t1\nu\tdev\t0\t{}\t2\t1\t0\t1\n", cid(1), cid(2));
        assert!(matches!(parse_origins(conflicting.as_bytes()), Err(ForkError::Malformed { line: 2, .. })));
    }

    #[test]
    fn ecosystems_identical_and_disjoint() {
        let g = CommitGraph::from_nodes(&[CommitNode::root(cid(0)), CommitNode::root(cid(9))]).unwrap();
        let o = Origins::new(vec![origin("a", &[("m", 0, true)]), origin("b", &[("m", 0, true)])]).unwrap();
        let p = fork_ecosystems(&g, &o).unwrap();
        assert_eq!(p.groups, vec![vec!["a".to_string(), "b".to_string()]]);
        assert_eq!(p.evidence, vec![SharedCommit { a: "a".into(), b: "b".into(), commit: cid(0) }]);

        let o = Origins::new(vec![origin("a", &[("m", 0, true)]), origin("b", &[("m", 9, true)])]).unwrap();
        let p = fork_ecosystems(&g, &o).unwrap();
        assert_eq!(p.groups.len(), 2);
        assert!(p.evidence.is_empty());
    }

    #[test]
    fn ecosystems_unknown_head() {
        let g = CommitGraph::from_nodes(&[CommitNode::root(cid(0))]).unwrap();
        let o = Origins::new(vec![origin("a", &[("m", 5, true)])]).unwrap();
        assert!(matches!(fork_ecosystems(&g, &o), Err(ForkError::UnknownHead { .. })));
        assert!(o.validate(&g).is_err());
    }

    #[test]
    fn popularity_is_strict() {
        let mut o1 = origin("a", &[("m", 0, true)]);
        o1.stars = Some(101);
        o1.forks_count = Some(11);
        let mut o2 = origin("b", &[("m", 0, true)]);
        o2.stars = Some(100);
        o2.forks_count = Some(11);
        let mut o3 = origin("c", &[("m", 0, true)]);
        o3.stars = None;
        let origins = Origins::new(vec![o1, o2, o3]).unwrap();
        let out = filter_popularity(
            vec![pair("a", "m", 0, "V"), pair("b", "m", 0, "V"), pair("c", "m", 0, "V")],
            &origins,
            100,
            10,
        );
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].origin_url, "a");
        let reasons: Vec<_> = out.dropped.iter().map(|p| p.verdicts[0].reason.clone().unwrap()).collect();
        assert_eq!(reasons, vec!["low-popularity", "no-metadata"]);
    }

    struct FakeInspector {
        fixes: BTreeMap<CommitId, Vec<TouchedPath>>,
        tree: BTreeSet<String>,
    }

    impl RepositoryInspector for FakeInspector {
        fn touched_paths(&self, commit: &CommitId) -> Result<Vec<TouchedPath>, InspectError> {
            self.fixes.get(commit).cloned().ok_or_else(|| InspectError("no diff".into()))
        }
        fn head_paths(&self, _: &str, _: &CommitId) -> Result<BTreeSet<String>, InspectError> {
            Ok(self.tree.clone())
        }
    }

    #[test]
    fn divergence_cases() {
        let mut range = VulnRange::new("V", 0, "u");
        range.intro.insert(cid(0));
        range.fixed.insert(cid(1));
        let ranges: BTreeMap<RangeKey, &VulnRange> = [(range.key(), &range)].into();
        let tree: BTreeSet<String> = ["src/a.c", "src/new.c"].iter().map(|s| s.to_string()).collect();
        let check = |touched: Vec<TouchedPath>| {
            let insp = FakeInspector { fixes: [(cid(1), touched)].into(), tree: tree.clone() };
            filter_divergence(vec![pair("f", "m", 3, "V")], &ranges, &insp)
        };
        let deleted = check(vec![TouchedPath::new("src/a.c"), TouchedPath::new("src/gone.c")]);
        assert_eq!(deleted.dropped.len(), 1);
        assert_eq!(deleted.dropped[0].verdicts[0].reason.as_deref(), Some("divergent:src/gone.c"));
        assert_eq!(check(vec![TouchedPath::new("src/a.c")]).kept.len(), 1);
        let renamed = check(vec![parse_touched_line("src/old.c -> src/new.c")]);
        assert_eq!(renamed.kept.len(), 1);

        let broken = FakeInspector { fixes: BTreeMap::new(), tree };
        let out = filter_divergence(vec![pair("f", "m", 3, "V")], &ranges, &broken);
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].verdicts[0].reason.as_deref(), Some("inspect-error"));
    }

    #[test]
    fn touched_line_parsing() {
        assert_eq!(parse_touched_line("a/b.c"), TouchedPath::new("a/b.c"));
        let r = parse_touched_line("old.c → new.c");
        assert_eq!(r.path, "new.c");
        assert_eq!(r.renamed_from.as_deref(), Some("old.c"));
    }
}
