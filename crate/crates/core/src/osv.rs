//! Advisory ingestion: parse OSV-style records, keep Git ranges, and prepare
//! them for propagation.
//!
//! Preparation runs in this order:
//! 1. [`expand_zero_intro`] replaces an `introduced: "0"` event by the root
//!    commits of the range's repository;
//! 2. [`clean_ranges`] drops ranges whose events collide or name commits
//!    missing from the graph;
//! 3. [`augment_cherry_picks`] adds commits whose message trailer records
//!    them as a cherry-pick of an event commit.
//!
//! A rejected range is always rejected whole; no event is repaired in place.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::graph::{CommitGraph, CommitId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Introduced,
    Fixed,
    Limit,
    LastAffected,
}

impl EventKind {
    pub const ALL: [EventKind; 4] =
        [EventKind::Introduced, EventKind::Fixed, EventKind::Limit, EventKind::LastAffected];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Introduced => "introduced",
            EventKind::Fixed => "fixed",
            EventKind::Limit => "limit",
            EventKind::LastAffected => "last_affected",
        }
    }
}

/// The commit an event points at; `"0"` is only meaningful for introductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventCommit {
    Zero,
    Commit(CommitId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VulnEvent {
    pub kind: EventKind,
    pub commit: EventCommit,
}

impl VulnEvent {
    /// Validates the raw event value. Uppercase hex is accepted and lowered.
    pub fn parse(kind: EventKind, raw: &str) -> Result<Self, RejectReason> {
        if raw == "0" {
            return match kind {
                EventKind::Introduced => Ok(VulnEvent { kind, commit: EventCommit::Zero }),
                _ => Err(RejectReason::BadSha),
            };
        }
        CommitId::parse(&raw.to_ascii_lowercase())
            .map(|c| VulnEvent { kind, commit: EventCommit::Commit(c) })
            .map_err(|_| RejectReason::BadSha)
    }
}

/// One Git range of an advisory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnRange {
    pub vuln_id: String,
    /// Position among the advisory's Git ranges as parsed; stable across cleaning.
    pub index: usize,
    pub repo_url: String,
    #[serde(default)]
    pub intro_zero: bool,
    pub intro: BTreeSet<CommitId>,
    pub fixed: BTreeSet<CommitId>,
    pub limit: BTreeSet<CommitId>,
    pub last: BTreeSet<CommitId>,
}

impl VulnRange {
    pub fn new(vuln_id: impl Into<String>, index: usize, repo_url: impl Into<String>) -> Self {
        VulnRange {
            vuln_id: vuln_id.into(),
            index,
            repo_url: repo_url.into(),
            intro_zero: false,
            intro: BTreeSet::new(),
            fixed: BTreeSet::new(),
            limit: BTreeSet::new(),
            last: BTreeSet::new(),
        }
    }

    pub fn key(&self) -> RangeKey {
        RangeKey { vuln_id: self.vuln_id.clone(), index: self.index }
    }

    pub fn events(&self, kind: EventKind) -> &BTreeSet<CommitId> {
        match kind {
            EventKind::Introduced => &self.intro,
            EventKind::Fixed => &self.fixed,
            EventKind::Limit => &self.limit,
            EventKind::LastAffected => &self.last,
        }
    }

    pub fn events_mut(&mut self, kind: EventKind) -> &mut BTreeSet<CommitId> {
        match kind {
            EventKind::Introduced => &mut self.intro,
            EventKind::Fixed => &mut self.fixed,
            EventKind::Limit => &mut self.limit,
            EventKind::LastAffected => &mut self.last,
        }
    }

    pub fn add_event(&mut self, event: VulnEvent) {
        match event.commit {
            EventCommit::Zero => self.intro_zero = true,
            EventCommit::Commit(c) => {
                self.events_mut(event.kind).insert(c);
            }
        }
    }

    pub fn all_commits(&self) -> impl Iterator<Item = (EventKind, &CommitId)> {
        EventKind::ALL.into_iter().flat_map(move |k| self.events(k).iter().map(move |c| (k, c)))
    }

    /// First commit found under two different event kinds.
    pub fn overlapping_commit(&self) -> Option<CommitId> {
        let mut seen = BTreeSet::new();
        self.all_commits().find(|(_, c)| !seen.insert(**c)).map(|(_, c)| *c)
    }
}

/// Identifies one range across the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RangeKey {
    pub vuln_id: String,
    pub index: usize,
}

impl fmt::Display for RangeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.vuln_id, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityEntry {
    pub kind: String,
    pub score: Option<f64>,
    /// Field path in the record, e.g. `severity[1].score`.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vulnerability {
    pub id: String,
    pub ranges: Vec<VulnRange>,
    #[serde(default)]
    pub severity: Vec<SeverityEntry>,
}

/// A resolved severity score together with the entry that supplied it.
#[derive(Debug, Clone, PartialEq)]
pub struct Severity {
    pub score: f64,
    pub source: String,
}

/// Maximum parsable score across the record's severity entries.
pub fn severity_of(v: &Vulnerability) -> Option<Severity> {
    v.severity.iter().filter_map(|e| e.score.filter(|s| (0.0..=10.0).contains(s)).map(|s| (s, &e.source))).fold(
        None,
        |best: Option<Severity>, (score, source)| match best {
            Some(b) if b.score >= score => Some(b),
            _ => Some(Severity { score, source: source.clone() }),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectReason {
    #[serde(rename = "bad-sha")]
    BadSha,
    #[serde(rename = "dup-event")]
    DupEvent,
    #[serde(rename = "missing-commit")]
    MissingCommit,
    #[serde(rename = "unknown-repo")]
    UnknownRepo,
    #[serde(rename = "no-roots")]
    NoRoots,
    #[serde(rename = "cherry-conflict")]
    CherryConflict,
    #[serde(rename = "no-intro")]
    NoIntro,
}

impl RejectReason {
    pub fn code(self) -> &'static str {
        match self {
            RejectReason::BadSha => "bad-sha",
            RejectReason::DupEvent => "dup-event",
            RejectReason::MissingCommit => "missing-commit",
            RejectReason::UnknownRepo => "unknown-repo",
            RejectReason::NoRoots => "no-roots",
            RejectReason::CherryConflict => "cherry-conflict",
            RejectReason::NoIntro => "no-intro",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rejection {
    pub vuln_id: String,
    pub range_index: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
}

impl CleaningReport {
    pub fn input_ranges(&self) -> usize {
        self.accepted + self.rejected.len()
    }

    pub fn count(&self, reason: RejectReason) -> usize {
        self.rejected.iter().filter(|r| r.reason == reason).count()
    }

    fn reject(&mut self, range: &VulnRange, reason: RejectReason) {
        self.rejected.push(Rejection { vuln_id: range.vuln_id.clone(), range_index: range.index, reason });
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub vulnerabilities: Vec<Vulnerability>,
    /// Git ranges dropped during parsing (malformed event commits).
    pub rejected: Vec<Rejection>,
    /// Records that could not be read at all: (line number, message).
    pub skipped: Vec<(usize, String)>,
}

// Wire format: a strict subset of the public OSV schema.
#[derive(Deserialize)]
struct RawRecord {
    id: String,
    #[serde(default)]
    affected: Vec<RawAffected>,
    #[serde(default)]
    severity: Vec<RawSeverity>,
}

#[derive(Deserialize)]
struct RawAffected {
    #[serde(default)]
    ranges: Vec<RawRange>,
}

#[derive(Deserialize)]
struct RawRange {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    repo: Option<String>,
    #[serde(default)]
    events: Vec<BTreeMap<String, String>>,
}

#[derive(Deserialize)]
struct RawSeverity {
    #[serde(rename = "type", default)]
    kind: String,
    #[serde(default)]
    score: serde_json::Value,
}

fn numeric_score(v: &serde_json::Value) -> Option<f64> {
    match v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn event_kind(key: &str) -> Option<EventKind> {
    match key {
        "introduced" => Some(EventKind::Introduced),
        "fixed" => Some(EventKind::Fixed),
        "limit" => Some(EventKind::Limit),
        "last_affected" => Some(EventKind::LastAffected),
        _ => None,
    }
}

/// Parses newline-delimited advisory records.
///
/// Only ranges of type `GIT` are kept, numbered in record order. Advisories
/// with no `GIT` range are dropped. Unreadable records are skipped and
/// reported in [`ParseOutcome::skipped`].
pub fn parse_vulnerabilities<R: BufRead>(reader: R) -> std::io::Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("advisory line {line_no}: skipping unreadable record: {e}");
                out.skipped.push((line_no, e.to_string()));
                continue;
            }
        };
        let severity = record
            .severity
            .iter()
            .enumerate()
            .map(|(j, s)| SeverityEntry {
                kind: s.kind.clone(),
                score: numeric_score(&s.score),
                source: format!("severity[{j}].score"),
            })
            .collect();
        let mut vuln = Vulnerability { id: record.id.clone(), ranges: Vec::new(), severity };
        let mut git_ranges = 0usize;
        for raw in record.affected.iter().flat_map(|a| a.ranges.iter()) {
            if !raw.kind.eq_ignore_ascii_case("GIT") {
                continue;
            }
            let index = git_ranges;
            git_ranges += 1;
            let mut range = VulnRange::new(&record.id, index, raw.repo.clone().unwrap_or_default());
            let mut bad = false;
            for ev in &raw.events {
                for (key, value) in ev {
                    let Some(kind) = event_kind(key) else {
                        log::warn!("{}: ignoring unknown event kind {key:?}", record.id);
                        continue;
                    };
                    match VulnEvent::parse(kind, value) {
                        Ok(e) => range.add_event(e),
                        Err(_) => bad = true,
                    }
                }
            }
            let reason = if bad {
                Some(RejectReason::BadSha)
            } else if range.intro.is_empty() && !range.intro_zero {
                Some(RejectReason::NoIntro)
            } else {
                None
            };
            if let Some(reason) = reason {
                out.rejected.push(Rejection { vuln_id: record.id.clone(), range_index: index, reason });
            } else {
                vuln.ranges.push(range);
            }
        }
        if git_ranges > 0 {
            out.vulnerabilities.push(vuln);
        }
    }
    Ok(out)
}

/// Rejects ranges with an event commit under two kinds or missing from `graph`.
pub fn clean_ranges(vulns: Vec<Vulnerability>, graph: &CommitGraph) -> (Vec<Vulnerability>, CleaningReport) {
    let mut report = CleaningReport::default();
    let mut out = Vec::with_capacity(vulns.len());
    for mut v in vulns {
        v.ranges.retain(|r| {
            if r.overlapping_commit().is_some() {
                report.reject(r, RejectReason::DupEvent);
                false
            } else if r.all_commits().any(|(_, c)| !graph.contains(c)) {
                report.reject(r, RejectReason::MissingCommit);
                false
            } else {
                report.accepted += 1;
                true
            }
        });
        out.push(v);
    }
    (out, report)
}

/// Replaces the `"0"` introduction by the parentless commits of the
/// repository history. Ranges without `"0"` are returned unchanged.
pub fn expand_zero_intro(
    range: VulnRange,
    graph: &CommitGraph,
    repo_membership: &BTreeSet<CommitId>,
) -> Result<VulnRange, RejectReason> {
    if !range.intro_zero {
        return Ok(range);
    }
    let roots = graph.roots_within(repo_membership);
    if roots.is_empty() {
        return Err(RejectReason::NoRoots);
    }
    let mut range = range;
    range.intro_zero = false;
    range.intro.extend(roots);
    Ok(range)
}

/// Statistics from one augmentation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugmentStats {
    pub added: usize,
    /// Worklist pops; bounded by the number of commits in the graph.
    pub iterations: usize,
}

/// Adds cherry-picks of event commits to the same event set, to a fixpoint.
pub fn augment_cherry_picks(range: VulnRange, graph: &CommitGraph) -> Result<VulnRange, RejectReason> {
    augment_cherry_picks_with_stats(range, graph).map(|(r, _)| r)
}

pub fn augment_cherry_picks_with_stats(
    mut range: VulnRange,
    graph: &CommitGraph,
) -> Result<(VulnRange, AugmentStats), RejectReason> {
    let mut stats = AugmentStats::default();
    for kind in EventKind::ALL {
        let mut queue: VecDeque<CommitId> = range.events(kind).iter().copied().collect();
        while let Some(src) = queue.pop_front() {
            stats.iterations += 1;
            for &picker in graph.cherry_picks_of(&src) {
                let id = graph.id(picker);
                if range.events_mut(kind).insert(id) {
                    stats.added += 1;
                    queue.push_back(id);
                }
            }
        }
    }
    if range.overlapping_commit().is_some() {
        return Err(RejectReason::CherryConflict);
    }
    Ok((range, stats))
}

/// Full preparation of parsed advisories against a graph.
///
/// `membership_of` maps a repository URL to its commit membership; `None`
/// marks a repository that is not part of the known origins.
pub fn prepare(
    parsed: ParseOutcome,
    graph: &CommitGraph,
    mut membership_of: impl FnMut(&str) -> Option<BTreeSet<CommitId>>,
) -> (Vec<Vulnerability>, CleaningReport) {
    let mut report = CleaningReport { accepted: 0, rejected: parsed.rejected };
    let mut expanded = Vec::with_capacity(parsed.vulnerabilities.len());
    for mut v in parsed.vulnerabilities {
        let mut kept = Vec::with_capacity(v.ranges.len());
        for r in v.ranges {
            if !r.intro_zero {
                kept.push(r);
                continue;
            }
            let Some(membership) = membership_of(&r.repo_url) else {
                report.reject(&r, RejectReason::UnknownRepo);
                continue;
            };
            match expand_zero_intro(r.clone(), graph, &membership) {
                Ok(r) => kept.push(r),
                Err(reason) => report.reject(&r, reason),
            }
        }
        v.ranges = kept;
        expanded.push(v);
    }
    let (cleaned, clean_report) = clean_ranges(expanded, graph);
    report.rejected.extend(clean_report.rejected);
    let mut out = Vec::with_capacity(cleaned.len());
    for mut v in cleaned {
        let mut kept = Vec::with_capacity(v.ranges.len());
        for r in v.ranges {
            match augment_cherry_picks(r.clone(), graph) {
                Ok(r) => {
                    report.accepted += 1;
                    kept.push(r);
                }
                Err(reason) => report.reject(&r, reason),
            }
        }
        v.ranges = kept;
        if !v.ranges.is_empty() {
            out.push(v);
        }
    }
    report.rejected.sort();
    (out, report)
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

    fn chain(n: u32) -> CommitGraph {
        let nodes: Vec<CommitNode> = (0..n)
            .map(|i| if i == 0 { CommitNode::root(cid(0)) } else { CommitNode::with_parents(cid(i), [cid(i - 1)]) })
            .collect();
        CommitGraph::from_nodes(&nodes).unwrap()
    }

    #[test]
    fn event_zero_only_for_introduced() {
        assert_eq!(VulnEvent::parse(EventKind::Introduced, "0").unwrap().commit, EventCommit::Zero);
        assert_eq!(VulnEvent::parse(EventKind::Fixed, "0"), Err(RejectReason::BadSha));
        assert_eq!(VulnEvent::parse(EventKind::Fixed, "abc"), Err(RejectReason::BadSha));
        let upper = "F052389A634DEBD148E820D6BF88B5A77FE670D7";
        let e = VulnEvent::parse(EventKind::Limit, upper).unwrap();
        assert_eq!(e.commit, EventCommit::Commit(CommitId::parse(&upper.to_lowercase()).unwrap()));
    }

    #[test]
    fn parse_keeps_only_git_ranges() {
        let input = format!(
            concat!(
                r#"{{"id":"CVE-1","affected":[{{"ranges":[{{"type":"SEMVER","events":[{{"introduced":"0"}},{{"fixed":"1.2.3"}}]}},"#,
                r#"{{"type":"GIT","repo":"https://x/r","events":[{{"introduced":"{}"}},{{"fixed":"{}"}}]}}]}}],"#,
                r#""severity":[{{"type":"CVSS_V3","score":5.0}},{{"type":"CVSS_V3","score":"9.8"}}]}}"#,
                "\n",
                r#"{{"id":"CVE-2","affected":[{{"ranges":[{{"type":"ECOSYSTEM","events":[{{"introduced":"0"}}]}}]}}]}}"#,
                "\n\n",
                "not json\n"
            ),
            cid(1),
            cid(2)
        );
        let out = parse_vulnerabilities(input.as_bytes()).unwrap();
        assert_eq!(out.vulnerabilities.len(), 1);
        let v = &out.vulnerabilities[0];
        assert_eq!(v.ranges.len(), 1);
        assert_eq!(v.ranges[0].index, 0);
        assert_eq!(v.ranges[0].intro, BTreeSet::from([cid(1)]));
        assert_eq!(v.ranges[0].fixed, BTreeSet::from([cid(2)]));
        let s = severity_of(v).unwrap();
        assert_eq!(s.score, 9.8);
        assert_eq!(s.source, "severity[1].score");
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].0, 4);
    }

    #[test]
    fn parse_empty_stream() {
        let out = parse_vulnerabilities(&b""[..]).unwrap();
        assert!(out.vulnerabilities.is_empty() && out.skipped.is_empty());
    }

    #[test]
    fn bad_sha_rejects_range() {
        let input = r#"{"id":"X","affected":[{"ranges":[{"type":"GIT","repo":"r","events":[{"introduced":"0"},{"fixed":"deadbeef"}]}]}]}"#;
        let out = parse_vulnerabilities(input.as_bytes()).unwrap();
        assert_eq!(out.vulnerabilities.len(), 1);
        assert!(out.vulnerabilities[0].ranges.is_empty());
        assert_eq!(out.rejected, vec![Rejection { vuln_id: "X".into(), range_index: 0, reason: RejectReason::BadSha }]);
    }

    #[test]
    fn severity_absent_or_vector_only() {
        let v = Vulnerability { id: "a".into(), ranges: vec![], severity: vec![] };
        assert!(severity_of(&v).is_none());
        let v = Vulnerability {
            id: "a".into(),
            ranges: vec![],
            severity: vec![SeverityEntry { kind: "CVSS_V3".into(), score: None, source: "severity[0].score".into() }],
        };
        assert!(severity_of(&v).is_none());
        let v = Vulnerability {
            id: "a".into(),
            ranges: vec![],
            severity: vec![SeverityEntry { kind: "x".into(), score: Some(11.0), source: "s".into() }],
        };
        assert!(severity_of(&v).is_none());
    }

    #[test]
    fn clean_rejects_dup_and_missing() {
        let g = chain(3);
        let mut dup = VulnRange::new("V", 0, "r");
        dup.intro.insert(cid(1));
        dup.fixed.insert(cid(1));
        let mut missing = VulnRange::new("V", 1, "r");
        missing.intro.insert(cid(0));
        missing.fixed.insert(cid(99));
        let mut ok = VulnRange::new("V", 2, "r");
        ok.intro.insert(cid(0));
        ok.fixed.insert(cid(2));
        let v = Vulnerability { id: "V".into(), ranges: vec![dup, missing, ok.clone()], severity: vec![] };
        let (out, report) = clean_ranges(vec![v], &g);
        assert_eq!(report.accepted, 1);
        assert_eq!(report.count(RejectReason::DupEvent), 1);
        assert_eq!(report.count(RejectReason::MissingCommit), 1);
        assert_eq!(report.input_ranges(), 3);
        assert_eq!(out[0].ranges, vec![ok]);
        // idempotent
        let (_, again) = clean_ranges(out, &g);
        assert!(again.rejected.is_empty());
        assert_eq!(again.accepted, 1);
    }

    #[test]
    fn zero_expansion() {
        let g = chain(3);
        let membership = g.reachable_from_heads([&cid(2)]).unwrap();
        let mut r = VulnRange::new("V", 0, "r");
        r.intro_zero = true;
        r.fixed.insert(cid(2));
        let out = expand_zero_intro(r.clone(), &g, &membership).unwrap();
        assert!(!out.intro_zero);
        assert_eq!(out.intro, BTreeSet::from([cid(0)]));
        assert_eq!(out.fixed, r.fixed);
        assert_eq!(expand_zero_intro(r, &g, &BTreeSet::new()), Err(RejectReason::NoRoots));
        let mut plain = VulnRange::new("V", 0, "r");
        plain.intro.insert(cid(1));
        assert_eq!(expand_zero_intro(plain.clone(), &g, &membership).unwrap(), plain);
    }

    #[test]
    fn cherry_pick_chain_reaches_fixpoint() {
        // a=0 <- 1 ; b=10 picks a ; c=20 picks b
        let nodes = vec![
            CommitNode::root(cid(0)),
            CommitNode::with_parents(cid(1), [cid(0)]),
            CommitNode { cherry_sources: vec![cid(1)], ..CommitNode::root(cid(10)) },
            CommitNode { cherry_sources: vec![cid(10)], ..CommitNode::root(cid(20)) },
        ];
        let g = CommitGraph::from_nodes(&nodes).unwrap();
        let mut r = VulnRange::new("V", 0, "r");
        r.intro.insert(cid(0));
        r.fixed.insert(cid(1));
        let (out, stats) = augment_cherry_picks_with_stats(r.clone(), &g).unwrap();
        assert_eq!(out.fixed, BTreeSet::from([cid(1), cid(10), cid(20)]));
        assert_eq!(stats.added, 2);
        assert!(stats.iterations <= g.len());

        // no references: unchanged
        let mut r2 = VulnRange::new("V", 0, "r");
        r2.intro.insert(cid(20));
        assert_eq!(augment_cherry_picks(r2.clone(), &g).unwrap(), r2);
    }

    #[test]
    fn cherry_conflict_rejected() {
        let nodes = vec![
            CommitNode::root(cid(0)),
            CommitNode::with_parents(cid(1), [cid(0)]),
            CommitNode { cherry_sources: vec![cid(1)], ..CommitNode::with_parents(cid(2), [cid(1)]) },
        ];
        let g = CommitGraph::from_nodes(&nodes).unwrap();
        let mut r = VulnRange::new("V", 0, "r");
        r.intro.insert(cid(0));
        r.fixed.insert(cid(1));
        r.last.insert(cid(2));
        assert_eq!(augment_cherry_picks(r, &g), Err(RejectReason::CherryConflict));
    }

    #[test]
    fn prepare_reconciles_counts() {
        let g = chain(4);
        let input = format!(
            concat!(
                r#"{{"id":"A","affected":[{{"ranges":["#,
                r#"{{"type":"GIT","repo":"u","events":[{{"introduced":"0"}},{{"fixed":"{}"}}]}},"#,
                r#"{{"type":"GIT","repo":"nowhere","events":[{{"introduced":"0"}}]}},"#,
                r#"{{"type":"GIT","repo":"u","events":[{{"introduced":"{}"}},{{"fixed":"{}"}}]}},"#,
                r#"{{"type":"GIT","repo":"u","events":[{{"introduced":"{}"}},{{"limit":"0"}}]}}"#,
                "]}}]}}\n"
            ),
            cid(2),
            cid(1),
            cid(1),
            cid(1)
        );
        let parsed = parse_vulnerabilities(input.as_bytes()).unwrap();
        let membership = g.reachable_from_heads([&cid(3)]).unwrap();
        let (vulns, report) = prepare(parsed, &g, |url| (url == "u").then(|| membership.clone()));
        assert_eq!(report.input_ranges(), 4);
        assert_eq!(report.accepted, 1);
        assert_eq!(report.count(RejectReason::UnknownRepo), 1);
        assert_eq!(report.count(RejectReason::DupEvent), 1);
        assert_eq!(report.count(RejectReason::BadSha), 1);
        assert_eq!(vulns[0].ranges[0].intro, BTreeSet::from([cid(0)]));
        assert!(!vulns[0].ranges[0].intro_zero);
    }
}
