//! Range propagation over the global commit graph.
//!
//! For one range, every descendant-or-self of an introduction commit is
//! visited and classified. A visited commit `c` is *patched* iff
//!
//! ```text
//! c ∉ intro  ∧  ( c ∈ fixed ∪ limit
//!               ∨ ∃ visited parent p: patched(p) ∨ p ∈ last )
//! ```
//!
//! and vulnerable otherwise. One patched parent is enough to patch a merge.
//! When the range carries limit events the vulnerable set is further
//! restricted to strict ancestors of the limit commits.
//!
//! [`Propagator`] computes this with a worklist that re-pushes a commit
//! whenever its status changes, exactly like the classic DFS formulation.
//! [`oracle_vulnerable_set`] computes the same thing by a topological
//! dynamic program and is kept for verification.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::graph::{CommitGraph, CommitId, CommitNode, Node};
use crate::osv::{RangeKey, VulnRange, Vulnerability};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PropagationError {
    #[error("range {0}: event commit {1} is not in the graph")]
    MissingCommit(RangeKey, CommitId),
    #[error("range {0}: no introduction commit")]
    EmptyIntro(RangeKey),
    #[error("range {0}: introduction \"0\" was never expanded")]
    UnexpandedZero(RangeKey),
}

/// Order in which pending commits leave the worklist.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Worklist {
    #[default]
    Stack,
    Queue,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ChildOrder {
    #[default]
    Forward,
    Reverse,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PropagationOptions {
    pub worklist: Worklist,
    pub child_order: ChildOrder,
}

/// Counters from an instrumented run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PropagationStats {
    pub visited: usize,
    pub pushes: usize,
    /// vulnerable -> patched transitions
    pub patched_transitions: usize,
    /// patched -> vulnerable transitions; the fixpoint is monotone so this stays 0
    pub regressions: usize,
}

const INTRO: u8 = 1;
const FIXED: u8 = 2;
const LIMIT: u8 = 4;
const LAST: u8 = 8;

const UNSEEN: u8 = 0;
const VULNERABLE: u8 = 1;
const PATCHED: u8 = 2;
/// set on vulnerable commits reached by the limit walk
const ON_LIMIT_PATH: u8 = 4;

/// A range with event commits resolved to graph nodes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResolvedRange {
    pub intro: Vec<Node>,
    pub fixed: Vec<Node>,
    pub limit: Vec<Node>,
    pub last: Vec<Node>,
}

impl ResolvedRange {
    pub fn resolve(graph: &CommitGraph, range: &VulnRange) -> Result<Self, PropagationError> {
        if range.intro_zero {
            return Err(PropagationError::UnexpandedZero(range.key()));
        }
        if range.intro.is_empty() {
            return Err(PropagationError::EmptyIntro(range.key()));
        }
        let resolve = |set: &BTreeSet<CommitId>| -> Result<Vec<Node>, PropagationError> {
            set.iter().map(|c| graph.node(c).ok_or_else(|| PropagationError::MissingCommit(range.key(), *c))).collect()
        };
        Ok(ResolvedRange {
            intro: resolve(&range.intro)?,
            fixed: resolve(&range.fixed)?,
            limit: resolve(&range.limit)?,
            last: resolve(&range.last)?,
        })
    }
}

/// Reusable per-thread scratch space for propagating ranges over one graph.
///
/// State arrays are sized to the graph once; each run only touches and
/// resets the commits it visits.
pub struct Propagator<'g> {
    graph: &'g CommitGraph,
    options: PropagationOptions,
    state: Vec<u8>,
    events: Vec<u8>,
    touched: Vec<Node>,
    event_nodes: Vec<Node>,
    work: VecDeque<Node>,
}

impl<'g> Propagator<'g> {
    pub fn new(graph: &'g CommitGraph, options: PropagationOptions) -> Self {
        Propagator {
            graph,
            options,
            state: vec![UNSEEN; graph.len()],
            events: vec![0; graph.len()],
            touched: Vec::new(),
            event_nodes: Vec::new(),
            work: VecDeque::new(),
        }
    }

    fn pop(&mut self) -> Option<Node> {
        match self.options.worklist {
            Worklist::Stack => self.work.pop_back(),
            Worklist::Queue => self.work.pop_front(),
        }
    }

    fn mark_events(&mut self, nodes: &[Node], flag: u8) {
        for &n in nodes {
            if self.events[n.index()] == 0 {
                self.event_nodes.push(n);
            }
            self.events[n.index()] |= flag;
        }
    }

    /// Vulnerable commits of `range`, sorted by node index.
    pub fn run(&mut self, range: &ResolvedRange) -> Vec<Node> {
        self.run_with_stats(range).0
    }

    pub fn run_with_stats(&mut self, range: &ResolvedRange) -> (Vec<Node>, PropagationStats) {
        let graph = self.graph;
        let mut stats = PropagationStats::default();
        self.mark_events(&range.intro, INTRO);
        self.mark_events(&range.fixed, FIXED);
        self.mark_events(&range.limit, LIMIT);
        self.mark_events(&range.last, LAST);

        for &c in &range.intro {
            if self.state[c.index()] == UNSEEN {
                self.touched.push(c);
                self.state[c.index()] = VULNERABLE;
                self.work.push_back(c);
                stats.pushes += 1;
            }
        }

        while let Some(c) = self.pop() {
            let parent_patches = self.state[c.index()] == PATCHED || self.events[c.index()] & LAST != 0;
            let children = graph.children(c);
            let mut visit = |child: Node, this: &mut Self| {
                let ev = this.events[child.index()];
                let prev = this.state[child.index()];
                let patched = ev & INTRO == 0 && (ev & (FIXED | LIMIT) != 0 || prev == PATCHED || parent_patches);
                let next = if patched { PATCHED } else { VULNERABLE };
                if prev != next {
                    match (prev, next) {
                        (UNSEEN, _) => this.touched.push(child),
                        (VULNERABLE, PATCHED) => stats.patched_transitions += 1,
                        _ => stats.regressions += 1,
                    }
                    this.state[child.index()] = next;
                    this.work.push_back(child);
                    stats.pushes += 1;
                }
            };
            match self.options.child_order {
                ChildOrder::Forward => children.iter().for_each(|&ch| visit(ch, self)),
                ChildOrder::Reverse => children.iter().rev().for_each(|&ch| visit(ch, self)),
            }
        }

        let limited = !range.limit.is_empty();
        if limited {
            // Walk parents of the limit commits inside the visited region,
            // tagging vulnerable commits met on the way.
            for &l in &range.limit {
                self.work.push_back(l);
            }
            while let Some(c) = self.work.pop_back() {
                for &p in graph.parents(c) {
                    let s = self.state[p.index()];
                    if s == UNSEEN || s & ON_LIMIT_PATH != 0 {
                        continue;
                    }
                    self.state[p.index()] = s | ON_LIMIT_PATH;
                    self.work.push_back(p);
                }
            }
        }

        stats.visited = self.touched.len();
        let mut vulnerable: Vec<Node> = self
            .touched
            .iter()
            .copied()
            .filter(|n| {
                let s = self.state[n.index()];
                s & 3 == VULNERABLE && (!limited || s & ON_LIMIT_PATH != 0)
            })
            .collect();
        vulnerable.sort_unstable();

        for n in self.touched.drain(..) {
            self.state[n.index()] = UNSEEN;
        }
        for n in self.event_nodes.drain(..) {
            self.events[n.index()] = 0;
        }
        (vulnerable, stats)
    }
}

/// Vulnerable commits of one cleaned, expanded range.
pub fn propagate_range(graph: &CommitGraph, range: &VulnRange) -> Result<BTreeSet<CommitId>, PropagationError> {
    propagate_range_with(graph, range, PropagationOptions::default())
}

pub fn propagate_range_with(
    graph: &CommitGraph,
    range: &VulnRange,
    options: PropagationOptions,
) -> Result<BTreeSet<CommitId>, PropagationError> {
    let resolved = ResolvedRange::resolve(graph, range)?;
    let nodes = Propagator::new(graph, options).run(&resolved);
    Ok(nodes.into_iter().map(|n| graph.id(n)).collect())
}

/// Independent reference computation of [`propagate_range`].
///
/// Visits descendants of the introductions, orders them topologically with
/// Kahn's algorithm, evaluates the patched recurrence once per commit with
/// every parent already decided, then intersects with strict ancestors of
/// the limit commits.
pub fn oracle_vulnerable_set(graph: &CommitGraph, range: &VulnRange) -> Result<BTreeSet<CommitId>, PropagationError> {
    if range.intro_zero {
        return Err(PropagationError::UnexpandedZero(range.key()));
    }
    if range.intro.is_empty() {
        return Err(PropagationError::EmptyIntro(range.key()));
    }
    for (_, c) in range.all_commits() {
        if !graph.contains(c) {
            return Err(PropagationError::MissingCommit(range.key(), *c));
        }
    }

    let mut visited: BTreeSet<CommitId> = BTreeSet::new();
    let mut frontier: Vec<CommitId> = range.intro.iter().copied().collect();
    while let Some(c) = frontier.pop() {
        if visited.insert(c) {
            frontier.extend(graph.children_of(&c).expect("visited commit exists"));
        }
    }

    let parents_of =
        |c: &CommitId| -> Vec<CommitId> { graph.commit_node(graph.node(c).expect("visited commit exists")).parents };
    let mut pending: BTreeMap<CommitId, usize> =
        visited.iter().map(|c| (*c, parents_of(c).iter().filter(|p| visited.contains(p)).count())).collect();
    let mut ready: VecDeque<CommitId> = pending.iter().filter(|(_, d)| **d == 0).map(|(c, _)| *c).collect();
    let mut patched: BTreeMap<CommitId, bool> = BTreeMap::new();
    while let Some(c) = ready.pop_front() {
        let is_patched = !range.intro.contains(&c)
            && (range.fixed.contains(&c)
                || range.limit.contains(&c)
                || parents_of(&c).iter().filter(|p| visited.contains(p)).any(|p| patched[p] || range.last.contains(p)));
        patched.insert(c, is_patched);
        for child in graph.children_of(&c).expect("visited commit exists") {
            if let Some(d) = pending.get_mut(&child) {
                *d -= 1;
                if *d == 0 {
                    ready.push_back(child);
                }
            }
        }
    }
    assert_eq!(patched.len(), visited.len(), "visited region must be acyclic");

    let mut vulnerable: BTreeSet<CommitId> = patched.into_iter().filter(|(_, p)| !p).map(|(c, _)| c).collect();
    if !range.limit.is_empty() {
        let allowed = graph.ancestors(&range.limit, false).expect("limit commits exist");
        vulnerable.retain(|c| allowed.contains(c));
    }
    Ok(vulnerable)
}

/// Commits labeled by one range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RangeLabel {
    pub key: RangeKey,
    /// sorted by node index
    pub commits: Vec<Node>,
}

/// Commit → ranges mapping and its transpose.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VulnerabilityLabeling {
    /// sorted by key
    ranges: Vec<RangeLabel>,
    /// CSR offsets per node into `commit_slots`
    commit_offsets: Vec<u32>,
    /// indices into `ranges`
    commit_slots: Vec<u32>,
}

impl VulnerabilityLabeling {
    pub fn empty(graph: &CommitGraph) -> Self {
        Self::from_ranges(graph, Vec::new())
    }

    /// Builds the labeling from per-range results. Duplicate keys are merged.
    pub fn from_ranges(graph: &CommitGraph, mut ranges: Vec<RangeLabel>) -> Self {
        ranges.sort_by(|a, b| a.key.cmp(&b.key));
        ranges.dedup_by(|b, a| {
            if a.key == b.key {
                a.commits.append(&mut b.commits);
                true
            } else {
                false
            }
        });
        for r in &mut ranges {
            r.commits.sort_unstable();
            r.commits.dedup();
        }
        let n = graph.len();
        let mut offsets = vec![0u32; n + 1];
        for r in &ranges {
            for c in &r.commits {
                offsets[c.index() + 1] += 1;
            }
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets[..n].to_vec();
        let mut slots = vec![0u32; offsets[n] as usize];
        for (slot, r) in ranges.iter().enumerate() {
            for c in &r.commits {
                let at = &mut cursor[c.index()];
                slots[*at as usize] = slot as u32;
                *at += 1;
            }
        }
        VulnerabilityLabeling { ranges, commit_offsets: offsets, commit_slots: slots }
    }

    pub fn ranges(&self) -> &[RangeLabel] {
        &self.ranges
    }

    pub fn range(&self, key: &RangeKey) -> Option<&RangeLabel> {
        self.ranges.binary_search_by(|r| r.key.cmp(key)).ok().map(|i| &self.ranges[i])
    }

    /// Ranges under which `node` is vulnerable, in key order.
    pub fn ranges_of(&self, node: Node) -> impl Iterator<Item = &RangeKey> {
        let i = node.index();
        self.commit_slots[self.commit_offsets[i] as usize..self.commit_offsets[i + 1] as usize]
            .iter()
            .map(|s| &self.ranges[*s as usize].key)
    }

    pub fn is_labeled(&self, node: Node) -> bool {
        let i = node.index();
        self.commit_offsets[i] != self.commit_offsets[i + 1]
    }

    pub fn is_vulnerable(&self, node: Node, key: &RangeKey) -> bool {
        self.ranges_of(node).any(|k| k == key)
    }

    pub fn labeled_commit_count(&self) -> usize {
        self.commit_offsets.windows(2).filter(|w| w[0] != w[1]).count()
    }

    pub fn pair_count(&self) -> usize {
        self.commit_slots.len()
    }

    /// `by_commit` view keyed by commit id.
    pub fn by_commit(&self, graph: &CommitGraph) -> BTreeMap<CommitId, BTreeSet<RangeKey>> {
        graph
            .nodes()
            .filter(|n| self.is_labeled(*n))
            .map(|n| (graph.id(n), self.ranges_of(n).cloned().collect()))
            .collect()
    }

    /// `by_range` view keyed by range.
    pub fn by_range(&self, graph: &CommitGraph) -> BTreeMap<RangeKey, BTreeSet<CommitId>> {
        self.ranges.iter().map(|r| (r.key.clone(), r.commits.iter().map(|n| graph.id(*n)).collect())).collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LabelOptions {
    pub propagation: PropagationOptions,
    /// worker threads; `None` uses the global pool
    pub threads: Option<usize>,
}

/// Labels the graph with every range of every vulnerability.
pub fn label_graph(graph: &CommitGraph, vulns: &[Vulnerability]) -> Result<VulnerabilityLabeling, PropagationError> {
    label_graph_with(graph, vulns, LabelOptions::default())
}

pub fn label_graph_with(
    graph: &CommitGraph,
    vulns: &[Vulnerability],
    options: LabelOptions,
) -> Result<VulnerabilityLabeling, PropagationError> {
    let ranges: Vec<&VulnRange> = vulns.iter().flat_map(|v| v.ranges.iter()).collect();
    let resolved: Vec<ResolvedRange> =
        ranges.iter().map(|r| ResolvedRange::resolve(graph, r)).collect::<Result<_, _>>()?;
    let work = || -> Vec<RangeLabel> {
        ranges
            .par_iter()
            .zip(resolved.par_iter())
            .map_init(
                || Propagator::new(graph, options.propagation),
                |prop, (range, res)| RangeLabel { key: range.key(), commits: prop.run(res) },
            )
            .collect()
    };
    let labels = match options.threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().expect("thread pool").install(work),
        None => work(),
    };
    Ok(VulnerabilityLabeling::from_ranges(graph, labels))
}

/// Which event kinds [`random_dag`] plants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EventProfile {
    pub fixed: bool,
    pub limit: bool,
    pub last: bool,
    /// plant an introduction below a fixed commit
    pub reintroduce: bool,
}

impl EventProfile {
    /// All 16 combinations of fixed/limit/last/reintroduce, indexed by bits.
    pub fn from_bits(bits: u8) -> Self {
        EventProfile { fixed: bits & 1 != 0, limit: bits & 2 != 0, last: bits & 4 != 0, reintroduce: bits & 8 != 0 }
    }
}

/// Seeded random DAG with one planted range whose event sets are disjoint.
///
/// Commit `i` draws up to `max_parents` distinct parents among commits
/// `0..i`; about one commit in twenty starts a new root lineage.
pub fn random_dag(n_commits: usize, max_parents: usize, profile: EventProfile, seed: u64) -> (CommitGraph, VulnRange) {
    assert!(n_commits >= 1 && max_parents >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<CommitId> = Vec::with_capacity(n_commits);
    let mut used = BTreeSet::new();
    while ids.len() < n_commits {
        let id = CommitId::from_bytes(rng.gen());
        if used.insert(id) {
            ids.push(id);
        }
    }
    let mut nodes: Vec<CommitNode> = Vec::with_capacity(n_commits);
    for i in 0..n_commits {
        let mut ps: Vec<usize> = Vec::new();
        if i > 0 && !rng.gen_bool(0.05) {
            let k = rng.gen_range(1..=max_parents.min(i));
            // bias toward recent commits so chains are long
            while ps.len() < k {
                let back = rng.gen_range(1..=i.min(12));
                let p = if rng.gen_bool(0.8) { i - back } else { rng.gen_range(0..i) };
                if !ps.contains(&p) {
                    ps.push(p);
                }
            }
        }
        nodes.push(CommitNode {
            id: ids[i],
            parents: ps.iter().map(|p| ids[*p]).collect(),
            timestamp: Some(1_500_000_000 + i as i64 * 60),
            cherry_sources: Vec::new(),
        });
    }
    let graph = CommitGraph::from_nodes(&nodes).expect("generated graph is a DAG");

    let mut range = VulnRange::new(format!("RAND-{seed}"), 0, "https://example.invalid/random");
    // Introductions come from the older half so there is history below them.
    let mut older: Vec<usize> = (0..n_commits.div_ceil(2)).collect();
    older.shuffle(&mut rng);
    let k = rng.gen_range(1..=3.min(older.len()));
    let intro = older.split_off(older.len() - k);
    range.intro.extend(intro.iter().map(|i| ids[*i]));
    let mut free: Vec<usize> = older.into_iter().chain(n_commits.div_ceil(2)..n_commits).collect();
    free.shuffle(&mut rng);
    let take = |rng: &mut ChaCha8Rng, free: &mut Vec<usize>, max: usize| -> Vec<usize> {
        if free.is_empty() {
            return Vec::new();
        }
        let k = rng.gen_range(1..=max.min(free.len()));
        free.split_off(free.len() - k)
    };
    if profile.fixed {
        let fixed = take(&mut rng, &mut free, 3);
        if profile.reintroduce {
            if let Some(&f) = fixed.first() {
                let below = graph.descendant_mask(&[Node::new(f)]);
                let candidates: Vec<usize> = free.iter().copied().filter(|i| *i != f && below[*i]).collect();
                if let Some(&r) = candidates.choose(&mut rng) {
                    free.retain(|x| *x != r);
                    range.intro.insert(ids[r]);
                }
            }
        }
        range.fixed.extend(fixed.iter().map(|i| ids[*i]));
    }
    if profile.limit {
        range.limit.extend(take(&mut rng, &mut free, 2).iter().map(|i| ids[*i]));
    }
    if profile.last {
        range.last.extend(take(&mut rng, &mut free, 2).iter().map(|i| ids[*i]));
    }
    (graph, range)
}
