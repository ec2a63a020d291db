//! Deduplicated commit DAG.
//!
//! Commits are interned into dense [`Node`] indices at load time. Parent and
//! child adjacency are both stored in compressed-row form so that traversals
//! in either direction are a slice lookup. The graph is immutable once built
//! and can be shared freely between threads.
//!
//! # Input format
//!
//! `commits.tsv` carries one commit per line with four tab-separated fields:
//!
//! 1. commit sha (40 lowercase hex chars)
//! 2. comma-separated parent shas, empty for root commits
//! 3. commit time as integer epoch seconds, or empty
//! 4. comma-separated cherry-pick source shas, or empty
//!
//! Lines starting with `#` and blank lines are ignored.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A 160-bit commit identifier, rendered as 40 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CommitId([u8; 20]);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid commit id {0:?}: expected 40 lowercase hex characters")]
pub struct InvalidCommitId(pub String);

impl CommitId {
    pub const fn from_bytes(bytes: [u8; 20]) -> Self {
        CommitId(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 20] {
        &self.0
    }

    /// Parses a strictly lowercase 40 character hex string.
    pub fn parse(s: &str) -> Result<Self, InvalidCommitId> {
        Self::parse_bytes(s.as_bytes()).ok_or_else(|| InvalidCommitId(s.to_string()))
    }

    fn parse_bytes(s: &[u8]) -> Option<Self> {
        if s.len() != 40 {
            return None;
        }
        let mut out = [0u8; 20];
        for (i, pair) in s.chunks_exact(2).enumerate() {
            out[i] = (hex_val(pair[0])? << 4) | hex_val(pair[1])?;
        }
        Some(CommitId(out))
    }

    /// Short 7-character prefix, as shown by most tooling.
    pub fn short(&self) -> String {
        let mut s = self.to_string();
        s.truncate(7);
        s
    }
}

fn hex_val(b: u8) -> Option<u8> {
    match b {
        b'0'..=b'9' => Some(b - b'0'),
        b'a'..=b'f' => Some(b - b'a' + 10),
        _ => None,
    }
}

impl fmt::Display for CommitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const HEX: &[u8; 16] = b"0123456789abcdef";
        let mut buf = [0u8; 40];
        for (i, b) in self.0.iter().enumerate() {
            buf[2 * i] = HEX[(b >> 4) as usize];
            buf[2 * i + 1] = HEX[(b & 0xf) as usize];
        }
        // Only ASCII hex digits were written.
        f.write_str(std::str::from_utf8(&buf).expect("hex is ascii"))
    }
}

impl fmt::Debug for CommitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CommitId({})", self)
    }
}

impl FromStr for CommitId {
    type Err = InvalidCommitId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CommitId::parse(s)
    }
}

impl Serialize for CommitId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CommitId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        CommitId::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Dense index of a commit inside one [`CommitGraph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
#[repr(transparent)]
pub struct Node(u32);

impl Node {
    pub fn new(index: usize) -> Self {
        Node(u32::try_from(index).expect("graph larger than u32::MAX nodes"))
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One commit as it appears in the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitNode {
    pub id: CommitId,
    pub parents: Vec<CommitId>,
    pub timestamp: Option<i64>,
    pub cherry_sources: Vec<CommitId>,
}

impl CommitNode {
    pub fn root(id: CommitId) -> Self {
        CommitNode { id, parents: Vec::new(), timestamp: None, cherry_sources: Vec::new() }
    }

    pub fn with_parents(id: CommitId, parents: impl IntoIterator<Item = CommitId>) -> Self {
        CommitNode { id, parents: parents.into_iter().collect(), timestamp: None, cherry_sources: Vec::new() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate commit {0}")]
    DuplicateCommit(CommitId),
    #[error("commit {commit} lists itself as a parent")]
    SelfParent { commit: CommitId },
    #[error("commit {commit} lists parent {parent} more than once")]
    DuplicateEdge { commit: CommitId, parent: CommitId },
    #[error("commit {child} references unknown parent {parent}")]
    DanglingParent { child: CommitId, parent: CommitId },
    #[error("cycle detected through edge {child} -> {parent}")]
    Cycle { child: CommitId, parent: CommitId },
    #[error("unknown commit {0}")]
    UnknownCommit(CommitId),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Accumulates commits into flat buffers, then resolves and validates them.
#[derive(Default)]
pub struct GraphBuilder {
    ids: Vec<CommitId>,
    index: FxHashMap<CommitId, Node>,
    parent_offsets: Vec<u32>,
    parent_ids: Vec<CommitId>,
    timestamps: Vec<Option<i64>>,
    cherry_offsets: Vec<u32>,
    cherry_sources: Vec<CommitId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder { parent_offsets: vec![0], cherry_offsets: vec![0], ..Default::default() }
    }

    pub fn with_capacity(commits: usize, edges: usize) -> Self {
        let mut b = GraphBuilder::new();
        b.ids.reserve(commits);
        b.index.reserve(commits);
        b.parent_offsets.reserve(commits);
        b.parent_ids.reserve(edges);
        b.timestamps.reserve(commits);
        b.cherry_offsets.reserve(commits);
        b
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(
        &mut self,
        id: CommitId,
        parents: &[CommitId],
        timestamp: Option<i64>,
        cherry_sources: &[CommitId],
    ) -> Result<(), GraphError> {
        if self.index.insert(id, Node::new(self.ids.len())).is_some() {
            return Err(GraphError::DuplicateCommit(id));
        }
        for (i, p) in parents.iter().enumerate() {
            if *p == id {
                return Err(GraphError::SelfParent { commit: id });
            }
            if parents[..i].contains(p) {
                return Err(GraphError::DuplicateEdge { commit: id, parent: *p });
            }
        }
        self.ids.push(id);
        self.parent_ids.extend_from_slice(parents);
        self.parent_offsets.push(offset(self.parent_ids.len()));
        self.timestamps.push(timestamp);
        self.cherry_sources.extend_from_slice(cherry_sources);
        self.cherry_offsets.push(offset(self.cherry_sources.len()));
        Ok(())
    }

    pub fn push_node(&mut self, node: &CommitNode) -> Result<(), GraphError> {
        self.push(node.id, &node.parents, node.timestamp, &node.cherry_sources)
    }

    pub fn build(self) -> Result<CommitGraph, GraphError> {
        let n = self.ids.len();
        let mut parents = Vec::with_capacity(self.parent_ids.len());
        for (child, window) in self.parent_offsets.windows(2).enumerate() {
            for pid in &self.parent_ids[window[0] as usize..window[1] as usize] {
                match self.index.get(pid) {
                    Some(&p) => parents.push(p),
                    None => return Err(GraphError::DanglingParent { child: self.ids[child], parent: *pid }),
                }
            }
        }
        drop(self.parent_ids);

        // Transpose: count, prefix-sum, scatter.
        let mut child_offsets = vec![0u32; n + 1];
        for p in &parents {
            child_offsets[p.index() + 1] += 1;
        }
        for i in 0..n {
            child_offsets[i + 1] += child_offsets[i];
        }
        let mut cursor: Vec<u32> = child_offsets[..n].to_vec();
        let mut children = vec![Node(0); parents.len()];
        for (child, window) in self.parent_offsets.windows(2).enumerate() {
            for p in &parents[window[0] as usize..window[1] as usize] {
                let slot = &mut cursor[p.index()];
                children[*slot as usize] = Node::new(child);
                *slot += 1;
            }
        }
        drop(cursor);

        let mut cherry_index: FxHashMap<CommitId, Vec<Node>> = FxHashMap::default();
        for (picker, window) in self.cherry_offsets.windows(2).enumerate() {
            for src in &self.cherry_sources[window[0] as usize..window[1] as usize] {
                cherry_index.entry(*src).or_default().push(Node::new(picker));
            }
        }

        let graph = CommitGraph {
            ids: self.ids,
            index: self.index,
            parent_offsets: self.parent_offsets,
            parents,
            child_offsets,
            children,
            timestamps: self.timestamps,
            cherry_offsets: self.cherry_offsets,
            cherry_sources: self.cherry_sources,
            cherry_index,
        };
        if let Some((child, parent)) = graph.find_cycle_edge() {
            return Err(GraphError::Cycle { child: graph.id(child), parent: graph.id(parent) });
        }
        Ok(graph)
    }
}

fn offset(len: usize) -> u32 {
    u32::try_from(len).expect("edge count exceeds u32::MAX")
}

/// Immutable commit DAG with materialized child adjacency.
#[derive(Debug, Clone)]
pub struct CommitGraph {
    ids: Vec<CommitId>,
    index: FxHashMap<CommitId, Node>,
    parent_offsets: Vec<u32>,
    parents: Vec<Node>,
    child_offsets: Vec<u32>,
    children: Vec<Node>,
    timestamps: Vec<Option<i64>>,
    cherry_offsets: Vec<u32>,
    cherry_sources: Vec<CommitId>,
    /// cherry-pick source -> commits whose trailer names it
    cherry_index: FxHashMap<CommitId, Vec<Node>>,
}

impl CommitGraph {
    pub fn empty() -> Self {
        GraphBuilder::new().build().expect("empty graph is valid")
    }

    pub fn from_nodes<'a>(nodes: impl IntoIterator<Item = &'a CommitNode>) -> Result<Self, GraphError> {
        let mut b = GraphBuilder::new();
        for node in nodes {
            b.push_node(node)?;
        }
        b.build()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.parents.len()
    }

    pub fn nodes(&self) -> impl ExactSizeIterator<Item = Node> {
        (0..self.ids.len()).map(Node::new)
    }

    #[inline]
    pub fn id(&self, node: Node) -> CommitId {
        self.ids[node.index()]
    }

    pub fn ids(&self) -> &[CommitId] {
        &self.ids
    }

    #[inline]
    pub fn node(&self, id: &CommitId) -> Option<Node> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &CommitId) -> bool {
        self.index.contains_key(id)
    }

    pub fn require(&self, id: &CommitId) -> Result<Node, GraphError> {
        self.node(id).ok_or(GraphError::UnknownCommit(*id))
    }

    #[inline]
    pub fn parents(&self, node: Node) -> &[Node] {
        let i = node.index();
        &self.parents[self.parent_offsets[i] as usize..self.parent_offsets[i + 1] as usize]
    }

    #[inline]
    pub fn children(&self, node: Node) -> &[Node] {
        let i = node.index();
        &self.children[self.child_offsets[i] as usize..self.child_offsets[i + 1] as usize]
    }

    pub fn timestamp(&self, node: Node) -> Option<i64> {
        self.timestamps[node.index()]
    }

    pub fn cherry_sources(&self, node: Node) -> &[CommitId] {
        let i = node.index();
        &self.cherry_sources[self.cherry_offsets[i] as usize..self.cherry_offsets[i + 1] as usize]
    }

    /// Commits whose cherry-pick trailer names `source`.
    pub fn cherry_picks_of(&self, source: &CommitId) -> &[Node] {
        self.cherry_index.get(source).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Reconstructs the input record of a commit.
    pub fn commit_node(&self, node: Node) -> CommitNode {
        CommitNode {
            id: self.id(node),
            parents: self.parents(node).iter().map(|p| self.id(*p)).collect(),
            timestamp: self.timestamp(node),
            cherry_sources: self.cherry_sources(node).to_vec(),
        }
    }

    /// Children of `c`, i.e. every commit naming `c` as a parent.
    pub fn children_of(&self, c: &CommitId) -> Result<BTreeSet<CommitId>, GraphError> {
        let node = self.require(c)?;
        Ok(self.children(node).iter().map(|n| self.id(*n)).collect())
    }

    pub fn resolve<'a>(&self, ids: impl IntoIterator<Item = &'a CommitId>) -> Result<Vec<Node>, GraphError> {
        ids.into_iter().map(|id| self.require(id)).collect()
    }

    /// Marks every node reachable from `start` over parent edges.
    pub fn ancestor_mask(&self, start: &[Node], include_start: bool) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack: Vec<Node> = Vec::new();
        for &s in start {
            if include_start {
                if !seen[s.index()] {
                    seen[s.index()] = true;
                    stack.push(s);
                }
            } else {
                stack.push(s);
            }
        }
        while let Some(c) = stack.pop() {
            for &p in self.parents(c) {
                if !seen[p.index()] {
                    seen[p.index()] = true;
                    stack.push(p);
                }
            }
        }
        seen
    }

    /// Marks every node reachable from `start` over child edges, start included.
    pub fn descendant_mask(&self, start: &[Node]) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack: Vec<Node> = Vec::new();
        for &s in start {
            if !seen[s.index()] {
                seen[s.index()] = true;
                stack.push(s);
            }
        }
        while let Some(c) = stack.pop() {
            for &ch in self.children(c) {
                if !seen[ch.index()] {
                    seen[ch.index()] = true;
                    stack.push(ch);
                }
            }
        }
        seen
    }

    pub fn ancestors_of_nodes(&self, start: &[Node], include_start: bool) -> Vec<Node> {
        mask_to_nodes(&self.ancestor_mask(start, include_start))
    }

    /// Transitive closure over parent edges.
    pub fn ancestors<'a>(
        &self,
        start: impl IntoIterator<Item = &'a CommitId>,
        include_start: bool,
    ) -> Result<BTreeSet<CommitId>, GraphError> {
        let start = self.resolve(start)?;
        Ok(self.ancestors_of_nodes(&start, include_start).into_iter().map(|n| self.id(n)).collect())
    }

    /// Every commit reachable from the given branch heads, heads included.
    pub fn reachable_from_heads<'a>(
        &self,
        heads: impl IntoIterator<Item = &'a CommitId>,
    ) -> Result<BTreeSet<CommitId>, GraphError> {
        self.ancestors(heads, true)
    }

    /// Parentless commits inside `membership`.
    pub fn roots_within<'a>(&self, membership: impl IntoIterator<Item = &'a CommitId>) -> BTreeSet<CommitId> {
        membership.into_iter().filter(|id| self.node(id).is_some_and(|n| self.parents(n).is_empty())).copied().collect()
    }

    /// Kahn order: every parent precedes its children. `None` if cyclic.
    pub fn topological_order(&self) -> Option<Vec<Node>> {
        let n = self.len();
        let mut indegree: Vec<u32> = (0..n).map(|i| self.parent_offsets[i + 1] - self.parent_offsets[i]).collect();
        let mut queue: VecDeque<Node> = (0..n).filter(|&i| indegree[i] == 0).map(Node::new).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(c) = queue.pop_front() {
            order.push(c);
            for &ch in self.children(c) {
                let d = &mut indegree[ch.index()];
                *d -= 1;
                if *d == 0 {
                    queue.push_back(ch);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    fn find_cycle_edge(&self) -> Option<(Node, Node)> {
        if self.topological_order().is_some() {
            return None;
        }
        // Peel off every node that cannot reach a cycle through parents,
        // then walk parent edges among the remainder until a node repeats.
        let n = self.len();
        let mut outdeg: Vec<u32> = (0..n).map(|i| self.parent_offsets[i + 1] - self.parent_offsets[i]).collect();
        let mut removed = vec![false; n];
        let mut queue: VecDeque<Node> = (0..n).filter(|&i| outdeg[i] == 0).map(Node::new).collect();
        while let Some(c) = queue.pop_front() {
            removed[c.index()] = true;
            for &ch in self.children(c) {
                let d = &mut outdeg[ch.index()];
                *d -= 1;
                if *d == 0 {
                    queue.push_back(ch);
                }
            }
        }
        let start = (0..n).find(|&i| !removed[i]).map(Node::new)?;
        let mut on_path = vec![false; n];
        let mut cur = start;
        loop {
            on_path[cur.index()] = true;
            let next = *self.parents(cur).iter().find(|p| !removed[p.index()])?;
            if on_path[next.index()] {
                return Some((cur, next));
            }
            cur = next;
        }
    }

    /// Sorts by commit time, oldest first; commits without a time go last.
    pub fn sort_by_timestamp(&self, nodes: &mut [Node]) {
        nodes.sort_by_key(|n| (self.timestamp(*n).is_none(), self.timestamp(*n), self.id(*n)));
    }

    /// Writes the graph back out in `commits.tsv` form.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for node in self.nodes() {
            write_commit_line(&mut out, &self.commit_node(node))?;
        }
        Ok(())
    }
}

pub(crate) fn mask_to_nodes(mask: &[bool]) -> Vec<Node> {
    mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| Node::new(i)).collect()
}

pub fn write_commit_line<W: Write>(out: &mut W, node: &CommitNode) -> io::Result<()> {
    write!(out, "{}\t", node.id)?;
    for (i, p) in node.parents.iter().enumerate() {
        if i > 0 {
            out.write_all(b",")?;
        }
        write!(out, "{p}")?;
    }
    out.write_all(b"\t")?;
    if let Some(ts) = node.timestamp {
        write!(out, "{ts}")?;
    }
    out.write_all(b"\t")?;
    for (i, s) in node.cherry_sources.iter().enumerate() {
        if i > 0 {
            out.write_all(b",")?;
        }
        write!(out, "{s}")?;
    }
    out.write_all(b"\n")
}

/// Reads a `commits.tsv` stream into a validated graph.
pub fn load_graph<R: BufRead>(mut reader: R) -> Result<CommitGraph, GraphError> {
    let mut builder = GraphBuilder::new();
    let mut buf = Vec::with_capacity(256);
    let mut parents: Vec<CommitId> = Vec::with_capacity(8);
    let mut cherries: Vec<CommitId> = Vec::new();
    let mut line_no = 0usize;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let mut line = buf.as_slice();
        if let Some(rest) = line.strip_suffix(b"\n") {
            line = rest;
        }
        if line.is_empty() || line[0] == b'#' {
            continue;
        }
        let malformed = |message: String| GraphError::Malformed { line: line_no, message };
        let mut fields = line.split(|b| *b == b'\t');
        let (Some(sha), Some(parent_field), Some(ts_field), Some(cherry_field), None) =
            (fields.next(), fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(malformed("expected 4 tab-separated fields".into()));
        };
        let id = CommitId::parse_bytes(sha)
            .ok_or_else(|| malformed(format!("bad commit sha {:?}", String::from_utf8_lossy(sha))))?;
        parse_sha_list(parent_field, &mut parents).map_err(|bad| malformed(format!("bad parent sha {bad:?}")))?;
        let timestamp = if ts_field.is_empty() {
            None
        } else {
            let text = std::str::from_utf8(ts_field).map_err(|_| malformed("timestamp is not utf-8".into()))?;
            Some(text.parse::<i64>().map_err(|_| malformed(format!("bad timestamp {text:?}")))?)
        };
        parse_sha_list(cherry_field, &mut cherries)
            .map_err(|bad| malformed(format!("bad cherry-pick source sha {bad:?}")))?;
        builder.push(id, &parents, timestamp, &cherries).map_err(|e| match e {
            GraphError::DuplicateCommit(_) | GraphError::SelfParent { .. } | GraphError::DuplicateEdge { .. } => {
                malformed(e.to_string())
            }
            other => other,
        })?;
    }
    builder.build()
}

fn parse_sha_list(field: &[u8], out: &mut Vec<CommitId>) -> Result<(), String> {
    out.clear();
    if field.is_empty() {
        return Ok(());
    }
    for part in field.split(|b| *b == b',') {
        match CommitId::parse_bytes(part) {
            Some(id) => out.push(id),
            None => return Err(String::from_utf8_lossy(part).into_owned()),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cid(n: u32) -> CommitId {
        let mut b = [0u8; 20];
        b[16..].copy_from_slice(&n.to_be_bytes());
        CommitId(b)
    }

    fn chain(n: u32) -> CommitGraph {
        let nodes: Vec<CommitNode> = (0..n)
            .map(|i| if i == 0 { CommitNode::root(cid(0)) } else { CommitNode::with_parents(cid(i), [cid(i - 1)]) })
            .collect();
        CommitGraph::from_nodes(&nodes).unwrap()
    }

    #[test]
    fn commit_id_rejects_uppercase_and_short() {
        assert!(CommitId::parse(&"A".repeat(40)).is_err());
        assert!(CommitId::parse(&"a".repeat(39)).is_err());
        assert!(CommitId::parse(&"g".repeat(40)).is_err());
        let s = "f052389a634debd148e820d6bf88b5a77fe670d7";
        assert_eq!(CommitId::parse(s).unwrap().to_string(), s);
        assert_eq!(CommitId::parse(s).unwrap().short(), "f052389");
    }

    #[test]
    fn empty_stream() {
        let g = load_graph(&b""[..]).unwrap();
        assert_eq!(g.len(), 0);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn single_edge_transpose() {
        let text = format!("{}\t\t\t\n{}\t{}\t\t\n", cid(0), cid(1), cid(0));
        let g = load_graph(text.as_bytes()).unwrap();
        assert_eq!(g.children_of(&cid(0)).unwrap(), BTreeSet::from([cid(1)]));
        assert!(g.children_of(&cid(1)).unwrap().is_empty());
    }

    #[test]
    fn comments_and_timestamps() {
        let text = format!("# header\n{}\t\t1700000000\t\n\n{}\t{}\t\t{}\n", cid(0), cid(1), cid(0), cid(9));
        let g = load_graph(text.as_bytes()).unwrap();
        assert_eq!(g.len(), 2);
        let n1 = g.node(&cid(1)).unwrap();
        assert_eq!(g.timestamp(g.node(&cid(0)).unwrap()), Some(1_700_000_000));
        assert_eq!(g.timestamp(n1), None);
        assert_eq!(g.cherry_sources(n1), &[cid(9)]);
        assert_eq!(g.cherry_picks_of(&cid(9)), &[n1]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\t\t\t\nnot-a-sha\t\t\t\n", cid(0));
        match load_graph(text.as_bytes()) {
            Err(GraphError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let text = format!("{}\t\t\n", cid(0));
        assert!(matches!(load_graph(text.as_bytes()), Err(GraphError::Malformed { line: 1, .. })));
        let text = format!("{}\t\tsoon\t\n", cid(0));
        assert!(matches!(load_graph(text.as_bytes()), Err(GraphError::Malformed { line: 1, .. })));
    }

    #[test]
    fn dangling_parent_rejected() {
        let text = format!("{}\t{}\t\t\n", cid(1), cid(0));
        assert!(matches!(load_graph(text.as_bytes()), Err(GraphError::DanglingParent { .. })));
    }

    #[test]
    fn duplicate_commit_and_edge_rejected() {
        let text = format!("{}\t\t\t\n{}\t\t\t\n", cid(0), cid(0));
        assert!(matches!(load_graph(text.as_bytes()), Err(GraphError::Malformed { line: 2, .. })));
        let text = format!("{}\t\t\t\n{}\t{},{}\t\t\n", cid(0), cid(1), cid(0), cid(0));
        assert!(matches!(load_graph(text.as_bytes()), Err(GraphError::Malformed { line: 2, .. })));
        let text = format!("{}\t{}\t\t\n", cid(0), cid(0));
        assert!(matches!(load_graph(text.as_bytes()), Err(GraphError::Malformed { line: 1, .. })));
    }

    #[test]
    fn cycle_reports_an_edge_on_the_cycle() {
        // 0 <- 1 <- 2 <- 3 <- 1 (1 and 3 form a cycle with 2); 4 hangs off 3.
        let text = format!(
            "{}\t\t\t\n{}\t{},{}\t\t\n{}\t{}\t\t\n{}\t{}\t\t\n{}\t{}\t\t\n",
            cid(0),
            cid(1),
            cid(0),
            cid(3),
            cid(2),
            cid(1),
            cid(3),
            cid(2),
            cid(4),
            cid(3)
        );
        match load_graph(text.as_bytes()) {
            Err(GraphError::Cycle { child, parent }) => {
                let cyc = [cid(1), cid(2), cid(3)];
                assert!(cyc.contains(&child) && cyc.contains(&parent), "{child} -> {parent}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ancestors_on_chain() {
        let g = chain(3);
        assert!(g.ancestors([&cid(0)], false).unwrap().is_empty());
        assert_eq!(g.ancestors([&cid(2)], false).unwrap(), BTreeSet::from([cid(0), cid(1)]));
        assert_eq!(g.ancestors([&cid(2)], true).unwrap(), BTreeSet::from([cid(0), cid(1), cid(2)]));
        assert_eq!(g.children_of(&cid(1)).unwrap(), BTreeSet::from([cid(2)]));
        assert!(g.children_of(&cid(2)).unwrap().is_empty());
        assert!(matches!(g.children_of(&cid(7)), Err(GraphError::UnknownCommit(_))));
        assert!(matches!(g.ancestors([&cid(7)], true), Err(GraphError::UnknownCommit(_))));
    }

    #[test]
    fn reachable_and_roots() {
        let g = chain(3);
        assert_eq!(g.reachable_from_heads([&cid(0)]).unwrap(), BTreeSet::from([cid(0)]));
        let all = g.reachable_from_heads([&cid(2)]).unwrap();
        assert_eq!(g.roots_within(&all), BTreeSet::from([cid(0)]));
        assert!(g.roots_within(&BTreeSet::new()).is_empty());

        // Two root lineages merged by an octopus-style commit.
        let nodes = vec![
            CommitNode::root(cid(0)),
            CommitNode::root(cid(10)),
            CommitNode::with_parents(cid(1), [cid(0)]),
            CommitNode::with_parents(cid(11), [cid(10)]),
            CommitNode::with_parents(cid(2), [cid(1), cid(11)]),
        ];
        let g = CommitGraph::from_nodes(&nodes).unwrap();
        let all = g.reachable_from_heads([&cid(2)]).unwrap();
        assert_eq!(g.roots_within(&all), BTreeSet::from([cid(0), cid(10)]));
    }

    #[test]
    fn disconnected_components() {
        let nodes = vec![
            CommitNode::root(cid(0)),
            CommitNode::with_parents(cid(1), [cid(0)]),
            CommitNode::root(cid(10)),
            CommitNode::with_parents(cid(11), [cid(10)]),
        ];
        let g = CommitGraph::from_nodes(&nodes).unwrap();
        let r = g.reachable_from_heads([&cid(1)]).unwrap();
        assert!(!r.contains(&cid(10)) && !r.contains(&cid(11)));
    }

    #[test]
    fn missing_timestamps_sort_last() {
        let nodes = vec![
            CommitNode { timestamp: None, ..CommitNode::root(cid(0)) },
            CommitNode { timestamp: Some(5), ..CommitNode::root(cid(1)) },
            CommitNode { timestamp: Some(3), ..CommitNode::root(cid(2)) },
        ];
        let g = CommitGraph::from_nodes(&nodes).unwrap();
        let mut all: Vec<Node> = g.nodes().collect();
        g.sort_by_timestamp(&mut all);
        let ids: Vec<CommitId> = all.into_iter().map(|n| g.id(n)).collect();
        assert_eq!(ids, vec![cid(2), cid(1), cid(0)]);
    }

    #[test]
    fn tsv_round_trip() {
        let nodes = vec![
            CommitNode { timestamp: Some(-4), ..CommitNode::root(cid(0)) },
            CommitNode { cherry_sources: vec![cid(40), cid(41)], ..CommitNode::with_parents(cid(1), [cid(0)]) },
        ];
        let g = CommitGraph::from_nodes(&nodes).unwrap();
        let mut out = Vec::new();
        g.write_tsv(&mut out).unwrap();
        let g2 = load_graph(out.as_slice()).unwrap();
        let back: Vec<CommitNode> = g2.nodes().map(|n| g2.commit_node(n)).collect();
        assert_eq!(back, nodes);
    }
}
