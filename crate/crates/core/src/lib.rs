//! Global history analysis of vulnerability ranges across fork ecosystems.
//!
//! Vulnerability introduction and fix events are propagated over one
//! deduplicated commit graph, so commits that only exist in forks get
//! labeled too. On top of the labeling the crate finds forks whose branch
//! heads remain vulnerable, filters them down to high-impact pairs, and
//! exports a lookup store used by the dependency scanners.

pub mod equivalence;
pub mod forks;
pub mod graph;
pub mod osv;
pub mod pipeline;
pub mod propagation;
pub mod scan;
pub mod store;

pub use graph::{load_graph, CommitGraph, CommitId, CommitNode, GraphError, Node};
pub use osv::{RangeKey, VulnRange, Vulnerability};
pub use propagation::{label_graph, oracle_vulnerable_set, propagate_range, VulnerabilityLabeling};
