//! The exported lookup store: CSV tables mapping commits and origins to
//! vulnerabilities.
//!
//! * `commit_vulns.csv`: `sha,vuln_id,range_index`, one row per labeled pair;
//! * `origin_vulns.csv`: `url,branch,head_sha,vuln_id,severity,survived_filters`,
//!   one row per vulnerable branch head and vulnerability;
//! * `origin_heads.csv`: `url,branch,head_sha,is_default`, every indexed head,
//!   so that a clean origin is told apart from an unknown one;
//! * `vulnerabilities.csv`: `vuln_id,severity`.
//!
//! All tables are sorted, so identical inputs give identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::forks::{Origins, PairRecord, Stage};
use crate::graph::{CommitGraph, CommitId};
use crate::osv::{severity_of, Vulnerability};
use crate::propagation::VulnerabilityLabeling;

pub const COMMIT_VULNS: &str = "commit_vulns.csv";
pub const ORIGIN_VULNS: &str = "origin_vulns.csv";
pub const ORIGIN_HEADS: &str = "origin_heads.csv";
pub const VULNERABILITIES: &str = "vulnerabilities.csv";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{file}: {source}")]
    Csv { file: String, source: csv::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed commit sha {0:?}")]
    BadSha(String),
    #[error("{file}: {message}")]
    Inconsistent { file: String, message: String },
}

fn csv_err(file: &str) -> impl Fn(csv::Error) -> StoreError + '_ {
    move |source| StoreError::Csv { file: file.to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CommitRow {
    pub sha: CommitId,
    pub vuln_id: String,
    pub range_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginRow {
    pub url: String,
    pub branch: String,
    pub head_sha: CommitId,
    pub vuln_id: String,
    #[serde(with = "score")]
    pub severity: Option<f64>,
    /// `;`-separated names of the cascade stages the pair passed
    pub survived_filters: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadRow {
    pub url: String,
    pub branch: String,
    pub head_sha: CommitId,
    pub is_default: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnRow {
    pub vuln_id: String,
    #[serde(with = "score")]
    pub severity: Option<f64>,
}

mod score {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_str(""),
            Some(x) if x.fract() == 0.0 => s.serialize_str(&format!("{x:.1}")),
            Some(x) => s.serialize_str(&x.to_string()),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let s = String::deserialize(d)?;
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(serde::de::Error::custom)
    }
}

/// In-memory copy of the store tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VulnStore {
    pub commit_index: Vec<CommitRow>,
    pub origin_index: Vec<OriginRow>,
    pub heads: Vec<HeadRow>,
    pub vulnerabilities: Vec<VulnRow>,
}

fn survived(pair: &PairRecord) -> Vec<Stage> {
    pair.verdicts.iter().take_while(|v| v.passed).map(|v| v.stage).collect()
}

impl VulnStore {
    /// Builds the tables from pipeline artifacts.
    ///
    /// `pairs` are the unpatched head pairs with whatever verdicts the
    /// cascade attached. When one (origin, branch, vulnerability) has several
    /// vulnerable ranges, the row reports the range that got furthest.
    pub fn build(
        graph: &CommitGraph,
        labeling: &VulnerabilityLabeling,
        origins: &Origins,
        vulns: &[Vulnerability],
        pairs: &[PairRecord],
    ) -> Self {
        let severities: BTreeMap<&str, Option<f64>> =
            vulns.iter().map(|v| (v.id.as_str(), severity_of(v).map(|s| s.score))).collect();

        let mut commit_index: Vec<CommitRow> = labeling
            .ranges()
            .iter()
            .flat_map(|r| {
                r.commits.iter().map(move |&n| CommitRow {
                    sha: graph.id(n),
                    vuln_id: r.key.vuln_id.clone(),
                    range_index: r.key.index,
                })
            })
            .collect();
        commit_index.sort();
        commit_index.dedup();

        let mut best: BTreeMap<(&str, &str, &str), (&PairRecord, Vec<Stage>)> = BTreeMap::new();
        for p in pairs {
            let stages = survived(p);
            let key = (p.origin_url.as_str(), p.branch.as_str(), p.vuln_id.as_str());
            match best.get(&key) {
                Some((_, s)) if s.len() >= stages.len() => {}
                _ => {
                    best.insert(key, (p, stages));
                }
            }
        }
        let origin_index = best
            .into_values()
            .map(|(p, stages)| OriginRow {
                url: p.origin_url.clone(),
                branch: p.branch.clone(),
                head_sha: p.head,
                vuln_id: p.vuln_id.clone(),
                severity: severities.get(p.vuln_id.as_str()).copied().flatten(),
                survived_filters: stages.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(";"),
            })
            .collect();

        let mut heads: Vec<HeadRow> = origins
            .records()
            .iter()
            .flat_map(|o| {
                o.branches.iter().map(move |b| HeadRow {
                    url: o.url.clone(),
                    branch: b.name.clone(),
                    head_sha: b.head,
                    is_default: b.is_default,
                })
            })
            .collect();
        heads.sort();

        let vulnerabilities =
            severities.into_iter().map(|(id, severity)| VulnRow { vuln_id: id.to_string(), severity }).collect();
        VulnStore { commit_index, origin_index, heads, vulnerabilities }
    }

    pub fn write(&self, dir: &Path) -> Result<(), StoreError> {
        std::fs::create_dir_all(dir)?;
        write_table(&dir.join(COMMIT_VULNS), &["sha", "vuln_id", "range_index"], &self.commit_index)?;
        write_table(
            &dir.join(ORIGIN_VULNS),
            &["url", "branch", "head_sha", "vuln_id", "severity", "survived_filters"],
            &self.origin_index,
        )?;
        write_table(&dir.join(ORIGIN_HEADS), &["url", "branch", "head_sha", "is_default"], &self.heads)?;
        write_table(&dir.join(VULNERABILITIES), &["vuln_id", "severity"], &self.vulnerabilities)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, StoreError> {
        let store = VulnStore {
            commit_index: read_table(&dir.join(COMMIT_VULNS))?,
            origin_index: read_table(&dir.join(ORIGIN_VULNS))?,
            // stores written before the auxiliary tables existed still load
            heads: read_optional_table(&dir.join(ORIGIN_HEADS))?,
            vulnerabilities: read_optional_table(&dir.join(VULNERABILITIES))?,
        };
        store.check()?;
        Ok(store)
    }

    /// Sortedness, uniqueness and the origin → commit join.
    pub fn check(&self) -> Result<(), StoreError> {
        let bad = |file: &str, message: String| StoreError::Inconsistent { file: file.to_string(), message };
        if let Some(w) = self.commit_index.windows(2).find(|w| w[0] >= w[1]) {
            return Err(bad(COMMIT_VULNS, format!("rows not strictly sorted at {} {}", w[1].sha, w[1].vuln_id)));
        }
        let mut seen = BTreeSet::new();
        for r in &self.origin_index {
            if !seen.insert((&r.url, &r.branch, &r.vuln_id)) {
                return Err(bad(ORIGIN_VULNS, format!("duplicate row {} {} {}", r.url, r.branch, r.vuln_id)));
            }
            if self.commit_hits(&r.head_sha).all(|c| c.vuln_id != r.vuln_id) {
                return Err(bad(
                    ORIGIN_VULNS,
                    format!("head {} has no {} row in {COMMIT_VULNS}", r.head_sha, r.vuln_id),
                ));
            }
        }
        Ok(())
    }

    fn commit_hits<'a>(&'a self, sha: &CommitId) -> impl Iterator<Item = &'a CommitRow> {
        let start = self.commit_index.partition_point(|r| r.sha < *sha);
        let sha = *sha;
        self.commit_index[start..].iter().take_while(move |r| r.sha == sha)
    }

    fn severity(&self, vuln_id: &str) -> Option<f64> {
        self.vulnerabilities.iter().find(|v| v.vuln_id == vuln_id).and_then(|v| v.severity)
    }

    fn is_indexed(&self, sha: &CommitId) -> bool {
        self.commit_hits(sha).next().is_some() || self.heads.iter().any(|h| h.head_sha == *sha)
    }

    /// Vulnerabilities affecting `sha`. Accepts upper or lower case hex.
    pub fn lookup_commit(&self, sha: &str) -> Result<CommitLookup, StoreError> {
        let id = CommitId::parse(&sha.trim().to_ascii_lowercase()).map_err(|_| StoreError::BadSha(sha.to_string()))?;
        let ids: BTreeSet<&str> = self.commit_hits(&id).map(|r| r.vuln_id.as_str()).collect();
        let hits: Vec<VulnHit> =
            ids.into_iter().map(|v| VulnHit { vuln_id: v.to_string(), severity: self.severity(v) }).collect();
        let status = if !hits.is_empty() {
            LookupStatus::Vulnerable
        } else if self.is_indexed(&id) {
            LookupStatus::IndexedClean
        } else {
            LookupStatus::NotIndexed
        };
        Ok(CommitLookup { sha: id, status, hits })
    }

    /// Per-branch status of an origin.
    pub fn lookup_origin(&self, url: &str) -> OriginLookup {
        let branches: Vec<BranchStatus> = self
            .heads
            .iter()
            .filter(|h| h.url == url)
            .map(|h| {
                let vulns: Vec<OriginRow> =
                    self.origin_index.iter().filter(|r| r.url == url && r.branch == h.branch).cloned().collect();
                BranchStatus { branch: h.branch.clone(), head_sha: h.head_sha, is_default: h.is_default, vulns }
            })
            .collect();
        let status = if branches.is_empty() {
            LookupStatus::NotIndexed
        } else if branches.iter().any(|b| !b.vulns.is_empty()) {
            LookupStatus::Vulnerable
        } else {
            LookupStatus::IndexedClean
        };
        OriginLookup { url: url.to_string(), status, branches }
    }
}

fn write_table<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), StoreError> {
    let name = path.display().to_string();
    let file = BufWriter::new(File::create(path)?);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header).map_err(csv_err(&name))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(&name))?;
    }
    w.flush()?;
    Ok(())
}

fn read_table<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    let name = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(csv_err(&name))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err(&name))
}

fn read_optional_table<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    if path.exists() {
        read_table(path)
    } else {
        Ok(Vec::new())
    }
}

/// Writes the store for the given pipeline artifacts into `dir`.
pub fn export_store(
    dir: &Path,
    graph: &CommitGraph,
    labeling: &VulnerabilityLabeling,
    origins: &Origins,
    vulns: &[Vulnerability],
    pairs: &[PairRecord],
) -> Result<VulnStore, StoreError> {
    let store = VulnStore::build(graph, labeling, origins, vulns, pairs);
    store.write(dir)?;
    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LookupStatus {
    NotIndexed,
    IndexedClean,
    Vulnerable,
}

impl LookupStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            LookupStatus::NotIndexed => "not-indexed",
            LookupStatus::IndexedClean => "indexed-clean",
            LookupStatus::Vulnerable => "vulnerable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VulnHit {
    pub vuln_id: String,
    pub severity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommitLookup {
    pub sha: CommitId,
    pub status: LookupStatus,
    pub hits: Vec<VulnHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchStatus {
    pub branch: String,
    pub head_sha: CommitId,
    pub is_default: bool,
    pub vulns: Vec<OriginRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OriginLookup {
    pub url: String,
    pub status: LookupStatus,
    pub branches: Vec<BranchStatus>,
}
