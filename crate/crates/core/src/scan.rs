//! Dependency manifest scanners: git submodules and Go modules.
//!
//! Both resolve each dependency to a pinned commit through an offline map and
//! look the commit up in the store. A dependency that cannot be resolved is
//! reported as unresolved, never guessed.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::Serialize;

use crate::graph::CommitId;
use crate::store::{LookupStatus, StoreError, VulnHit, VulnStore};

#[derive(Debug, thiserror::Error)]
pub enum ScanError {
    #[error("{file} line {line}: {message}")]
    Malformed { file: String, line: usize, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Submodule {
    pub name: String,
    pub path: String,
    pub url: Option<String>,
}

fn malformed(file: &str, line: usize, message: impl Into<String>) -> ScanError {
    ScanError::Malformed { file: file.to_string(), line, message: message.into() }
}

/// Parses a `.gitmodules` file.
pub fn parse_gitmodules<R: BufRead>(reader: R) -> Result<Vec<Submodule>, ScanError> {
    let mut out: Vec<Submodule> = Vec::new();
    let mut current: Option<(String, Option<String>, Option<String>, usize)> = None;
    let finish = |cur: Option<(String, Option<String>, Option<String>, usize)>, out: &mut Vec<Submodule>| {
        if let Some((name, path, url, line)) = cur {
            let path = path.ok_or_else(|| malformed(".gitmodules", line, format!("submodule {name:?} has no path")))?;
            out.push(Submodule { name, path, url });
        }
        Ok::<(), ScanError>(())
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with(';') {
            continue;
        }
        if let Some(section) = t.strip_prefix('[') {
            let section = section
                .strip_suffix(']')
                .ok_or_else(|| malformed(".gitmodules", line_no, "unterminated section header"))?
                .trim();
            finish(current.take(), &mut out)?;
            if let Some(name) = section.strip_prefix("submodule") {
                let name = name.trim().trim_matches('"').to_string();
                current = Some((name, None, None, line_no));
            }
            continue;
        }
        let (key, value) =
            t.split_once('=').ok_or_else(|| malformed(".gitmodules", line_no, "expected `key = value`"))?;
        if let Some((_, path, url, _)) = current.as_mut() {
            let value = value.trim().trim_matches('"').to_string();
            match key.trim() {
                "path" => *path = Some(value),
                "url" => *url = Some(value),
                _ => {}
            }
        }
    }
    finish(current, &mut out)?;
    Ok(out)
}

/// Reads gitlink pins, path → commit. Accepts `<sha> <path>`, the
/// `git ls-tree` form `160000 commit <sha>\t<path>`, and `git submodule
/// status` lines.
pub fn parse_pins<R: BufRead>(reader: R) -> Result<BTreeMap<String, CommitId>, ScanError> {
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.trim_start_matches(['-', '+', 'U']).split_whitespace().collect();
        let (sha, path) = match fields.as_slice() {
            ["160000", "commit", sha, path, ..] => (*sha, *path),
            [sha, path, ..] => (*sha, *path),
            _ => return Err(malformed("pins", line_no, "expected `<sha> <path>`")),
        };
        let sha = CommitId::parse(&sha.to_ascii_lowercase())
            .map_err(|_| malformed("pins", line_no, format!("bad sha {sha:?}")))?;
        out.insert(path.to_string(), sha);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Requirement {
    pub module: String,
    pub version: String,
    pub indirect: bool,
}

/// Module paths hosted on a git forge, which the store can index.
pub fn is_repository_backed(module: &str) -> bool {
    ["github.com/", "gitlab.com/", "bitbucket.org/"].iter().any(|p| module.starts_with(p))
}

fn parse_requirement(text: &str, file: &str, line: usize) -> Result<Requirement, ScanError> {
    let (body, comment) = match text.split_once("//") {
        Some((b, c)) => (b, c.trim()),
        None => (text, ""),
    };
    let fields: Vec<&str> = body.split_whitespace().collect();
    match fields.as_slice() {
        [module, version] => Ok(Requirement {
            module: module.trim_matches('"').to_string(),
            version: version.trim_matches('"').to_string(),
            indirect: comment == "indirect",
        }),
        _ => Err(malformed(file, line, "expected `<module> <version>`")),
    }
}

/// Requirements of a `go.mod` file, in file order.
pub fn parse_gomod<R: BufRead>(reader: R) -> Result<Vec<Requirement>, ScanError> {
    let mut out = Vec::new();
    // directive of the currently open `( ... )` block
    let mut block: Option<String> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with("//") {
            continue;
        }
        if let Some(directive) = &block {
            if t == ")" {
                block = None;
            } else if directive == "require" {
                out.push(parse_requirement(t, "go.mod", line_no)?);
            }
            continue;
        }
        let (directive, rest) = t.split_once(char::is_whitespace).unwrap_or((t, ""));
        let rest = rest.trim();
        if rest == "(" {
            block = Some(directive.to_string());
        } else if directive == "require" {
            out.push(parse_requirement(rest, "go.mod", line_no)?);
        }
    }
    if block.is_some() {
        return Err(malformed("go.mod", 0, "unterminated block"));
    }
    Ok(out)
}

/// Reads `<module> <version> <sha>` lines.
pub fn parse_resolution<R: BufRead>(reader: R) -> Result<BTreeMap<(String, String), CommitId>, ScanError> {
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        let [module, version, sha] = fields.as_slice() else {
            return Err(malformed("resolution", line_no, "expected `<module> <version> <sha>`"));
        };
        let sha = CommitId::parse(&sha.to_ascii_lowercase())
            .map_err(|_| malformed("resolution", line_no, format!("bad sha {sha:?}")))?;
        out.insert((module.to_string(), version.to_string()), sha);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryStatus {
    Unresolved,
    NotIndexed,
    IndexedClean,
    Vulnerable,
}

impl EntryStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            EntryStatus::Unresolved => "unresolved",
            EntryStatus::NotIndexed => "not-indexed",
            EntryStatus::IndexedClean => "indexed-clean",
            EntryStatus::Vulnerable => "vulnerable",
        }
    }
}

impl From<LookupStatus> for EntryStatus {
    fn from(s: LookupStatus) -> Self {
        match s {
            LookupStatus::NotIndexed => EntryStatus::NotIndexed,
            LookupStatus::IndexedClean => EntryStatus::IndexedClean,
            LookupStatus::Vulnerable => EntryStatus::Vulnerable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanEntry {
    /// submodule path, or `module@version`
    pub locator: String,
    pub commit: Option<CommitId>,
    pub status: EntryStatus,
    pub hits: Vec<VulnHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanReport {
    pub manifest: String,
    pub entries: Vec<ScanEntry>,
}

impl ScanReport {
    pub fn hit_count(&self) -> usize {
        self.entries.iter().map(|e| e.hits.len()).sum()
    }

    pub fn count(&self, status: EntryStatus) -> usize {
        self.entries.iter().filter(|e| e.status == status).count()
    }

    /// 0 when nothing vulnerable was found, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.hit_count() > 0 {
            1
        } else {
            0
        }
    }
}

fn entry(store: &VulnStore, locator: String, commit: Option<CommitId>) -> Result<ScanEntry, StoreError> {
    match commit {
        None => Ok(ScanEntry { locator, commit, status: EntryStatus::Unresolved, hits: Vec::new() }),
        Some(c) => {
            let found = store.lookup_commit(&c.to_string())?;
            Ok(ScanEntry { locator, commit, status: found.status.into(), hits: found.hits })
        }
    }
}

pub fn scan_gitmodules(
    manifest: &str,
    submodules: &[Submodule],
    pins: &BTreeMap<String, CommitId>,
    store: &VulnStore,
) -> Result<ScanReport, ScanError> {
    let entries = submodules
        .iter()
        .map(|s| entry(store, s.path.clone(), pins.get(&s.path).copied()))
        .collect::<Result<_, _>>()?;
    Ok(ScanReport { manifest: manifest.to_string(), entries })
}

pub fn scan_gomod(
    manifest: &str,
    requirements: &[Requirement],
    resolution: &BTreeMap<(String, String), CommitId>,
    store: &VulnStore,
) -> Result<ScanReport, ScanError> {
    let entries = requirements
        .iter()
        .filter(|r| is_repository_backed(&r.module))
        .map(|r| {
            let commit = resolution.get(&(r.module.clone(), r.version.clone())).copied();
            entry(store, format!("{}@{}", r.module, r.version), commit)
        })
        .collect::<Result<_, _>>()?;
    Ok(ScanReport { manifest: manifest.to_string(), entries })
}
