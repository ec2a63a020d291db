//! Patch-id matching of fixes re-applied under a different commit identity.
//!
//! A patch id hashes a canonical form of a unified diff: per file, the file
//! pair header followed by the ordered `+`/`-` payload lines with runs of
//! spaces and tabs collapsed. Hunk headers, context, index and mode lines do
//! not contribute, so the id survives line offset shifts and re-indentation.
//! Merge commit diffs are expected against the first parent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use sha1::{Digest, Sha1};

use crate::graph::CommitId;
use crate::osv::{RangeKey, VulnRange};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DiffError {
    #[error("line {line}: hunk outside of a file section")]
    HunkOutsideFile { line: usize },
    #[error("line {line}: malformed hunk header")]
    BadHunkHeader { line: usize },
    #[error("line {line}: unexpected line inside hunk")]
    BadHunkLine { line: usize },
    #[error("hunk starting at line {line} is truncated")]
    TruncatedHunk { line: usize },
    #[error("line {line}: expected a file header or hunk")]
    UnexpectedLine { line: usize },
    #[error("line {line}: `---` header without a matching `+++` line")]
    UnpairedHeader { line: usize },
}

/// 160-bit digest of a canonical diff.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchDigest([u8; 20]);

impl PatchDigest {
    pub fn as_bytes(&self) -> &[u8; 20] {
        &self.0
    }
}

impl fmt::Display for PatchDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for PatchDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PatchDigest({self})")
    }
}

/// Patch id of one commit's diff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PatchId {
    pub digest: PatchDigest,
    pub source_commit: CommitId,
}

/// Canonical form of a diff plus whether it carried any payload line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalDiff {
    pub text: Vec<u8>,
    pub payload_lines: usize,
}

impl CanonicalDiff {
    pub fn digest(&self) -> PatchDigest {
        PatchDigest(Sha1::digest(&self.text).into())
    }
}

fn push_collapsed(out: &mut Vec<u8>, line: &[u8]) {
    let mut in_space = false;
    for &b in line {
        if b == b' ' || b == b'\t' {
            if !in_space {
                out.push(b' ');
            }
            in_space = true;
        } else {
            out.push(b);
            in_space = false;
        }
    }
    out.push(b'\n');
}

/// `@@ -a[,b] +c[,d] @@` → (b, d); omitted counts default to 1.
fn hunk_counts(line: &[u8]) -> Option<(u64, u64)> {
    let text = std::str::from_utf8(line).ok()?;
    let rest = text.strip_prefix("@@ -")?;
    let (ranges, _) = rest.split_once(" @@")?;
    let (old, new) = ranges.split_once(" +")?;
    let count = |r: &str| -> Option<u64> {
        match r.split_once(',') {
            Some((start, n)) => {
                start.parse::<u64>().ok()?;
                n.parse().ok()
            }
            None => {
                r.parse::<u64>().ok()?;
                Some(1)
            }
        }
    };
    Some((count(old)?, count(new)?))
}

fn strip_path(rest: &[u8]) -> &[u8] {
    // plain `diff -u` appends a tab and a timestamp
    match rest.iter().position(|&b| b == b'\t') {
        Some(i) => &rest[..i],
        None => rest,
    }
}

enum State {
    /// before the first file header
    Start,
    /// inside a file header block or between hunks
    File {
        git_header: bool,
    },
    Hunk {
        old: u64,
        new: u64,
        start: usize,
    },
}

/// Canonicalizes a unified diff (possibly multi-file).
pub fn canonicalize(diff: &[u8]) -> Result<CanonicalDiff, DiffError> {
    let mut out = Vec::with_capacity(diff.len() / 2);
    let mut payload_lines = 0usize;
    let mut state = State::Start;
    let mut lines = diff.split(|&b| b == b'\n').enumerate().peekable();
    while let Some((i, raw)) = lines.next() {
        let line_no = i + 1;
        let line = raw.strip_suffix(b"\r").unwrap_or(raw);
        if let State::Hunk { old, new, start } = &mut state {
            if *old == 0 && *new == 0 {
                state = State::File { git_header: false };
            } else {
                match line.first() {
                    Some(b'+') => {
                        *new = new.checked_sub(1).ok_or(DiffError::BadHunkLine { line: line_no })?;
                        payload_lines += 1;
                        push_collapsed(&mut out, line);
                    }
                    Some(b'-') => {
                        *old = old.checked_sub(1).ok_or(DiffError::BadHunkLine { line: line_no })?;
                        payload_lines += 1;
                        push_collapsed(&mut out, line);
                    }
                    // an empty line is context whose single space was trimmed
                    Some(b' ') | None => {
                        if lines.peek().is_none() && line.is_empty() {
                            return Err(DiffError::TruncatedHunk { line: *start });
                        }
                        if *old == 0 || *new == 0 {
                            return Err(DiffError::BadHunkLine { line: line_no });
                        }
                        *old -= 1;
                        *new -= 1;
                    }
                    Some(b'\\') => {}
                    Some(_) => return Err(DiffError::BadHunkLine { line: line_no }),
                }
                continue;
            }
        }
        if line.starts_with(b"\\") {
            // "\ No newline at end of file" after the last line of a hunk
            continue;
        }
        if line.starts_with(b"diff ") {
            out.extend_from_slice(b"\0file ");
            push_collapsed(&mut out, line);
            state = State::File { git_header: true };
        } else if line.starts_with(b"--- ") && !matches!(state, State::Hunk { .. }) {
            let Some((_, next)) = lines.next() else {
                return Err(DiffError::UnpairedHeader { line: line_no });
            };
            let next = next.strip_suffix(b"\r").unwrap_or(next);
            let Some(new_path) = next.strip_prefix(b"+++ ") else {
                return Err(DiffError::UnpairedHeader { line: line_no });
            };
            let git_header = matches!(state, State::File { git_header: true });
            if !git_header {
                out.extend_from_slice(b"\0file ");
                let mut pair = strip_path(&line[4..]).to_vec();
                pair.push(b' ');
                pair.extend_from_slice(strip_path(new_path));
                push_collapsed(&mut out, &pair);
            }
            state = State::File { git_header };
        } else if line.starts_with(b"@@") {
            if matches!(state, State::Start) {
                return Err(DiffError::HunkOutsideFile { line: line_no });
            }
            let (old, new) = hunk_counts(line).ok_or(DiffError::BadHunkHeader { line: line_no })?;
            state = State::Hunk { old, new, start: line_no };
        } else if line.is_empty() {
            continue;
        } else {
            match state {
                // extended header lines (index, mode, rename, binary markers)
                State::File { git_header: true } => {}
                _ => return Err(DiffError::UnexpectedLine { line: line_no }),
            }
        }
    }
    if let State::Hunk { old, new, start } = state {
        if old != 0 || new != 0 {
            return Err(DiffError::TruncatedHunk { line: start });
        }
    }
    Ok(CanonicalDiff { text: out, payload_lines })
}

/// Digest of the canonical form of `diff`.
pub fn patch_id(diff: &[u8]) -> Result<PatchDigest, DiffError> {
    canonicalize(diff).map(|c| c.digest())
}

#[derive(Debug, thiserror::Error)]
pub enum DiffsFileError {
    #[error("diffs record {record}: malformed header")]
    Header { record: usize },
    #[error("diffs record {record}: payload truncated")]
    Truncated { record: usize },
    #[error("diffs record {record}: duplicate commit {commit}")]
    Duplicate { record: usize, commit: CommitId },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reads a diffs stream: records of `<sha> <byte length>\n` followed by
/// exactly that many bytes of unified diff.
pub fn read_diffs<R: BufRead>(mut reader: R) -> Result<BTreeMap<CommitId, Vec<u8>>, DiffsFileError> {
    let mut out = BTreeMap::new();
    let mut header = Vec::new();
    let mut record = 0usize;
    loop {
        header.clear();
        if reader.read_until(b'\n', &mut header)? == 0 {
            break;
        }
        record += 1;
        let text = std::str::from_utf8(&header).map_err(|_| DiffsFileError::Header { record })?;
        let (sha, len) = text.trim_end().split_once(' ').ok_or(DiffsFileError::Header { record })?;
        let commit = CommitId::parse(sha).map_err(|_| DiffsFileError::Header { record })?;
        let len: usize = len.parse().map_err(|_| DiffsFileError::Header { record })?;
        let mut payload = vec![0u8; len];
        reader.read_exact(&mut payload).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => DiffsFileError::Truncated { record },
            _ => DiffsFileError::Io(e),
        })?;
        if out.insert(commit, payload).is_some() {
            return Err(DiffsFileError::Duplicate { record, commit });
        }
    }
    Ok(out)
}

pub fn write_diff_record<W: Write>(out: &mut W, commit: &CommitId, diff: &[u8]) -> io::Result<()> {
    writeln!(out, "{commit} {}", diff.len())?;
    out.write_all(diff)
}

/// A fork commit whose patch id equals that of a fixed commit of `range`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct FixMatch {
    pub range: RangeKey,
    pub commit: CommitId,
    pub fixed_commit: CommitId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EquivalenceOutcome {
    pub matches: Vec<FixMatch>,
    /// fixed commits that had no usable diff
    pub skipped: Vec<(RangeKey, CommitId)>,
    /// fork commits whose diff could not be parsed
    pub unparseable: Vec<(CommitId, DiffError)>,
}

/// Matches fork commit diffs against the fixed commits of `ranges`.
///
/// Fixed commits missing from `fix_diffs` or with an unparseable diff are
/// reported in [`EquivalenceOutcome::skipped`]; the remaining fixes of the
/// same range are still matched. Diffs without any payload line (pure renames or
/// mode changes) never match.
pub fn detect_equivalent_fix<'d>(
    ranges: &[&VulnRange],
    fix_diffs: &BTreeMap<CommitId, Vec<u8>>,
    fork_commit_diffs: impl IntoIterator<Item = (CommitId, &'d [u8])>,
) -> EquivalenceOutcome {
    let mut outcome = EquivalenceOutcome::default();
    let mut by_digest: BTreeMap<PatchDigest, Vec<(&VulnRange, CommitId)>> = BTreeMap::new();
    for range in ranges {
        for fix in &range.fixed {
            let canonical = match fix_diffs.get(fix).map(|d| canonicalize(d)) {
                Some(Ok(c)) => c,
                Some(Err(e)) => {
                    log::warn!("{}: unparseable diff for fixed commit {fix}: {e}", range.key());
                    outcome.skipped.push((range.key(), *fix));
                    continue;
                }
                None => {
                    log::debug!("{}: no diff for fixed commit {fix}", range.key());
                    outcome.skipped.push((range.key(), *fix));
                    continue;
                }
            };
            if canonical.payload_lines > 0 {
                by_digest.entry(canonical.digest()).or_default().push((range, *fix));
            }
        }
    }
    let fork: Vec<(CommitId, &[u8])> = fork_commit_diffs.into_iter().collect();
    let hashed: Vec<(CommitId, Result<CanonicalDiff, DiffError>)> =
        fork.par_iter().map(|(c, d)| (*c, canonicalize(d))).collect();
    let mut seen = BTreeSet::new();
    for (commit, canonical) in hashed {
        let canonical = match canonical {
            Ok(c) => c,
            Err(e) => {
                outcome.unparseable.push((commit, e));
                continue;
            }
        };
        if canonical.payload_lines == 0 {
            continue;
        }
        for (range, fix) in by_digest.get(&canonical.digest()).into_iter().flatten() {
            if range.fixed.contains(&commit) {
                continue;
            }
            if seen.insert((range.key(), commit)) {
                outcome.matches.push(FixMatch { range: range.key(), commit, fixed_commit: *fix });
            }
        }
    }
    outcome.matches.sort();
    outcome.skipped.sort();
    outcome.skipped.dedup();
    outcome
}

/// Adds matched commits to the fixed events of `range`.
///
/// Commits already carrying any event in the range are left alone, so the
/// injection can only shrink the vulnerable set.
pub fn inject_fixes<'a>(range: &mut VulnRange, commits: impl IntoIterator<Item = &'a CommitId>) -> usize {
    let mut added = 0;
    for c in commits {
        let taken =
            range.intro.contains(c) || range.fixed.contains(c) || range.limit.contains(c) || range.last.contains(c);
        if !taken {
            range.fixed.insert(*c);
            added += 1;
        }
    }
    added
}
