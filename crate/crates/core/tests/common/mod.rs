//! Fixture loading and seeded generators shared by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use forkvuln::equivalence::write_diff_record;
use forkvuln::graph::CommitId;
use forkvuln::osv::VulnRange;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

/// Non-comment, non-empty lines of a fixture file.
pub fn golden_lines(rel: &str) -> Vec<String> {
    fs::read_to_string(fixture(rel))
        .unwrap_or_else(|e| panic!("{rel}: {e}"))
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn golden_set(rel: &str) -> BTreeSet<CommitId> {
    golden_lines(rel).iter().map(|l| CommitId::parse(l).unwrap()).collect()
}

pub fn sha(name: &str) -> CommitId {
    let names: BTreeMap<&str, &str> = [
        ("root", "e63c3dcf97b0006b429822bf6dd3b260214dcdce"),
        ("s3", "292e04f8c32f3982f4f372d8bbf2ca86cc68980c"),
        ("fix", "03d7712dc965f0b49b96e17f10bc65404ac25356"),
        ("q4", "5cf14198dd289648329685e1c5d6cede7db972b1"),
        ("q5", "de8a63d743b0e6e479419a60306c2d933c8f6de5"),
        ("p1", "16321d27019fbfdfb4f4d659993363efa312c25c"),
        ("p3", "f052389a634debd148e820d6bf88b5a77fe670d7"),
        ("p5", "06c718c6bb7caeaa268eb0b06dbf6dbdbd982d6c"),
        ("p6", "891bc1da7e3deb75d963edd500ca4399a31399d3"),
    ]
    .into();
    CommitId::parse(names[name]).unwrap()
}

pub const QEMU: &str = "https://github.com/qemu/qemu";
pub const PANDA: &str = "https://github.com/panda-re/panda";
pub const CVE: &str = "CVE-2019-13164";

fn random_id(rng: &mut ChaCha8Rng) -> CommitId {
    CommitId::from_bytes(rng.gen())
}

fn commit_line(w: &mut impl Write, id: &CommitId, parents: &[CommitId], ts: i64, cherry: &[CommitId]) {
    let join = |v: &[CommitId]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
    writeln!(w, "{id}\t{}\t{ts}\t{}", join(parents), join(cherry)).unwrap();
}

/// Files of a generated pipeline input.
pub struct EcosystemFiles {
    pub dir: PathBuf,
    pub commits: PathBuf,
    pub origins: PathBuf,
    pub advisories: PathBuf,
    pub manifests: PathBuf,
    pub diffs: PathBuf,
    /// (origin url, vuln id) pairs that must survive the cascade
    pub truth: BTreeSet<(String, String)>,
    pub origin_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Attach {
    BeforeIntro,
    InWindow,
    AfterFix,
}

struct Fork {
    url: String,
    upstream: usize,
    head: CommitId,
    vulnerable: bool,
}

/// Synthetic fork ecosystem with planted attributes and known ground truth.
///
/// Five upstreams with linear 60-commit mainlines carry one range each
/// (introduced at commit 10, fixed at 40); the fifth has a low severity.
/// Forks attach to a mainline or to an earlier fork, add a few commits, and
/// draw popularity, archived, staleness, divergence, cherry-pick and
/// re-applied-fix attributes. Histories are linear per lineage, so a head is
/// vulnerable exactly when its lineage contains the introduction and neither
/// the fix nor a picked copy of it.
pub fn write_ecosystem(dir: &Path, n_origins: usize, seed: u64) -> EcosystemFiles {
    const UPSTREAMS: usize = 5;
    const FRESH: i64 = 1_717_200_000; // 2024-06-01
    const STALE: i64 = 1_609_459_200; // 2021-01-01
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(dir.join("manifests/trees")).unwrap();
    fs::create_dir_all(dir.join("manifests/fixes")).unwrap();
    fs::create_dir_all(dir.join("diffs")).unwrap();
    let commits_path = dir.join("commits.tsv");
    let mut commits = BufWriter::new(File::create(&commits_path).unwrap());
    let mut origins = String::new();
    let mut advisories = String::new();
    let mut upstream_diffs = Vec::new();
    let mut fork_diffs = Vec::new();
    let mut truth = BTreeSet::new();
    let mut ts = 1_600_000_000i64;

    let mut mainlines: Vec<Vec<CommitId>> = Vec::new();
    for u in 0..UPSTREAMS {
        let mut line: Vec<CommitId> = Vec::new();
        for _ in 0..60 {
            let id = random_id(&mut rng);
            let parents: Vec<CommitId> = line.last().copied().into_iter().collect();
            ts += 60;
            commit_line(&mut commits, &id, &parents, ts, &[]);
            line.push(id);
        }
        let url = format!("https://forge.example/upstream{u}/project");
        let severity = if u == UPSTREAMS - 1 { 5.0 } else { 7.0 + u as f64 * 0.5 };
        advisories.push_str(&format!(
            "{{\"id\":\"ECO-{u}\",\"affected\":[{{\"ranges\":[{{\"type\":\"GIT\",\"repo\":\"{url}\",\"events\":[{{\"introduced\":\"{}\"}},{{\"fixed\":\"{}\"}}]}}]}}],\"severity\":[{{\"type\":\"CVSS_V3\",\"score\":{severity}}}]}}\n",
            line[10], line[40]
        ));
        origins.push_str(&format!("{url}\tmain\t1\t{}\t5000\t900\t0\t{FRESH}\n", line[59]));
        fs::write(dir.join(format!("manifests/fixes/{}.txt", line[40])), format!("src/up{u}/core.c\n")).unwrap();
        fs::write(dir.join(format!("manifests/trees/{}.txt", line[59])), format!("README\nsrc/up{u}/core.c\n"))
            .unwrap();
        upstream_diffs.push((line[40], fix_diff(u)));
        mainlines.push(line);
    }

    let mut forks: Vec<Fork> = Vec::new();
    for f in 0..n_origins.saturating_sub(UPSTREAMS) {
        let url = format!("https://forge.example/fork{f:03}/project");
        let on_fork = !forks.is_empty() && rng.gen_bool(0.2);
        let (upstream, base, mut vulnerable) = if on_fork {
            let parent = forks.choose(&mut rng).unwrap();
            (parent.upstream, parent.head, parent.vulnerable)
        } else {
            let u = rng.gen_range(0..UPSTREAMS);
            let attach =
                *[Attach::BeforeIntro, Attach::InWindow, Attach::InWindow, Attach::AfterFix].choose(&mut rng).unwrap();
            let at = match attach {
                Attach::BeforeIntro => rng.gen_range(0..10),
                Attach::InWindow => rng.gen_range(10..40),
                Attach::AfterFix => rng.gen_range(40..60),
            };
            (u, mainlines[u][at], attach == Attach::InWindow)
        };
        let cherry = vulnerable && rng.gen_bool(0.1);
        let reapplied = vulnerable && !cherry && rng.gen_bool(0.1);
        let own = rng.gen_range(3..10);
        let mut head = base;
        for k in 0..own {
            let id = random_id(&mut rng);
            ts += 60;
            let picked: Vec<CommitId> = if cherry && k == 1 { vec![mainlines[upstream][40]] } else { vec![] };
            commit_line(&mut commits, &id, &[head], ts, &picked);
            if reapplied && k == 1 {
                fork_diffs.push((id, fix_diff(upstream).replace("@@ -20,", "@@ -31,").replace("@@ +20,", "@@ +31,")));
            } else if k == 0 {
                fork_diffs.push((id, filler_diff(f)));
            }
            head = id;
        }
        if cherry || reapplied {
            vulnerable = false;
        }
        let popular = rng.gen_bool(0.7);
        let (stars, forks_count) = if popular {
            (rng.gen_range(101..5000), rng.gen_range(11..500))
        } else if rng.gen_bool(0.5) {
            (rng.gen_range(0..=100), rng.gen_range(0..500))
        } else {
            (rng.gen_range(101..5000), rng.gen_range(0..=10))
        };
        let archived = rng.gen_bool(0.1);
        let stale = rng.gen_bool(0.15);
        let divergent = rng.gen_bool(0.1);
        let date = if stale { STALE } else { FRESH };
        origins.push_str(&format!("{url}\tmain\t1\t{head}\t{stars}\t{forks_count}\t{}\t{date}\n", u8::from(archived)));
        if rng.gen_bool(0.15) {
            // a second, non-default branch left at the attach point
            origins.push_str(&format!(
                "{url}\tlegacy\t0\t{base}\t{stars}\t{forks_count}\t{}\t{date}\n",
                u8::from(archived)
            ));
        }
        let tree = if divergent {
            format!("README\nsrc/up{upstream}/rewritten.c\n")
        } else {
            format!("README\nsrc/up{upstream}/core.c\n")
        };
        fs::write(dir.join(format!("manifests/trees/{head}.txt")), tree).unwrap();
        let base_tree = dir.join(format!("manifests/trees/{base}.txt"));
        if !base_tree.exists() {
            fs::write(base_tree, format!("README\nsrc/up{upstream}/core.c\n")).unwrap();
        }
        let severe = upstream != UPSTREAMS - 1;
        if vulnerable && popular && severe && !archived && !stale && !divergent {
            truth.insert((url.clone(), format!("ECO-{upstream}")));
        }
        forks.push(Fork { url, upstream, head, vulnerable });
    }
    commits.flush().unwrap();
    drop(commits);
    let origins_path = dir.join("origins.tsv");
    fs::write(&origins_path, origins).unwrap();
    let advisories_path = dir.join("advisories.jsonl");
    fs::write(&advisories_path, advisories).unwrap();
    let write_diffs = |name: &str, diffs: &[(CommitId, String)]| {
        let mut w = BufWriter::new(File::create(dir.join("diffs").join(name)).unwrap());
        for (c, d) in diffs {
            write_diff_record(&mut w, c, d.as_bytes()).unwrap();
        }
        w.flush().unwrap();
    };
    write_diffs("upstream.diffs", &upstream_diffs);
    write_diffs("forks.diffs", &fork_diffs);
    EcosystemFiles {
        dir: dir.to_path_buf(),
        commits: commits_path,
        origins: origins_path,
        advisories: advisories_path,
        manifests: dir.join("manifests"),
        diffs: dir.join("diffs"),
        truth,
        origin_count: UPSTREAMS + forks.len(),
    }
}

fn fix_diff(u: usize) -> String {
    format!(
        "diff --git a/src/up{u}/core.c b/src/up{u}/core.c\n--- a/src/up{u}/core.c\n+++ b/src/up{u}/core.c\n@@ -20,3 +20,4 @@ int parse(const char *buf, size_t len)\n     if (len == 0)\n         return -1;\n+    if (len > MAX_LEN_{u}) return -1;\n     return decode(buf, len);\n"
    )
}

fn filler_diff(f: usize) -> String {
    format!("diff --git a/NOTES b/NOTES\n--- a/NOTES\n+++ b/NOTES\n@@ -1,1 +1,2 @@\n notes\n+fork {f} maintenance\n")
}

/// Planted ranges of a generated large graph, with their family bounds.
pub struct LargeGraph {
    pub path: PathBuf,
    pub commits: usize,
    pub edges: usize,
    pub ranges: Vec<VulnRange>,
}

/// Streams a forest of repository families to `path` without keeping the
/// graph in memory. Families hold 1k to 50k commits; each commit has one
/// parent among the 50 previous commits of its family (mostly the previous
/// one) and, one time in five, a second parent among the 200 previous.
/// Ranges are introduced in the first half of a family and fixed 100 to
/// 2000 commits later.
pub fn write_large_graph(path: &Path, n_commits: usize, n_ranges: usize, seed: u64) -> LargeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = BufWriter::with_capacity(1 << 22, File::create(path).unwrap());
    let mut families: Vec<(usize, usize)> = Vec::new();
    let mut ids: Vec<CommitId> = Vec::with_capacity(n_commits);
    let mut edges = 0usize;
    let mut line = Vec::with_capacity(160);
    let mut start = 0usize;
    while start < n_commits {
        let size = rng.gen_range(1_000..=50_000).min(n_commits - start);
        for k in 0..size {
            let id = random_id(&mut rng);
            line.clear();
            write!(line, "{id}\t").unwrap();
            if k > 0 {
                let back = if rng.gen_bool(0.7) { 1 } else { rng.gen_range(1..=k.min(50)) };
                write!(line, "{}", ids[start + k - back]).unwrap();
                edges += 1;
                if k > 1 && rng.gen_bool(0.2) {
                    let back2 = rng.gen_range(1..=k.min(200));
                    if back2 != back {
                        write!(line, ",{}", ids[start + k - back2]).unwrap();
                        edges += 1;
                    }
                }
            }
            writeln!(line, "\t{}\t", 1_400_000_000 + (start + k) as i64).unwrap();
            w.write_all(&line).unwrap();
            ids.push(id);
        }
        families.push((start, size));
        start += size;
    }
    w.flush().unwrap();
    let mut ranges = Vec::with_capacity(n_ranges);
    for i in 0..n_ranges {
        let &(fstart, size) = families.choose(&mut rng).unwrap();
        let intro = fstart + rng.gen_range(0..size / 2);
        let fix = (intro + rng.gen_range(100..=2000)).min(fstart + size - 1);
        let mut r = VulnRange::new(format!("PERF-{i:03}"), 0, "https://forge.example/perf");
        r.intro.insert(ids[intro]);
        if fix > intro {
            r.fixed.insert(ids[fix]);
        }
        ranges.push(r);
    }
    LargeGraph { path: path.to_path_buf(), commits: n_commits, edges, ranges }
}

/// Peak resident set size of this process in bytes, when the platform
/// reports it.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Seeded multi-file unified diffs with consistent hunk counts.
pub fn diff_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["len", "buf", "size", "ctx", "ret", "idx", "flags", "node", "err", "val"];
    let mut out = Vec::with_capacity(n);
    for d in 0..n {
        let mut text = String::new();
        for f in 0..rng.gen_range(1..=3) {
            let path = format!("src/mod{d}/file{f}.c");
            text.push_str(&format!(
                "diff --git a/{path} b/{path}\nindex {:07x}..{:07x} 100644\n--- a/{path}\n+++ b/{path}\n",
                rng.gen::<u32>() >> 4,
                rng.gen::<u32>() >> 4
            ));
            let mut at = rng.gen_range(1..400);
            for _ in 0..rng.gen_range(1..=3) {
                let mut body = Vec::new();
                let (mut old, mut new) = (0, 0);
                for _ in 0..rng.gen_range(1..=8) {
                    let indent = "    ".repeat(rng.gen_range(0..3));
                    let stmt = format!(
                        "{indent}{} = {}({}, {});",
                        words.choose(&mut rng).unwrap(),
                        words.choose(&mut rng).unwrap(),
                        words.choose(&mut rng).unwrap(),
                        rng.gen_range(0..1000)
                    );
                    match rng.gen_range(0..3) {
                        0 => {
                            body.push(format!(" {stmt}"));
                            old += 1;
                            new += 1;
                        }
                        1 => {
                            body.push(format!("-{stmt}"));
                            old += 1;
                        }
                        _ => {
                            body.push(format!("+{stmt}"));
                            new += 1;
                        }
                    }
                }
                if !body.iter().any(|l| !l.starts_with(' ')) {
                    body.push(format!("+    /* change {d} */"));
                    new += 1;
                }
                text.push_str(&format!("@@ -{at},{old} +{at},{new} @@ int fn{d}(void)\n"));
                for l in body {
                    text.push_str(&l);
                    text.push('\n');
                }
                at += old + rng.gen_range(5..50);
            }
        }
        out.push(text);
    }
    out
}

/// Shifts every hunk header of `diff` by `delta` lines.
pub fn shift_offsets(diff: &str, delta: usize) -> String {
    diff.lines()
        .map(|l| {
            if let Some(rest) = l.strip_prefix("@@ -") {
                let (ranges, tail) = rest.split_once(" @@").unwrap();
                let (old, new) = ranges.split_once(" +").unwrap();
                let bump = |r: &str| {
                    let (s, n) = r.split_once(',').unwrap();
                    format!("{},{n}", s.parse::<usize>().unwrap() + delta)
                };
                format!("@@ -{} +{} @@{tail}\n", bump(old), bump(new))
            } else {
                format!("{l}\n")
            }
        })
        .collect()
}

/// Re-indents payload lines: spaces become tabs or doubled spaces.
pub fn reindent_payload(diff: &str) -> String {
    diff.lines()
        .map(|l| {
            if (l.starts_with('+') && !l.starts_with("+++")) || (l.starts_with('-') && !l.starts_with("---")) {
                let (sign, body) = l.split_at(1);
                format!("{sign}{}\n", body.replace("    ", "\t").replace(" = ", "  =\t "))
            } else {
                format!("{l}\n")
            }
        })
        .collect()
}

/// Changes one character of the `k`-th payload line.
pub fn mutate_payload(diff: &str, k: usize) -> String {
    let mut seen = 0;
    diff.lines()
        .map(|l| {
            let payload =
                (l.starts_with('+') && !l.starts_with("+++")) || (l.starts_with('-') && !l.starts_with("---"));
            if payload {
                seen += 1;
                if seen - 1 == k {
                    let last = l.chars().last().unwrap();
                    let swapped = if last == ';' { ':' } else { ';' };
                    return format!("{}{swapped}\n", &l[..l.len() - last.len_utf8()]);
                }
            }
            format!("{l}\n")
        })
        .collect()
}

pub fn payload_line_count(diff: &str) -> usize {
    diff.lines()
        .filter(|l| (l.starts_with('+') && !l.starts_with("+++")) || (l.starts_with('-') && !l.starts_with("---")))
        .count()
}
