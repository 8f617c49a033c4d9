//! Expert-feature mining over a git history via the `git` command line.
//!
//! Commits are folded in ascending committer-time order (ties keep `git log`
//! order); every history metric only sees commits processed before the
//! current one. Merge commits are skipped.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use super::{compute_entropy, ExpertFeatureVector, FixDetector};
use crate::error::{Error, Result};

const SECONDS_PER_DAY: f64 = 86_400.0;
const SECONDS_PER_YEAR: f64 = 365.25 * SECONDS_PER_DAY;

#[derive(Debug, Clone, Default)]
pub struct MinerOptions {
    /// Only commits with committer time `<= until` are mined.
    pub until: Option<i64>,
    /// Keyword list for FIX; `None` uses the default list.
    pub fix_keywords: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedCommit {
    pub commit_id: String,
    pub timestamp: i64,
    pub author: String,
    pub features: ExpertFeatureVector,
}

#[derive(Debug)]
struct FileChange {
    path: String,
    added: u64,
    deleted: u64,
    binary: bool,
}

#[derive(Debug)]
struct RawCommit {
    sha: String,
    parent: Option<String>,
    author: String,
    timestamp: i64,
    message: String,
    files: Vec<FileChange>,
}

fn git(repo: &Path) -> Command {
    let mut cmd = Command::new("git");
    cmd.arg("-C").arg(repo);
    cmd
}

fn read_log(repo: &Path) -> Result<Vec<RawCommit>> {
    let output = git(repo)
        .args([
            "log",
            "--reverse",
            "--no-merges",
            "--no-renames",
            "--numstat",
            "--format=%x00%H%x1f%P%x1f%an%x1f%ae%x1f%ct%x1f%B%x1e",
        ])
        .output()
        .map_err(|e| Error::Git(format!("cannot run git: {e}")))?;
    if !output.status.success() {
        return Err(Error::Git(format!(
            "git log failed in {}: {}",
            repo.display(),
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    let text = String::from_utf8_lossy(&output.stdout);
    let mut commits = Vec::new();
    for record in text.split('\0').filter(|r| !r.trim().is_empty()) {
        let (header, stats) = record
            .split_once('\x1e')
            .ok_or_else(|| Error::Git("malformed log record".into()))?;
        let fields: Vec<&str> = header.splitn(6, '\x1f').collect();
        if fields.len() != 6 {
            return Err(Error::Git("malformed log header".into()));
        }
        let parent = fields[1].split_whitespace().next().map(str::to_string);
        let email = fields[3].trim().to_lowercase();
        let author = if email.is_empty() {
            fields[2].trim().to_string()
        } else {
            email
        };
        let timestamp = fields[4]
            .trim()
            .parse()
            .map_err(|_| Error::Git(format!("bad timestamp {:?}", fields[4])))?;
        let mut files = Vec::new();
        for line in stats.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.splitn(3, '\t');
            let (a, d, p) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(d), Some(p)) => (a, d, p),
                _ => return Err(Error::Git(format!("malformed numstat line {line:?}"))),
            };
            let binary = a == "-" || d == "-";
            files.push(FileChange {
                path: p.to_string(),
                added: a.parse().unwrap_or(0),
                deleted: d.parse().unwrap_or(0),
                binary,
            });
        }
        commits.push(RawCommit {
            sha: fields[0].trim().to_string(),
            parent,
            author,
            timestamp,
            message: fields[5].trim_end().to_string(),
            files,
        });
    }
    // stable: equal timestamps keep log order
    commits.sort_by_key(|c| c.timestamp);
    Ok(commits)
}

/// Line counter over a persistent `git cat-file --batch` process.
struct BlobReader {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl BlobReader {
    fn spawn(repo: &Path) -> Result<Self> {
        let mut child = git(repo)
            .args(["cat-file", "--batch"])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Git(format!("cannot run git cat-file: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            child,
            stdin,
            stdout,
        })
    }

    /// Number of lines in `rev:path`, or 0 when the object does not exist.
    fn line_count(&mut self, rev: &str, path: &str) -> Result<u64> {
        let io = |e: std::io::Error| Error::Git(format!("cat-file: {e}"));
        writeln!(self.stdin, "{rev}:{path}").map_err(io)?;
        self.stdin.flush().map_err(io)?;
        let mut header = String::new();
        self.stdout.read_line(&mut header).map_err(io)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            // "<object> missing" or ambiguous
            return Ok(0);
        }
        let size: usize = parts[2]
            .parse()
            .map_err(|_| Error::Git(format!("bad cat-file header {header:?}")))?;
        let mut body = vec![0u8; size + 1];
        self.stdout.read_exact(&mut body).map_err(io)?;
        body.truncate(size);
        if parts[1] != "blob" {
            return Ok(0);
        }
        let newlines = body.iter().filter(|&&b| b == b'\n').count() as u64;
        let trailing = u64::from(!body.is_empty() && body.last() != Some(&b'\n'));
        Ok(newlines + trailing)
    }
}

impl Drop for BlobReader {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn subsystem(path: &str) -> &str {
    match path.split_once('/') {
        Some((first, _)) => first,
        None => "",
    }
}

fn directory(path: &str) -> &str {
    path.rsplit_once('/').map(|(dir, _)| dir).unwrap_or("")
}

#[derive(Default)]
struct History {
    file_last_change: HashMap<String, i64>,
    file_authors: HashMap<String, HashSet<String>>,
    file_commits: HashMap<String, HashSet<usize>>,
    author_commits: HashMap<String, Vec<(i64, HashSet<String>)>>,
}

/// Mines one [`ExpertFeatureVector`] per non-merge commit of `repo_path`.
pub fn mine_repository(repo_path: impl AsRef<Path>, options: &MinerOptions) -> Result<Vec<MinedCommit>> {
    let repo = repo_path.as_ref();
    if !repo.exists() {
        return Err(Error::Git(format!("{} does not exist", repo.display())));
    }
    let fix = match &options.fix_keywords {
        Some(k) => FixDetector::new(k),
        None => FixDetector::default(),
    };
    let mut commits = read_log(repo)?;
    if let Some(until) = options.until {
        commits.retain(|c| c.timestamp <= until);
    }
    let mut blobs = BlobReader::spawn(repo)?;
    let mut hist = History::default();
    let mut out = Vec::with_capacity(commits.len());

    for (idx, c) in commits.iter().enumerate() {
        let t = c.timestamp;
        let paths: Vec<&str> = c.files.iter().map(|f| f.path.as_str()).collect();
        let subsystems: HashSet<String> = paths.iter().map(|p| subsystem(p).to_string()).collect();
        let dirs: HashSet<&str> = paths.iter().map(|p| directory(p)).collect();

        if c.files.iter().any(|f| f.binary) {
            log::warn!("{}: binary changes counted as LA = LD = 0", c.sha);
        }
        let la: u64 = c.files.iter().map(|f| f.added).sum();
        let ld: u64 = c.files.iter().map(|f| f.deleted).sum();
        let modified: Vec<u64> = c.files.iter().map(|f| f.added + f.deleted).collect();
        let entropy = if modified.iter().any(|&m| m > 0) {
            compute_entropy(&modified)?
        } else {
            0.0
        };

        let mut lt_sum = 0.0;
        if let Some(parent) = &c.parent {
            for f in c.files.iter().filter(|f| !f.binary) {
                lt_sum += blobs.line_count(parent, &f.path)? as f64;
            }
        }

        let mut devs: HashSet<&str> = HashSet::new();
        let mut prior: HashSet<usize> = HashSet::new();
        let mut age_sum = 0.0;
        for p in &paths {
            if let Some(a) = hist.file_authors.get(*p) {
                devs.extend(a.iter().map(String::as_str));
            }
            if let Some(cs) = hist.file_commits.get(*p) {
                prior.extend(cs);
            }
            if let Some(last) = hist.file_last_change.get(*p) {
                age_sum += (t - last).max(0) as f64 / SECONDS_PER_DAY;
            }
        }

        let author_hist = hist.author_commits.get(&c.author);
        let exp = author_hist.map_or(0, Vec::len);
        let rexp: f64 = author_hist.map_or(0.0, |h| {
            h.iter()
                .map(|(pt, _)| 1.0 / (1.0 + (t - pt).max(0) as f64 / SECONDS_PER_YEAR))
                .sum()
        });
        let sexp = author_hist.map_or(0, |h| {
            h.iter()
                .filter(|(_, subs)| !subs.is_disjoint(&subsystems))
                .count()
        });

        let nf = c.files.len() as f64;
        let per_file = |sum: f64| if c.files.is_empty() { 0.0 } else { sum / nf };
        let features = ExpertFeatureVector {
            ns: subsystems.len() as f64,
            nd: dirs.len() as f64,
            nf,
            entropy,
            la: la as f64,
            ld: ld as f64,
            lt: per_file(lt_sum),
            fix: if fix.is_fix(&c.message) { 1.0 } else { 0.0 },
            ndev: devs.len() as f64,
            age: per_file(age_sum),
            nuc: prior.len() as f64,
            exp: exp as f64,
            rexp,
            sexp: sexp as f64,
        };
        out.push(MinedCommit {
            commit_id: c.sha.clone(),
            timestamp: t,
            author: c.author.clone(),
            features,
        });

        for p in &paths {
            hist.file_last_change.insert(p.to_string(), t);
            hist.file_authors
                .entry(p.to_string())
                .or_default()
                .insert(c.author.clone());
            hist.file_commits.entry(p.to_string()).or_default().insert(idx);
        }
        hist.author_commits
            .entry(c.author.clone())
            .or_default()
            .push((t, subsystems));
    }
    Ok(out)
}
