//! Append-only, content-addressed commit log for generated artifacts and
//! human decisions, with tamper-evident verification and worktree export.
//!
//! On disk the log is one JSON commit per line. Artifact names are relative
//! paths (`questions/q0001.txt`, `sql/q0001/v1.sql`, ...); the worktree is
//! the latest content of every name.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Clock;

/// Directories every exported worktree contains.
pub const WORKTREE_DIRS: [&str; 4] = ["questions", "sql", "views", "topics"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Payload {
    pub name: String,
    pub digest: String,
    pub content: String,
}

impl Payload {
    pub fn new(name: impl Into<String>, content: impl Into<String>) -> Self {
        let content = content.into();
        Self { name: name.into(), digest: content_digest(&content), content }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Commit {
    pub commit_id: String,
    pub parent_id: Option<String>,
    pub author: String,
    pub timestamp_ms: u64,
    pub message: String,
    pub payloads: Vec<Payload>,
}

impl Commit {
    /// Recomputes the id from the header fields and payload digests.
    pub fn compute_id(&self) -> String {
        let mut h = Sha256::new();
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(self.parent_id.as_deref().unwrap_or("").as_bytes());
        field(self.author.as_bytes());
        field(&self.timestamp_ms.to_le_bytes());
        field(self.message.as_bytes());
        let mut entries: Vec<_> = self.payloads.iter().map(|p| (p.name.as_str(), p.digest.as_str())).collect();
        entries.sort_unstable();
        for (name, digest) in entries {
            field(name.as_bytes());
            field(digest.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn is_intact(&self) -> bool {
        self.payloads.iter().all(|p| p.digest == content_digest(&p.content)) && self.commit_id == self.compute_id()
    }
}

/// Summary of a commit without payload contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitInfo {
    pub commit_id: String,
    pub parent_id: Option<String>,
    pub author: String,
    pub timestamp_ms: u64,
    pub message: String,
    pub artifacts: Vec<String>,
}

impl From<&Commit> for CommitInfo {
    fn from(c: &Commit) -> Self {
        Self {
            commit_id: c.commit_id.clone(),
            parent_id: c.parent_id.clone(),
            author: c.author.clone(),
            timestamp_ms: c.timestamp_ms,
            message: c.message.clone(),
            artifacts: c.payloads.iter().map(|p| p.name.clone()).collect(),
        }
    }
}

pub fn content_digest(content: &str) -> String {
    hex::encode(Sha256::digest(content.as_bytes()))
}

#[derive(Debug, Error)]
pub enum VersionError {
    #[error("a commit needs at least one artifact")]
    EmptyArtifacts,
    #[error("artifact `{0}` appears twice in one commit")]
    DuplicateArtifact(String),
    #[error("artifact name `{0}` is not a relative path")]
    InvalidName(String),
    #[error("commit chain failed verification")]
    Unverified,
    #[error("corrupt log at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub struct VersionStore {
    commits: Vec<Commit>,
    path: Option<PathBuf>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for VersionStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VersionStore").field("commits", &self.commits.len()).field("path", &self.path).finish()
    }
}

impl VersionStore {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self { commits: Vec::new(), path: None, clock }
    }

    /// Opens (or starts) the log at `path`. An existing log must verify.
    pub fn open(path: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self, VersionError> {
        let path = path.into();
        let commits = if path.exists() { read_log(&path)? } else { Vec::new() };
        if !chain_is_valid(&commits) {
            return Err(VersionError::Unverified);
        }
        Ok(Self { commits, path: Some(path), clock })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.commits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commits.is_empty()
    }

    pub fn head(&self) -> Option<&Commit> {
        self.commits.last()
    }

    pub fn commits(&self) -> &[Commit] {
        &self.commits
    }

    pub fn get(&self, commit_id: &str) -> Option<&Commit> {
        self.commits.iter().find(|c| c.commit_id == commit_id)
    }

    /// Appends a commit of `artifacts` (name, content) and returns its id.
    pub fn commit(
        &mut self,
        artifacts: Vec<(String, String)>,
        author: &str,
        message: &str,
    ) -> Result<String, VersionError> {
        if artifacts.is_empty() {
            return Err(VersionError::EmptyArtifacts);
        }
        let mut names = BTreeSet::new();
        for (name, _) in &artifacts {
            validate_name(name)?;
            if !names.insert(name.as_str()) {
                return Err(VersionError::DuplicateArtifact(name.clone()));
            }
        }
        let mut commit = Commit {
            commit_id: String::new(),
            parent_id: self.head().map(|c| c.commit_id.clone()),
            author: author.into(),
            timestamp_ms: self.clock.now_ms(),
            message: message.into(),
            payloads: artifacts.into_iter().map(|(n, c)| Payload::new(n, c)).collect(),
        };
        commit.commit_id = commit.compute_id();
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_string(&commit).expect("commit serializes");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.sync_data()?;
        }
        let id = commit.commit_id.clone();
        self.commits.push(commit);
        Ok(id)
    }

    /// True iff every commit id recomputes, every payload matches its
    /// digest and every parent resolves to the preceding commit. A file
    /// backed store is re-read from disk.
    pub fn verify_chain(&self) -> bool {
        match &self.path {
            Some(path) if path.exists() => read_log(path).is_ok_and(|c| chain_is_valid(&c)),
            Some(_) => self.commits.is_empty(),
            None => chain_is_valid(&self.commits),
        }
    }

    /// Latest content of every artifact name.
    pub fn head_tree(&self) -> BTreeMap<&str, &str> {
        let mut tree = BTreeMap::new();
        for c in &self.commits {
            for p in &c.payloads {
                tree.insert(p.name.as_str(), p.content.as_str());
            }
        }
        tree
    }

    /// Writes the head tree under `dir`. The chain must verify first.
    pub fn export_worktree(&self, dir: &Path) -> Result<(), VersionError> {
        if !self.verify_chain() {
            return Err(VersionError::Unverified);
        }
        prepare_dir(dir)?;
        for (name, content) in self.head_tree() {
            write_artifact(dir, name, content)?;
        }
        Ok(())
    }

    /// Materializes the worktree by applying commits one by one from the
    /// root; must match `export_worktree` byte for byte.
    pub fn replay_into(&self, dir: &Path) -> Result<(), VersionError> {
        if !self.verify_chain() {
            return Err(VersionError::Unverified);
        }
        prepare_dir(dir)?;
        for c in &self.commits {
            for p in &c.payloads {
                write_artifact(dir, &p.name, &p.content)?;
            }
        }
        Ok(())
    }
}

fn validate_name(name: &str) -> Result<(), VersionError> {
    let path = Path::new(name);
    let ok = !name.is_empty()
        && !name.contains('\\')
        && path.components().all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(VersionError::InvalidName(name.into()))
    }
}

fn chain_is_valid(commits: &[Commit]) -> bool {
    let mut parent: Option<&str> = None;
    for c in commits {
        if c.parent_id.as_deref() != parent || !c.is_intact() {
            return false;
        }
        let mut names = BTreeSet::new();
        if c.payloads.is_empty()
            || !c.payloads.iter().all(|p| validate_name(&p.name).is_ok() && names.insert(&p.name))
        {
            return false;
        }
        parent = Some(&c.commit_id);
    }
    true
}

fn read_log(path: &Path) -> Result<Vec<Commit>, VersionError> {
    let bytes = fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| VersionError::Corrupt { line: 0, message: e.to_string() })?;
    let Some(body) = text.strip_suffix('\n').or(if text.is_empty() { Some("") } else { None }) else {
        return Err(VersionError::Corrupt { line: text.lines().count(), message: "missing final newline".into() });
    };
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split('\n')
        .enumerate()
        .map(|(i, line)| {
            let corrupt = |message: String| VersionError::Corrupt { line: i + 1, message };
            let commit: Commit = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
            if serde_json::to_string(&commit).expect("commit serializes") != line {
                return Err(corrupt("line is not the canonical encoding of its commit".into()));
            }
            Ok(commit)
        })
        .collect()
}

fn prepare_dir(dir: &Path) -> io::Result<()> {
    for sub in WORKTREE_DIRS {
        fs::create_dir_all(dir.join(sub))?;
    }
    Ok(())
}

fn write_artifact(dir: &Path, name: &str, content: &str) -> io::Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(content.as_bytes())?;
    w.flush()
}
