//! Resumable execution of a plan.
//!
//! Each distinct query key is resolved once. Workers send outcomes to a single
//! writer that appends them to `checkpoint.jsonl`; a rerun in the same
//! directory skips every key already checkpointed. Results are assembled in
//! manifest order only after every key is resolved, so completion order and
//! parallelism never reach the output.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use super::{plan_from_config, Condition, Plan, RunConfig};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, QueryOutcome, RecordCache};

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunDir { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.jsonl")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.jsonl")
    }

    pub fn incomplete(&self) -> PathBuf {
        self.root.join("incomplete.json")
    }

    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub index: usize,
    pub condition: Condition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respondent_id: Option<String>,
    pub target_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<bool>,
    pub canonical_hash: String,
    pub query_key: String,
    pub outcome: QueryOutcome,
}

/// Resolved outcomes for every manifest entry, in manifest order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultSet {
    pub entries: Vec<ResultEntry>,
}

impl ResultSet {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    /// Reads `results.jsonl`; a missing or empty file is `Error::NoResults`.
    pub fn read(path: &Path) -> Result<Self> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::NoResults),
            Err(e) => return Err(Error::io(path, e)),
        };
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ResultEntry>, _>>()?;
        if entries.is_empty() {
            return Err(Error::NoResults);
        }
        Ok(ResultSet { entries })
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let mut out: Vec<Condition> = self.entries.iter().map(|e| e.condition).collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn of(&self, condition: Condition) -> impl Iterator<Item = &ResultEntry> {
        self.entries.iter().filter(move |e| e.condition == condition)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedQuery {
    pub query_key: String,
    pub canonical_hash: String,
    pub message: String,
}

/// Machine-readable remainder of an incomplete run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Remainder {
    pub run_id: String,
    pub total: usize,
    /// Manifest indices without an outcome.
    pub unresolved: Vec<usize>,
    pub errors: Vec<FailedQuery>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Complete(ResultSet),
    Incomplete(Remainder),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecuteOptions {
    pub parallelism: usize,
    /// Resolve at most this many pending queries, then stop as incomplete.
    pub stop_after: Option<usize>,
}

impl Default for ExecuteOptions {
    fn default() -> Self {
        ExecuteOptions {
            parallelism: 1,
            stop_after: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointLine {
    key: String,
    outcome: QueryOutcome,
}

fn read_checkpoint(path: &Path) -> Result<HashMap<String, QueryOutcome>> {
    let mut done = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(Error::io(path, e)),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // a crash can leave a torn final line; its query is simply redone
        match serde_json::from_str::<CheckpointLine>(&line) {
            Ok(c) => {
                done.insert(c.key, c.outcome);
            }
            Err(e) => log::warn!("ignoring unreadable checkpoint line {}: {e}", i + 1),
        }
    }
    Ok(done)
}

/// Writes the manifest, or checks that an existing one matches.
fn claim_manifest(plan: &Plan, dir: &RunDir) -> Result<()> {
    let text = plan.manifest.to_jsonl()?;
    let path = dir.manifest();
    match fs::read_to_string(&path) {
        Ok(existing) if existing == text => Ok(()),
        Ok(_) => Err(Error::Config(format!(
            "{} holds a different manifest; use a fresh run directory",
            path.display()
        ))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        }
        Err(e) => Err(Error::io(&path, e)),
    }
}

/// Resolves every entry of `plan`, checkpointing as it goes.
pub fn execute(
    plan: &Plan,
    gateway: &Gateway,
    dir: &RunDir,
    options: &ExecuteOptions,
) -> Result<RunStatus> {
    claim_manifest(plan, dir)?;
    let manifest = &plan.manifest;
    let decoding = plan.format().decoding;
    let keys: Vec<String> = manifest
        .entries
        .iter()
        .map(|e| gateway.key_for(&e.canonical_hash, &decoding, Some(&e.subject())))
        .collect();

    let mut done = read_checkpoint(&dir.checkpoint())?;
    let mut queued = HashSet::new();
    let pending: Vec<usize> = keys
        .iter()
        .enumerate()
        .filter(|(_, k)| !done.contains_key(*k) && queued.insert(k.as_str()))
        .map(|(i, _)| i)
        .collect();
    let limit = options.stop_after.unwrap_or(usize::MAX).min(pending.len());
    log::info!(
        "run {}: {} entries, {} distinct queries pending, {} already resolved",
        manifest.header.run_id,
        manifest.entries.len(),
        pending.len(),
        done.len()
    );

    let mut errors = Vec::new();
    if limit > 0 {
        let checkpoint_path = dir.checkpoint();
        let mut checkpoint = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&checkpoint_path)
            .map_err(|e| Error::io(&checkpoint_path, e))?;
        let torn = fs::read(&checkpoint_path)
            .map(|b| b.last().is_some_and(|&c| c != b'\n'))
            .unwrap_or(false);
        if torn {
            checkpoint
                .write_all(b"\n")
                .map_err(|e| Error::io(&checkpoint_path, e))?;
        }
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let workers = options.parallelism.clamp(1, limit);
        let (tx, rx) = mpsc::channel::<(usize, std::result::Result<QueryOutcome, String>)>();

        std::thread::scope(|scope| -> Result<()> {
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, abort, pending, keys) = (&next, &abort, &pending, &keys);
                scope.spawn(move || loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let slot = next.fetch_add(1, Ordering::SeqCst);
                    if slot >= limit {
                        break;
                    }
                    let i = pending[slot];
                    let entry = &manifest.entries[i];
                    let outcome = resolve_entry(plan, gateway, entry, &keys[i]);
                    if outcome.is_err() {
                        abort.store(true, Ordering::SeqCst);
                    }
                    if tx.send((i, outcome)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (i, outcome) in rx {
                match outcome {
                    Ok(outcome) => {
                        let line = CheckpointLine {
                            key: keys[i].clone(),
                            outcome,
                        };
                        let mut bytes = serde_json::to_vec(&line)?;
                        bytes.push(b'\n');
                        checkpoint
                            .write_all(&bytes)
                            .and_then(|_| checkpoint.flush())
                            .map_err(|e| Error::io(&checkpoint_path, e))?;
                        done.insert(line.key, line.outcome);
                    }
                    Err(message) => errors.push(FailedQuery {
                        query_key: keys[i].clone(),
                        canonical_hash: manifest.entries[i].canonical_hash.clone(),
                        message,
                    }),
                }
            }
            Ok(())
        })?;
    }

    let unresolved: Vec<usize> = (0..keys.len())
        .filter(|&i| !done.contains_key(&keys[i]))
        .collect();
    if !unresolved.is_empty() {
        errors.sort_by(|a, b| a.query_key.cmp(&b.query_key));
        let remainder = Remainder {
            run_id: manifest.header.run_id.clone(),
            total: keys.len(),
            unresolved,
            errors,
        };
        let path = dir.incomplete();
        let mut text = serde_json::to_string_pretty(&remainder)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        return Ok(RunStatus::Incomplete(remainder));
    }

    let results = ResultSet {
        entries: manifest
            .entries
            .iter()
            .zip(&keys)
            .map(|(e, k)| ResultEntry {
                index: e.index,
                condition: e.condition,
                respondent_id: e.respondent_id.clone(),
                target_id: e.target_id.clone(),
                variant: e.variant,
                gold: e.gold,
                canonical_hash: e.canonical_hash.clone(),
                query_key: k.clone(),
                outcome: done[k].clone(),
            })
            .collect(),
    };
    results.write(&dir.results())?;
    match fs::remove_file(dir.incomplete()) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => {
            return Err(Error::io(dir.incomplete(), e))
        }
        _ => {}
    }
    Ok(RunStatus::Complete(results))
}

fn resolve_entry(
    plan: &Plan,
    gateway: &Gateway,
    entry: &super::ManifestEntry,
    key: &str,
) -> std::result::Result<QueryOutcome, String> {
    let prompt = plan.render(entry).map_err(|e| e.to_string())?;
    if prompt.canonical_hash() != entry.canonical_hash {
        return Err(format!(
            "entry {} renders to {}, manifest says {}",
            entry.index,
            prompt.canonical_hash(),
            entry.canonical_hash
        ));
    }
    let subject = entry.subject();
    let record = gateway
        .resolve(&prompt, Some(&subject))
        .map_err(|e| e.to_string())?;
    if record.key != key {
        return Err(format!("cache returned record {} for key {key}", record.key));
    }
    Ok(record.outcome)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub parallelism: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub stop_after: Option<usize>,
}

/// Plans and executes a configured run in `run_dir`.
pub fn run(config: &RunConfig, run_dir: &Path, options: &RunOptions) -> Result<RunStatus> {
    let plan = plan_from_config(config)?;
    let dir = RunDir::create(run_dir)?;
    let cache = RecordCache::open(options.cache_dir.clone().unwrap_or_else(|| dir.cache()))?;
    let gateway = Gateway::new(config.backend.build()?)
        .with_cache(cache)
        .with_retry(config.backend.retry);
    let exec = ExecuteOptions {
        parallelism: options.parallelism.unwrap_or(config.parallelism),
        stop_after: options.stop_after,
    };
    execute(&plan, &gateway, &dir, &exec)
}
