//! On-disk observation store.
//!
//! Observations are kept in monthly partitions `obs-YYYY-MM.jsonl`, one JSON
//! record per line, sorted by (probe_id, vp_id, window_start). Each partition
//! has a sibling `obs-YYYY-MM.idx.json` recording its digest and the byte
//! range of every probe. Upserts are keyed by (vp, probe, window_start), so
//! re-ingesting the same data leaves every file byte-identical.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LatencyObservation;
use crate::error::{Error, Result};

const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpan {
    pub probe_id: u64,
    pub offset: u64,
    pub len: u64,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionIndex {
    pub partition: String,
    pub records: usize,
    pub sha256: String,
    pub probes: Vec<ProbeSpan>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct UpsertStats {
    pub inserted: usize,
    pub replaced: usize,
    pub unchanged: usize,
}

#[derive(Debug, Clone)]
pub struct ObservationStore {
    root: PathBuf,
}

type Key = (u64, String, DateTime<Utc>);

fn partition_name(t: DateTime<Utc>) -> String {
    format!("{:04}-{:02}", t.year(), t.month())
}

impl ObservationStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
        Ok(ObservationStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn data_path(&self, partition: &str) -> PathBuf {
        self.root.join(format!("obs-{partition}.jsonl"))
    }

    fn index_path(&self, partition: &str) -> PathBuf {
        self.root.join(format!("obs-{partition}.idx.json"))
    }

    /// Partition names (`YYYY-MM`), ascending.
    pub fn partitions(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        let entries = fs::read_dir(&self.root).map_err(|e| Error::io(format!("listing {}", self.root.display()), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io("listing store", e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(p) = name.strip_prefix("obs-").and_then(|n| n.strip_suffix(".jsonl")) {
                out.push(p.to_string());
            }
        }
        out.sort();
        Ok(out)
    }

    /// Data and index files currently in the store.
    pub fn files(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for p in self.partitions()? {
            out.push(self.data_path(&p));
            let idx = self.index_path(&p);
            if idx.exists() {
                out.push(idx);
            }
        }
        Ok(out)
    }

    fn read_partition(&self, partition: &str) -> Result<BTreeMap<Key, LatencyObservation>> {
        let path = self.data_path(partition);
        let mut out = BTreeMap::new();
        if !path.exists() {
            return Ok(out);
        }
        let file = File::open(&path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let obs: LatencyObservation = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
            out.insert((obs.probe_id, obs.vp_id.clone(), obs.window_start), obs);
        }
        Ok(out)
    }

    /// Every stored observation, sorted by (probe_id, vp_id, window_start).
    pub fn load_all(&self) -> Result<Vec<LatencyObservation>> {
        let mut all = BTreeMap::new();
        for p in self.partitions()? {
            all.extend(self.read_partition(&p)?);
        }
        Ok(all.into_values().collect())
    }

    /// Inserts new observations and replaces existing ones with the same key.
    pub fn upsert(&self, observations: impl IntoIterator<Item = LatencyObservation>) -> Result<UpsertStats> {
        let mut by_partition: BTreeMap<String, Vec<LatencyObservation>> = BTreeMap::new();
        for obs in observations {
            by_partition.entry(partition_name(obs.window_start)).or_default().push(obs);
        }
        let mut stats = UpsertStats::default();
        for (partition, incoming) in by_partition {
            let mut records = self.read_partition(&partition)?;
            let mut dirty = false;
            for obs in incoming {
                let key = (obs.probe_id, obs.vp_id.clone(), obs.window_start);
                match records.get(&key) {
                    Some(existing) if *existing == obs => stats.unchanged += 1,
                    Some(_) => {
                        stats.replaced += 1;
                        dirty = true;
                        records.insert(key, obs);
                    }
                    None => {
                        stats.inserted += 1;
                        dirty = true;
                        records.insert(key, obs);
                    }
                }
            }
            if dirty || !self.index_path(&partition).exists() {
                self.write_partition(&partition, records.values())?;
            }
        }
        Ok(stats)
    }

    fn write_partition<'a>(&self, partition: &str, records: impl Iterator<Item = &'a LatencyObservation>) -> Result<()> {
        let mut body = Vec::new();
        let mut spans: Vec<ProbeSpan> = Vec::new();
        let mut count = 0;
        for obs in records {
            let offset = body.len() as u64;
            serde_json::to_writer(&mut body, obs)?;
            body.push(b'\n');
            let len = body.len() as u64 - offset;
            count += 1;
            match spans.last_mut() {
                Some(span) if span.probe_id == obs.probe_id => {
                    span.len += len;
                    span.records += 1;
                }
                _ => spans.push(ProbeSpan {
                    probe_id: obs.probe_id,
                    offset,
                    len,
                    records: 1,
                }),
            }
        }
        let index = PartitionIndex {
            partition: partition.to_string(),
            records: count,
            sha256: hex::encode(Sha256::digest(&body)),
            probes: spans,
        };
        write_atomically(&self.data_path(partition), &body)?;
        let mut idx = serde_json::to_vec_pretty(&index)?;
        idx.push(b'\n');
        write_atomically(&self.index_path(partition), &idx)
    }

    pub fn read_index(&self, partition: &str) -> Result<PartitionIndex> {
        let path = self.index_path(partition);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Takes the store's single-invocation lock.
    pub fn lock(&self) -> Result<StoreLock> {
        StoreLock::acquire(&self.root)
    }
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let ctx = |what: &str| format!("{what} {}", tmp.display());
    let mut f = File::create(&tmp).map_err(|e| Error::io(ctx("creating"), e))?;
    f.write_all(bytes).map_err(|e| Error::io(ctx("writing"), e))?;
    f.sync_all().map_err(|e| Error::io(ctx("syncing"), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming into {}", path.display()), e))
}

/// Exclusive lock on a directory, released on drop.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(StoreLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::StoreLocked { path }),
            Err(e) => Err(Error::io(format!("creating {}", path.display()), e)),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
