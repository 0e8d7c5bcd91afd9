//! The artifact directory: content-addressed checkpoints, run records,
//! per-stage status and a hash table of every file written.
//!
//! ```text
//! <dir>/manifest.toml
//! <dir>/status.json          stage -> {key, state, outputs, errors}
//! <dir>/hashes.json          relative path -> sha256
//! <dir>/checkpoints/<id>.ckpt
//! <dir>/runs/<stage>/.../record.json, metrics.jsonl
//! <dir>/analysis/*.csv
//! <dir>/landscape/<at>/grid.csv, meta.json
//! <dir>/export/...
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cooldown_lab::model::Checkpoint;
use cooldown_lab::trainer::{RunOutput, RunRecord};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageState {
    Done,
    /// Finished, but some cells failed; see `errors`.
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub key: String,
    pub state: StageState,
    pub outputs: Vec<String>,
    pub errors: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A run as stored on disk.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    status: BTreeMap<String, StageStatus>,
    hashes: BTreeMap<String, String>,
}

impl Store {
    pub fn open(root: &Path) -> Result<Store> {
        std::fs::create_dir_all(root.join("checkpoints")).with_context(|| format!("creating {}", root.display()))?;
        let status = read_json_or_default(&root.join("status.json"))?;
        let hashes = read_json_or_default(&root.join("hashes.json"))?;
        Ok(Store {
            root: root.to_path_buf(),
            status,
            hashes,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn status(&self) -> &BTreeMap<String, StageStatus> {
        &self.status
    }

    pub fn hashes(&self) -> &BTreeMap<String, String> {
        &self.hashes
    }

    /// Write `bytes` to `rel` atomically and record its hash.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<String> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &path).with_context(|| format!("renaming to {}", path.display()))?;
        self.hashes.insert(rel.to_string(), sha256_hex(bytes));
        Ok(rel.to_string())
    }

    pub fn read_to_string(&self, rel: &str) -> Result<String> {
        std::fs::read_to_string(self.path(rel)).with_context(|| format!("reading {rel}"))
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    pub fn store_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<String> {
        let id = ckpt.content_id();
        let rel = format!("checkpoints/{id}.ckpt");
        if !self.exists(&rel) {
            self.write(&rel, &ckpt.to_bytes())?;
        } else {
            self.hashes.insert(rel, id.clone());
        }
        Ok(id)
    }

    pub fn load_checkpoint(&self, id: &str) -> Result<Checkpoint> {
        Ok(Checkpoint::load(&self.root.join("checkpoints"), id)?)
    }

    /// Record, metrics and final checkpoint of a run under `dir`. Returns
    /// the written relative paths.
    pub fn save_run(&mut self, dir: &str, run: &RunOutput) -> Result<Vec<String>> {
        let id = self.store_checkpoint(&run.checkpoint)?;
        let mut out = vec![format!("checkpoints/{id}.ckpt")];
        if let Some(b) = &run.boundary {
            let bid = self.store_checkpoint(b)?;
            out.push(format!("checkpoints/{bid}.ckpt"));
        }
        let record = serde_json::to_vec_pretty(&run.record)?;
        out.push(self.write(&format!("{dir}/record.json"), &record)?);
        out.push(self.write(&format!("{dir}/metrics.jsonl"), run.record.metrics_jsonl().as_bytes())?);
        Ok(out)
    }

    pub fn load_run(&self, dir: &str) -> Result<StoredRun> {
        let record: RunRecord = serde_json::from_str(&self.read_to_string(&format!("{dir}/record.json"))?)
            .with_context(|| format!("parsing {dir}/record.json"))?;
        let checkpoint = self.load_checkpoint(&record.final_checkpoint)?;
        Ok(StoredRun { record, checkpoint })
    }

    /// Whether `stage` completed with `key` and all its outputs still exist.
    pub fn is_fresh(&self, stage: &str, key: &str) -> bool {
        match self.status.get(stage) {
            Some(s) => s.key == key && s.state != StageState::Failed && s.outputs.iter().all(|o| self.exists(o)),
            None => false,
        }
    }

    pub fn stage_status(&self, stage: &str) -> Option<&StageStatus> {
        self.status.get(stage)
    }

    pub fn set_status(&mut self, stage: &str, status: StageStatus) -> Result<()> {
        self.status.insert(stage.to_string(), status);
        self.flush()
    }

    pub fn flush(&self) -> Result<()> {
        write_json(&self.root.join("status.json"), &self.status)?;
        write_json(&self.root.join("hashes.json"), &self.hashes)
    }

    /// Files whose current hash differs from the recorded one, or that are
    /// missing; checkpoints are additionally checked against their names.
    pub fn verify(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (rel, want) in &self.hashes {
            match std::fs::read(self.path(rel)) {
                Ok(bytes) => {
                    let got = sha256_hex(&bytes);
                    if &got != want {
                        problems.push(format!("{rel}: hash {got} != recorded {want}"));
                    } else if let Some(id) = rel.strip_prefix("checkpoints/").and_then(|f| f.strip_suffix(".ckpt")) {
                        if id != got {
                            problems.push(format!("{rel}: content hash {got} does not match its name"));
                        }
                    }
                }
                Err(e) => problems.push(format!("{rel}: {e}")),
            }
        }
        problems
    }
}

fn read_json_or_default<T: Default + for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    match std::fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(T::default()),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

/// Stage key: SHA-256 over the JSON of its inputs.
pub fn stage_key<T: Serialize>(inputs: &T) -> String {
    sha256_hex(&serde_json::to_vec(inputs).expect("stage inputs serialize"))
}

/// Fail unless every stage in `stages` exists and is not failed.
pub fn require(store: &Store, stages: &[&str]) -> Result<()> {
    for s in stages {
        match store.stage_status(s) {
            Some(st) if st.state != StageState::Failed => {}
            _ => bail!("stage `{s}` has not completed"),
        }
    }
    Ok(())
}
