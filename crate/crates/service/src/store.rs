//! On-disk layout under the storage directory:
//!
//! ```text
//! images/<id>.png
//! banks/<id>/bank.json, manifest.json, step_*.bin
//! jobs/<id>/job.json, events.jsonl, steps.jsonl, result.png, previews/<t>.png
//! ```
//!
//! Files other than `events.jsonl` are written whole via rename.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use dragedit_core::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::jobs::{Job, JobEvent};

/// Hex digest of the length-prefixed parts.
pub fn content_id(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())[..32].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankInfo {
    pub v: u32,
    pub id: String,
    pub image: String,
    pub reference: Option<String>,
    pub prompt: String,
    pub steps: usize,
    pub has_reference: bool,
    pub profile_hash: String,
    pub preparing_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["images", "banks", "jobs"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Store { root })
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    pub fn put_image(&self, png: &[u8]) -> Result<String> {
        let id = content_id(&[png]);
        let path = self.image_path(&id);
        if !path.exists() {
            write_atomic(&path, png)?;
        }
        Ok(id)
    }

    pub fn bank_dir(&self, id: &str) -> PathBuf {
        self.root.join("banks").join(id)
    }

    pub fn bank_info(&self, id: &str) -> Option<BankInfo> {
        let text = fs::read_to_string(self.bank_dir(id).join("bank.json")).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Written last, so a bank directory without it is incomplete.
    pub fn put_bank_info(&self, info: &BankInfo) -> Result<()> {
        write_atomic(
            &self.bank_dir(&info.id).join("bank.json"),
            &serde_json::to_vec_pretty(info)?,
        )
    }

    pub fn job_dir(&self, id: &str) -> PathBuf {
        self.root.join("jobs").join(id)
    }

    pub fn preview_path(&self, id: &str, t: usize) -> PathBuf {
        self.job_dir(id).join("previews").join(format!("{t}.png"))
    }

    pub fn result_path(&self, id: &str) -> PathBuf {
        self.job_dir(id).join("result.png")
    }

    pub fn save_job(&self, job: &Job) -> Result<()> {
        let dir = self.job_dir(&job.id);
        fs::create_dir_all(dir.join("previews"))?;
        write_atomic(&dir.join("job.json"), &serde_json::to_vec_pretty(job)?)
    }

    pub fn append_event(&self, id: &str, event: &JobEvent) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.job_dir(id).join("events.jsonl"))?;
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        f.write_all(&line)?;
        Ok(())
    }

    pub fn reset_events(&self, id: &str) -> Result<()> {
        let path = self.job_dir(id).join("events.jsonl");
        if path.exists() {
            fs::remove_file(path)?;
        }
        Ok(())
    }

    /// Every persisted job with its event log. Unreadable trailing event
    /// lines (a torn write) are dropped.
    pub fn load_jobs(&self) -> Result<Vec<(Job, Vec<JobEvent>)>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("jobs"))? {
            let dir = entry?.path();
            let Ok(text) = fs::read_to_string(dir.join("job.json")) else {
                continue;
            };
            let job: Job = match serde_json::from_str(&text) {
                Ok(j) => j,
                Err(e) => {
                    log::warn!("skipping {}: {e}", dir.display());
                    continue;
                }
            };
            let events = fs::read_to_string(dir.join("events.jsonl"))
                .unwrap_or_default()
                .lines()
                .map_while(|l| serde_json::from_str(l).ok())
                .collect();
            out.push((job, events));
        }
        out.sort_by_key(|(j, _)| j.seq);
        Ok(out)
    }
}
