//! On-disk memory bank container.
//!
//! A bank is a directory:
//!
//! ```text
//! manifest.json      {"v":1, "steps", "latent_shape", "has_reference",
//!                     "profile_hash", "prompt", "kv_tokens", "heads",
//!                     "head_dim", "entries": [{"t", "file"}]}
//! step_0001.bin      one blob per step
//! ...
//! ```
//!
//! Blob layout, all integers little-endian:
//!
//! ```text
//! magic   b"DBNK"
//! version u16 (= 1)
//! count   u32                      number of tensors that follow
//! tensor  dtype u8 (1 = f64) | rank u8 | dims u32 × rank | raw data
//! ```
//!
//! Tensor order per step: `z_gud`, then `K`, `V` for every site and head in
//! decoder order; with a reference, `z_ref` and its `K`, `V` follow in the
//! same order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::backend::{AttentionRecord, HeadKv, SiteKv};
use crate::error::{Error, Result};
use crate::inversion::{BankEntry, MemoryBank};
use crate::tensor::Latent;

const MAGIC: &[u8; 4] = b"DBNK";
const BLOB_VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub t: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub v: u32,
    pub steps: usize,
    pub latent_shape: [usize; 3],
    pub has_reference: bool,
    pub profile_hash: String,
    pub prompt: String,
    pub kv_tokens: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(dir.as_ref().join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.v != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported bank manifest version {}",
                manifest.v
            )));
        }
        Ok(manifest)
    }
}

pub fn write_bank(bank: &MemoryBank, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let first = bank.lookup(1)?;
    let (c, h, w) = first.z_gud.shape();
    let mut entries = Vec::with_capacity(bank.steps());
    for entry in bank.entries() {
        let file = format!("step_{:04}.bin", entry.t);
        let mut tensors: Vec<ArrayD<f64>> = vec![entry.z_gud.data.clone().into_dyn()];
        push_record(&mut tensors, &entry.kv_gud);
        if let (Some(z_ref), Some(kv_ref)) = (&entry.z_ref, &entry.kv_ref) {
            tensors.push(z_ref.data.clone().into_dyn());
            push_record(&mut tensors, kv_ref);
        }
        let mut out = fs::File::create(dir.join(&file))?;
        write_blob(&mut out, &tensors)?;
        entries.push(ManifestEntry { t: entry.t, file });
    }
    let manifest = Manifest {
        v: MANIFEST_VERSION,
        steps: bank.steps(),
        latent_shape: [c, h, w],
        has_reference: bank.has_reference,
        profile_hash: bank.profile_hash.clone(),
        prompt: bank.prompt.clone(),
        kv_tokens: first.kv_gud.token_counts(),
        heads: first.kv_gud.sites.first().map_or(0, |s| s.heads.len()),
        head_dim: first
            .kv_gud
            .sites
            .first()
            .and_then(|s| s.heads.first())
            .map_or(0, |h| h.keys.ncols()),
        entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_bank(dir: impl AsRef<Path>) -> Result<MemoryBank> {
    let dir = dir.as_ref();
    let manifest = Manifest::read(dir)?;
    if manifest.entries.len() != manifest.steps {
        return Err(Error::Format(format!(
            "manifest lists {} entries for {} steps",
            manifest.entries.len(),
            manifest.steps
        )));
    }
    let [c, h, w] = manifest.latent_shape;
    let mut entries = Vec::with_capacity(manifest.steps);
    for me in &manifest.entries {
        let mut file = fs::File::open(dir.join(&me.file))?;
        let mut tensors = read_blob(&mut file)?.into_iter();
        let z_gud = take_latent(&mut tensors, (c, h, w), me.t, "z_gud")?;
        let kv_gud = take_record(&mut tensors, &manifest, me.t)?;
        let (z_ref, kv_ref) = if manifest.has_reference {
            let z = take_latent(&mut tensors, (c, h, w), me.t, "z_ref")?;
            (Some(z), Some(take_record(&mut tensors, &manifest, me.t)?))
        } else {
            (None, None)
        };
        if tensors.next().is_some() {
            return Err(Error::Format(format!("step {}: trailing tensors", me.t)));
        }
        entries.push(BankEntry {
            t: me.t,
            z_gud,
            kv_gud,
            z_ref,
            kv_ref,
        });
    }
    MemoryBank::from_entries(entries, manifest.prompt, manifest.profile_hash)
}

fn take_latent(
    tensors: &mut impl Iterator<Item = ArrayD<f64>>,
    shape: (usize, usize, usize),
    t: usize,
    what: &str,
) -> Result<Latent> {
    let data: Array3<f64> = tensors
        .next()
        .ok_or_else(|| Error::Format(format!("step {t}: missing {what}")))?
        .into_dimensionality()
        .map_err(|e| Error::Format(e.to_string()))?;
    if data.dim() != shape {
        return Err(Error::Format(format!("step {t}: {what} shape {:?}", data.dim())));
    }
    Ok(Latent::new(data))
}

fn push_record(out: &mut Vec<ArrayD<f64>>, record: &AttentionRecord) {
    for site in &record.sites {
        for head in &site.heads {
            out.push(head.keys.clone().into_dyn());
            out.push(head.values.clone().into_dyn());
        }
    }
}

fn take_record(
    tensors: &mut impl Iterator<Item = ArrayD<f64>>,
    manifest: &Manifest,
    t: usize,
) -> Result<AttentionRecord> {
    let mut sites = Vec::with_capacity(manifest.kv_tokens.len());
    for &tokens in &manifest.kv_tokens {
        let mut heads = Vec::with_capacity(manifest.heads);
        for _ in 0..manifest.heads {
            let mut next = || -> Result<Array2<f64>> {
                let arr: Array2<f64> = tensors
                    .next()
                    .ok_or_else(|| Error::Format(format!("step {t}: missing K/V")))?
                    .into_dimensionality()
                    .map_err(|e| Error::Format(e.to_string()))?;
                if arr.dim() != (tokens, manifest.head_dim) {
                    return Err(Error::Format(format!(
                        "step {t}: K/V shape {:?}, expected ({tokens}, {})",
                        arr.dim(),
                        manifest.head_dim
                    )));
                }
                Ok(arr)
            };
            let keys = next()?;
            let values = next()?;
            heads.push(HeadKv { keys, values });
        }
        sites.push(SiteKv { heads });
    }
    Ok(AttentionRecord { sites })
}

pub fn write_blob(out: &mut impl Write, tensors: &[ArrayD<f64>]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.push(DTYPE_F64);
        buf.push(t.ndim() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_blob(input: &mut impl Read) -> Result<Vec<ArrayD<f64>>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad blob magic".into()));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != BLOB_VERSION {
        return Err(Error::Format(format!("unsupported blob version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let dtype = cur.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
        }
        let rank = cur.take(1)?[0] as usize;
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = cur.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::Format(e.to_string()))?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in blob".into()));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated blob".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
