//! Visual cross-attention: decoder self-attention reads keys and values from
//! the memory bank instead of the current pass.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::softmax_rows;
use crate::backend::{AttentionRecord, HeadKv, SiteKv};
use crate::error::{Error, Result};
use crate::inversion::BankEntry;
use crate::tasks::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    GudOnly,
    /// Original-image K/V followed by reference-image K/V along the token axis.
    GudConcatRef,
}

impl KvMode {
    pub fn for_task(kind: TaskKind) -> KvMode {
        match kind {
            TaskKind::Moving | TaskKind::Resizing | TaskKind::Dragging => KvMode::GudOnly,
            TaskKind::Pasting | TaskKind::Replacing => KvMode::GudConcatRef,
        }
    }
}

/// K/V to substitute at every decoder self-attention site for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPlan {
    pub mode: KvMode,
    pub record: AttentionRecord,
}

impl KvPlan {
    pub fn token_counts(&self) -> Vec<usize> {
        self.record.token_counts()
    }

    /// Attention of `queries` against head `head` of site `site`.
    pub fn attend(&self, site: usize, head: usize, queries: ArrayView2<f64>) -> Result<Array2<f64>> {
        let kv = self
            .record
            .sites
            .get(site)
            .and_then(|s| s.heads.get(head))
            .ok_or_else(|| Error::contract("site", format!("no site {site} head {head}")))?;
        attend(queries, kv.keys.view(), kv.values.view())
    }
}

pub fn build_kv_plan(entry: &BankEntry, kind: TaskKind) -> Result<KvPlan> {
    let mode = KvMode::for_task(kind);
    let record = match mode {
        KvMode::GudOnly => entry.kv_gud.clone(),
        KvMode::GudConcatRef => {
            let kv_ref = entry.kv_ref.as_ref().ok_or_else(|| {
                Error::contract(
                    "bank",
                    format!("{kind:?} needs a memory bank built with a reference image"),
                )
            })?;
            concat_records(&entry.kv_gud, kv_ref)?
        }
    };
    Ok(KvPlan { mode, record })
}

fn concat_records(first: &AttentionRecord, second: &AttentionRecord) -> Result<AttentionRecord> {
    if first.sites.len() != second.sites.len() {
        return Err(Error::contract("bank", "reference K/V site count differs"));
    }
    let sites = first
        .sites
        .iter()
        .zip(&second.sites)
        .map(|(a, b)| SiteKv {
            heads: a
                .heads
                .iter()
                .zip(&b.heads)
                .map(|(x, y)| HeadKv {
                    keys: concatenate![Axis(0), x.keys, y.keys],
                    values: concatenate![Axis(0), x.values, y.values],
                })
                .collect(),
        })
        .collect();
    Ok(AttentionRecord { sites })
}

/// Row-stochastic attention weights `softmax(Q Kᵀ / √d)`.
pub fn attention_weights(queries: ArrayView2<f64>, keys: ArrayView2<f64>) -> Result<Array2<f64>> {
    if queries.ncols() != keys.ncols() {
        return Err(Error::contract(
            "queries",
            format!("query dim {} != key dim {}", queries.ncols(), keys.ncols()),
        ));
    }
    let d = keys.ncols() as f64;
    let logits = queries.dot(&keys.t()) / d.sqrt();
    Ok(softmax_rows(logits.view()))
}

/// `softmax(Q Kᵀ / √d) V` for one head.
pub fn attend(
    queries: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    values: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if keys.nrows() != values.nrows() {
        return Err(Error::contract("values", "key and value token counts differ"));
    }
    Ok(attention_weights(queries, keys)?.dot(&values))
}
