//! Deterministic DDIM inversion that fills the memory bank.
//!
//! Step `t` (1..=T) maps `z_{t-1}` to `z_t` using the noise predicted for
//! `z_{t-1}` at timestep `t`, the same timestep the sampler uses to walk back
//! from `z_t`. The bank entry for `t` holds `z_t` and the decoder
//! self-attention K/V captured in that predict call.

use serde::{Deserialize, Serialize};

use crate::backend::{AttentionRecord, Capture, Denoiser, PredictArgs, TextCond};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Latent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub t: usize,
    pub z_gud: Latent,
    pub kv_gud: AttentionRecord,
    pub z_ref: Option<Latent>,
    pub kv_ref: Option<AttentionRecord>,
}

impl BankEntry {
    pub fn has_reference(&self) -> bool {
        self.z_ref.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    entries: Vec<BankEntry>,
    pub z_t_gen: Latent,
    pub has_reference: bool,
    pub prompt: String,
    pub profile_hash: String,
}

impl MemoryBank {
    /// Assembles a bank, checking completeness and reference uniformity.
    pub fn from_entries(
        entries: Vec<BankEntry>,
        prompt: String,
        profile_hash: String,
    ) -> Result<Self> {
        let last = entries
            .last()
            .ok_or_else(|| Error::contract("bank", "no entries"))?;
        let has_reference = last.has_reference();
        for (i, e) in entries.iter().enumerate() {
            if e.t != i + 1 {
                return Err(Error::contract("bank", format!("entry {i} has t={}", e.t)));
            }
            if e.z_ref.is_some() != e.kv_ref.is_some() || e.has_reference() != has_reference {
                return Err(Error::contract(
                    "bank",
                    format!("entry t={} has inconsistent reference data", e.t),
                ));
            }
            if let Some(kv_ref) = &e.kv_ref {
                if kv_ref.token_counts() != e.kv_gud.token_counts() {
                    return Err(Error::contract(
                        "bank",
                        format!("entry t={}: reference K/V token counts differ", e.t),
                    ));
                }
            }
        }
        let z_t_gen = last.z_gud.clone();
        Ok(MemoryBank {
            entries,
            z_t_gen,
            has_reference,
            prompt,
            profile_hash,
        })
    }

    pub fn steps(&self) -> usize {
        self.entries.len()
    }

    pub fn lookup(&self, t: usize) -> Result<&BankEntry> {
        if t == 0 {
            return Err(Error::contract("t", "bank is indexed 1..=T"));
        }
        self.entries.get(t - 1).ok_or_else(|| {
            Error::contract("t", format!("step {t} outside 1..={}", self.entries.len()))
        })
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }
}

/// `x̂0` from a latent and its noise estimate.
pub fn predict_x0(z: &Latent, eps: &Latent, alpha_bar: f64) -> Latent {
    Latent::new((&z.data - &(&eps.data * (1.0 - alpha_bar).sqrt())) / alpha_bar.sqrt())
}

/// One deterministic DDIM move from noise level `from` to level `to`, in
/// either direction.
pub fn ddim_transfer(z: &Latent, eps: &Latent, alpha_from: f64, alpha_to: f64) -> Latent {
    let x0 = predict_x0(z, eps, alpha_from);
    Latent::new(&x0.data * alpha_to.sqrt() + &(&eps.data * (1.0 - alpha_to).sqrt()))
}

pub struct InversionInput<'a> {
    pub z0: &'a Latent,
    pub z0_ref: Option<&'a Latent>,
    pub prompt: &'a str,
}

/// Inverts `z0` (and optionally `z0_ref`) over `schedule.steps()` steps.
///
/// Inversion runs the conditional branch only, equivalent to guidance scale 1.
pub fn invert(
    backend: &dyn Denoiser,
    schedule: &NoiseSchedule,
    input: InversionInput<'_>,
) -> Result<MemoryBank> {
    let shape = backend.profile().latent_shape();
    input.z0.check_shape(shape, "z0")?;
    if let Some(r) = input.z0_ref {
        r.check_shape(shape, "z0_ref")?;
    }
    let cond = backend.encode_text(input.prompt);
    let steps = schedule.steps();
    let mut z = input.z0.clone();
    let mut z_ref = input.z0_ref.cloned();
    let mut entries = Vec::with_capacity(steps);
    for t in 1..=steps {
        let (next, kv_gud) = inversion_step(backend, schedule, &cond, &z, t)?;
        let (next_ref, kv_ref) = match &z_ref {
            Some(zr) => {
                let (n, kv) = inversion_step(backend, schedule, &cond, zr, t)?;
                (Some(n), Some(kv))
            }
            None => (None, None),
        };
        entries.push(BankEntry {
            t,
            z_gud: next.clone(),
            kv_gud,
            z_ref: next_ref.clone(),
            kv_ref,
        });
        z = next;
        z_ref = next_ref;
    }
    MemoryBank::from_entries(entries, input.prompt.to_string(), backend.profile().hash())
}

fn inversion_step(
    backend: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cond: &TextCond,
    z_prev: &Latent,
    t: usize,
) -> Result<(Latent, AttentionRecord)> {
    let out = backend.predict(
        PredictArgs {
            latent: z_prev,
            timestep: schedule.timestep(t)?,
            cond,
            attn_override: None,
        },
        Capture::ATTENTION,
    )?;
    let next = ddim_transfer(
        z_prev,
        &out.noise_pred,
        schedule.alpha_bar(t - 1)?,
        schedule.alpha_bar(t)?,
    );
    if !next.is_finite() {
        return Err(Error::NonFinite {
            step: t,
            detail: "inversion latent".into(),
        });
    }
    Ok((next, out.attention.expect("attention was captured")))
}
