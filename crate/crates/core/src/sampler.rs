//! Guided deterministic DDIM sampling.
//!
//! Each step substitutes bank K/V into decoder self-attention, mixes the
//! conditional and unconditional noise predictions, adds `eta · ∇E` to the
//! mixed noise during the first `n_gated` steps and takes a DDIM step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::build_kv_plan;
use crate::backend::{AttentionRecord, Capture, Denoiser, PredictArgs, TextCond};
use crate::error::{Error, Result};
use crate::guidance::{EnergyTerms, FeatureGuidance, Guidance, GuidanceConfig, GuidanceContext};
use crate::image::RgbImage;
use crate::inversion::{ddim_transfer, predict_x0, MemoryBank};
use crate::schedule::NoiseSchedule;
use crate::tasks::EditSpec;
use crate::tensor::Latent;

/// `eps_u + scale · (eps_c − eps_u)`; the unconditional pass is skipped at
/// scale 1.
pub fn cfg_noise(
    backend: &dyn Denoiser,
    z_t: &Latent,
    timestep: usize,
    cond: &TextCond,
    uncond: &TextCond,
    kv: Option<&AttentionRecord>,
    scale: f64,
) -> Result<Latent> {
    if !(scale >= 1.0) {
        return Err(Error::contract("cfg_scale", format!("must be >= 1, got {scale}")));
    }
    let pass = |c: &TextCond| {
        backend
            .predict(
                PredictArgs {
                    latent: z_t,
                    timestep,
                    cond: c,
                    attn_override: kv,
                },
                Capture::NONE,
            )
            .map(|o| o.noise_pred)
    };
    let eps_c = pass(cond)?;
    if scale == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = pass(uncond)?;
    Ok(Latent::new(&eps_u.data + &((&eps_c.data - &eps_u.data) * scale)))
}

/// One deterministic DDIM step from `alpha_t` to `alpha_prev`.
pub fn ddim_step(z_t: &Latent, eps: &Latent, alpha_t: f64, alpha_prev: f64) -> Latent {
    ddim_transfer(z_t, eps, alpha_t, alpha_prev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub gated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergyTerms>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_energy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRunState {
    /// Step most recently completed; 0 when the run finished.
    pub t: usize,
    pub z_t_gen: Latent,
    pub step_log: Vec<StepRecord>,
}

impl SampleRunState {
    pub fn gradient_evaluations(&self) -> usize {
        self.step_log.iter().filter(|r| r.gated).count()
    }

    /// One JSON object per line.
    pub fn step_log_jsonl(&self) -> String {
        self.step_log
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Receives progress during a run and may stop it between steps.
pub trait RunObserver {
    fn on_step(&mut self, _record: &StepRecord) {}

    /// Called only when `wants_previews` is true, every `preview_every` steps.
    fn on_preview(&mut self, _t: usize, _image: &RgbImage) {}

    fn wants_previews(&self) -> bool {
        false
    }

    fn should_cancel(&self) -> bool {
        false
    }
}

pub struct NoObserver;

impl RunObserver for NoObserver {}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub z0: Latent,
    pub state: SampleRunState,
}

pub struct Sampler<'a> {
    pub backend: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> Sampler<'a> {
    pub fn new(backend: &'a dyn Denoiser, schedule: &'a NoiseSchedule) -> Self {
        Sampler { backend, schedule }
    }

    /// Runs an edit with its feature-correspondence energy.
    pub fn run_edit(
        &self,
        bank: &MemoryBank,
        spec: &EditSpec,
        config: &GuidanceConfig,
        observer: &mut dyn RunObserver,
    ) -> Result<SampleOutput> {
        let guidance = FeatureGuidance::new(spec.clone(), config.clone(), self.backend.profile())?;
        let cond = self.backend.encode_text(&bank.prompt);
        self.run(bank, spec, config, &cond, &guidance, observer)
    }

    /// Samples from `bank.z_t_gen` down to `z_0`.
    pub fn run(
        &self,
        bank: &MemoryBank,
        spec: &EditSpec,
        config: &GuidanceConfig,
        cond: &TextCond,
        guidance: &dyn Guidance,
        observer: &mut dyn RunObserver,
    ) -> Result<SampleOutput> {
        config.validate()?;
        let steps = self.schedule.steps();
        if bank.steps() != steps {
            return Err(Error::contract(
                "steps",
                format!("bank has {} steps, schedule {steps}", bank.steps()),
            ));
        }
        if config.n_gated > steps {
            return Err(Error::contract(
                "n_gated",
                format!("{} exceeds the {steps} sampling steps", config.n_gated),
            ));
        }
        if bank.profile_hash != self.backend.profile().hash() {
            return Err(Error::contract("bank", "bank was built with a different backend profile"));
        }
        let uncond = self.backend.null_text();
        let mut z = bank.z_t_gen.clone();
        let mut log = Vec::with_capacity(steps);
        let mut gated_count = 0;
        for t in (1..=steps).rev() {
            if observer.should_cancel() {
                return Err(Error::Cancelled(t));
            }
            let started = Instant::now();
            let entry = bank.lookup(t)?;
            let plan = build_kv_plan(entry, spec.kind)?;
            let timestep = self.schedule.timestep(t)?;
            let alpha_t = self.schedule.alpha_bar(t)?;
            let mut eps = cfg_noise(
                self.backend,
                &z,
                timestep,
                cond,
                &uncond,
                Some(&plan.record),
                config.cfg_scale,
            )?;
            let mut record = StepRecord {
                t,
                gated: false,
                energy: None,
                total_energy: None,
                grad_norm: None,
                eta: None,
                wall_seconds: 0.0,
            };
            if steps - t < config.n_gated {
                let eval = guidance.evaluate(&GuidanceContext {
                    backend: self.backend,
                    z_t: &z,
                    t,
                    timestep,
                    alpha_bar: alpha_t,
                    cond,
                    entry,
                    kv: Some(&plan.record),
                })?;
                let mut eta = config.eta_at(gated_count);
                if config.sigma_scaling {
                    eta *= (1.0 - alpha_t).sqrt();
                }
                eps = eps.axpy(eta, &eval.gradient);
                if !eps.is_finite() {
                    return Err(Error::NonFinite {
                        step: t,
                        detail: "guided noise estimate".into(),
                    });
                }
                gated_count += 1;
                record.gated = true;
                record.energy = Some(eval.terms);
                record.total_energy = Some(eval.total);
                record.grad_norm = Some(eval.gradient.norm());
                record.eta = Some(eta);
            }
            let alpha_prev = self.schedule.alpha_bar(t - 1)?;
            let next = ddim_step(&z, &eps, alpha_t, alpha_prev);
            if !next.is_finite() {
                return Err(Error::NonFinite {
                    step: t,
                    detail: "latent after DDIM step".into(),
                });
            }
            let done = steps - t + 1;
            if config.preview_every > 0 && done % config.preview_every == 0 && observer.wants_previews() {
                let x0 = predict_x0(&z, &eps, alpha_t);
                observer.on_preview(t, &self.backend.decode(&x0)?);
            }
            z = next;
            record.wall_seconds = started.elapsed().as_secs_f64();
            observer.on_step(&record);
            log.push(record);
        }
        Ok(SampleOutput {
            z0: z.clone(),
            state: SampleRunState {
                t: 0,
                z_t_gen: z,
                step_log: log,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::RiggedDenoiser;
    use ndarray::Array3;

    fn latent(v: f64) -> Latent {
        Latent::new(Array3::from_elem((4, 16, 16), v))
    }

    #[test]
    fn cfg_mixing_identities() {
        let rig = RiggedDenoiser::new(0.3, -0.1);
        let cond = TextCond {
            tokens: ndarray::Array2::ones((4, 8)),
        };
        let uncond = rig.null_text();
        let z = latent(0.0);
        let one = cfg_noise(&rig, &z, 10, &cond, &uncond, None, 1.0).unwrap();
        assert!(one.data.iter().all(|v| *v == 0.3));
        let five = cfg_noise(&rig, &z, 10, &cond, &uncond, None, 5.0).unwrap();
        let expected = -0.1 + 5.0 * (0.3 - -0.1);
        assert!(five.data.iter().all(|v| (v - expected).abs() < 1e-15));
        let same = RiggedDenoiser::new(0.7, 0.7);
        let mixed = cfg_noise(&same, &z, 10, &cond, &uncond, None, 5.0).unwrap();
        assert!(mixed.data.iter().all(|v| *v == 0.7));
        assert!(cfg_noise(&rig, &z, 10, &cond, &uncond, None, 0.5).is_err());
    }

    #[test]
    fn ddim_step_identities() {
        let z = latent(0.8);
        let zero = latent(0.0);
        let out = ddim_step(&z, &zero, 0.5, 0.8);
        let k = (0.8f64 / 0.5).sqrt();
        assert!(out.data.iter().all(|v| (v - 0.8 * k).abs() < 1e-15));
        let eps = latent(-0.37);
        let same = ddim_step(&z, &eps, 0.6, 0.6);
        assert!(same.max_abs_diff(&z) < 1e-15);
    }

    #[test]
    fn inversion_step_then_ddim_step_round_trips() {
        let z = Latent::new(Array3::from_shape_fn((4, 16, 16), |(c, y, x)| {
            ((c * 31 + y * 7 + x) as f64 * 0.37).sin()
        }));
        let eps = Latent::new(Array3::from_shape_fn((4, 16, 16), |(c, y, x)| {
            ((c + y * 3 + x * 5) as f64 * 0.11).cos()
        }));
        let (a_prev, a_t) = (0.93, 0.71);
        let up = ddim_transfer(&z, &eps, a_prev, a_t);
        let back = ddim_step(&up, &eps, a_t, a_prev);
        assert!(back.max_abs_diff(&z) < 1e-10);
    }
}
