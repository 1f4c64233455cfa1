//! End-to-end flows shared by the command line, the service and the Python
//! bindings: images in, bank or edited image out, with the two-stage timing
//! split (preparing covers inversion, inference covers sampling).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::Denoiser;
use crate::error::{Error, Result};
use crate::guidance::{Guidance, GuidanceConfig, GuidanceContext, GuidanceEval};
use crate::image::RgbImage;
use crate::inversion::{invert, InversionInput, MemoryBank};
use crate::mask::Mask;
use crate::sampler::{RunObserver, SampleOutput, Sampler};
use crate::schedule::NoiseSchedule;
use crate::tasks::{build_moving, EditSpec, Offset};
use crate::tensor::Latent;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub preparing_seconds: f64,
    pub inference_seconds: f64,
}

pub struct Prepared {
    pub bank: MemoryBank,
    pub preparing_seconds: f64,
}

/// Encodes and inverts `image` (and `reference`) over `steps` steps.
pub fn prepare(
    backend: &dyn Denoiser,
    steps: usize,
    image: &RgbImage,
    reference: Option<&RgbImage>,
    prompt: &str,
) -> Result<Prepared> {
    let started = Instant::now();
    let schedule = NoiseSchedule::new(&backend.profile().schedule, steps)?;
    let z0 = backend.encode(image).map_err(|e| rename(e, "image"))?;
    let z_ref = reference
        .map(|r| backend.encode(r).map_err(|e| rename(e, "reference")))
        .transpose()?;
    let bank = invert(
        backend,
        &schedule,
        InversionInput {
            z0: &z0,
            z0_ref: z_ref.as_ref(),
            prompt,
        },
    )?;
    Ok(Prepared {
        bank,
        preparing_seconds: started.elapsed().as_secs_f64(),
    })
}

fn rename(e: Error, field: &str) -> Error {
    match e {
        Error::Contract { message, .. } => Error::contract(field, message),
        other => other,
    }
}

pub struct Edited {
    pub image: RgbImage,
    pub output: SampleOutput,
    pub config: GuidanceConfig,
    pub inference_seconds: f64,
}

/// Samples an edit from `bank` and decodes it.
pub fn edit(
    backend: &dyn Denoiser,
    bank: &MemoryBank,
    spec: &EditSpec,
    config: &GuidanceConfig,
    observer: &mut dyn RunObserver,
) -> Result<Edited> {
    let started = Instant::now();
    let schedule = NoiseSchedule::new(&backend.profile().schedule, bank.steps())?;
    let output = Sampler::new(backend, &schedule).run_edit(bank, spec, config, observer)?;
    let image = backend.decode(&output.z0)?;
    Ok(Edited {
        image,
        output,
        config: config.clone(),
        inference_seconds: started.elapsed().as_secs_f64(),
    })
}

struct Unguided;

impl Guidance for Unguided {
    fn evaluate(&self, ctx: &GuidanceContext<'_>) -> Result<GuidanceEval> {
        Ok(GuidanceEval {
            gradient: Latent::zeros(ctx.z_t.shape()),
            terms: Default::default(),
            total: 0.0,
        })
    }
}

/// The identity edit: bank K/V substitution on, no guidance, no
/// classifier-free mixing.
pub fn reconstruct(backend: &dyn Denoiser, bank: &MemoryBank, observer: &mut dyn RunObserver) -> Result<Edited> {
    let started = Instant::now();
    let (h, w) = backend.profile().image_size();
    let spec = build_moving(&Mask::full(h, w), Offset::default(), None)?;
    let config = GuidanceConfig {
        n_gated: 0,
        cfg_scale: 1.0,
        ..GuidanceConfig::for_spec(&spec)?
    };
    let schedule = NoiseSchedule::new(&backend.profile().schedule, bank.steps())?;
    let cond = backend.encode_text(&bank.prompt);
    let output = Sampler::new(backend, &schedule).run(bank, &spec, &config, &cond, &Unguided, observer)?;
    let image = backend.decode(&output.z0)?;
    Ok(Edited {
        image,
        output,
        config,
        inference_seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ToyDenoiser;
    use crate::sampler::NoObserver;

    fn gradient_image() -> RgbImage {
        let data = (0..16 * 16)
            .flat_map(|i| [(i * 3 % 256) as u8, (i % 16 * 16) as u8, 200 - (i / 16 * 8) as u8])
            .collect();
        RgbImage::new(16, 16, data).unwrap()
    }

    #[test]
    fn reconstruction_returns_the_input_image() {
        let b = ToyDenoiser::new(7);
        let img = gradient_image();
        let prepared = prepare(&b, 50, &img, None, "").unwrap();
        assert!(prepared.preparing_seconds >= 0.0);
        let out = reconstruct(&b, &prepared.bank, &mut NoObserver).unwrap();
        let worst = out
            .image
            .data
            .iter()
            .zip(&img.data)
            .map(|(a, b)| a.abs_diff(*b))
            .max()
            .unwrap();
        assert!(worst <= 1, "{worst}");
        assert_eq!(out.output.state.gradient_evaluations(), 0);
    }

    #[test]
    fn wrong_image_size_names_the_input() {
        let b = ToyDenoiser::new(7);
        let small = RgbImage::new(8, 8, vec![0; 8 * 8 * 3]).unwrap();
        let err = prepare(&b, 5, &gradient_image(), Some(&small), "").err().unwrap();
        assert_eq!(err.field(), Some("reference"));
    }
}
