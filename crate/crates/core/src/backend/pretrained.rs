//! Adapter slot for a pre-trained latent diffusion model.
//!
//! The profile mirrors a Stable-Diffusion-style UNet: 4-channel latents at
//! 1/8 of the pixel resolution and a four-block decoder. Weight loading is
//! not bundled; until weights are attached every network call reports
//! [`Error::Unavailable`].

use super::{
    BackendProfile, Cotangent, Capture, DenoiseOutput, Denoiser, FeatureTap, LayerDims,
    PredictArgs, TextCond, DECODER_LAYERS,
};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::schedule::ScheduleSpec;
use crate::tensor::Latent;

pub struct PretrainedAdapter {
    profile: BackendProfile,
    weights_path: Option<std::path::PathBuf>,
}

impl PretrainedAdapter {
    pub fn new(image_size: (usize, usize), weights_path: Option<std::path::PathBuf>) -> Result<Self> {
        let downscale = 8;
        let profile = BackendProfile {
            name: "pretrained-ldm".into(),
            latent_channels: 4,
            latent_size: (image_size.0 / downscale, image_size.1 / downscale),
            downscale,
            decoder_layer_count: DECODER_LAYERS,
            feature_dims: vec![
                LayerDims { channels: 1280, scale: 8 },
                LayerDims { channels: 1280, scale: 4 },
                LayerDims { channels: 640, scale: 2 },
                LayerDims { channels: 320, scale: 1 },
            ],
            attention_heads: 8,
            attention_head_dim: 40,
            timestep_count_max: 1000,
            schedule: ScheduleSpec::default(),
            feature_tap: FeatureTap::BlockOutput,
        };
        profile.latent_dims_for(image_size.0, image_size.1)?;
        profile.validate()?;
        Ok(PretrainedAdapter {
            profile,
            weights_path,
        })
    }

    fn unavailable(&self) -> Error {
        Error::Unavailable(match &self.weights_path {
            Some(p) => format!("no loader registered for weights at {}", p.display()),
            None => "pretrained backend has no weights configured".into(),
        })
    }
}

impl Denoiser for PretrainedAdapter {
    fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn encode_text(&self, _prompt: &str) -> TextCond {
        TextCond {
            tokens: ndarray::Array2::zeros((77, 768)),
        }
    }

    fn predict(&self, args: PredictArgs<'_>, _capture: Capture) -> Result<DenoiseOutput> {
        self.check_args(&args)?;
        Err(self.unavailable())
    }

    fn vjp(&self, args: PredictArgs<'_>, _cotangent: &Cotangent) -> Result<Latent> {
        self.check_args(&args)?;
        Err(self.unavailable())
    }

    fn encode(&self, image: &RgbImage) -> Result<Latent> {
        self.profile.latent_dims_for(image.height, image.width)?;
        Err(self.unavailable())
    }

    fn decode(&self, latent: &Latent) -> Result<RgbImage> {
        latent.check_shape(self.profile.latent_shape(), "latent")?;
        Err(self.unavailable())
    }
}
