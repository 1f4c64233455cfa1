//! Denoiser abstraction with hooks for decoder feature extraction and
//! self-attention key/value capture and override.

mod config;
mod pretrained;
mod rigged;
pub mod toy;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::schedule::ScheduleSpec;
use crate::tensor::{FeatureMap, Latent};

pub use config::{load_backend, BackendConfig, BackendKind};
pub use pretrained::PretrainedAdapter;
pub use rigged::RiggedDenoiser;
pub use toy::ToyDenoiser;

/// Number of decoder blocks every backend exposes.
pub const DECODER_LAYERS: usize = 4;

/// Where inside a decoder block the feature map is tapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    #[default]
    BlockOutput,
    PreAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub channels: usize,
    /// Spatial downscale of this layer relative to the latent grid.
    pub scale: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub name: String,
    pub latent_channels: usize,
    pub latent_size: (usize, usize),
    /// Pixel-to-latent downscale of the image codec.
    pub downscale: usize,
    pub decoder_layer_count: usize,
    /// Decoder layers, 1-based in documentation, index 0 here is layer 1.
    pub feature_dims: Vec<LayerDims>,
    pub attention_heads: usize,
    pub attention_head_dim: usize,
    pub timestep_count_max: usize,
    pub schedule: ScheduleSpec,
    pub feature_tap: FeatureTap,
}

impl BackendProfile {
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.latent_channels, self.latent_size.0, self.latent_size.1)
    }

    /// Spatial size of decoder layer `layer` (1-based).
    pub fn layer_size(&self, layer: usize) -> (usize, usize) {
        let s = self.feature_dims[layer - 1].scale;
        (self.latent_size.0 / s, self.latent_size.1 / s)
    }

    /// Image pixels per feature cell at decoder layer `layer` (1-based).
    pub fn layer_pixel_scale(&self, layer: usize) -> usize {
        self.feature_dims[layer - 1].scale * self.downscale
    }

    pub fn image_size(&self) -> (usize, usize) {
        (
            self.latent_size.0 * self.downscale,
            self.latent_size.1 * self.downscale,
        )
    }

    /// Latent grid for an image of the given pixel size.
    pub fn latent_dims_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height % self.downscale != 0 || width % self.downscale != 0 {
            return Err(Error::contract(
                "image",
                format!(
                    "{height}x{width} not divisible by downscale {}",
                    self.downscale
                ),
            ));
        }
        Ok((height / self.downscale, width / self.downscale))
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_layer_count != DECODER_LAYERS || self.feature_dims.len() != DECODER_LAYERS {
            return Err(Error::contract("profile", "decoder must have four layers"));
        }
        for w in self.feature_dims.windows(2) {
            if w[1].scale >= w[0].scale {
                return Err(Error::contract(
                    "profile",
                    "feature spatial sizes must strictly increase from layer 1 to 4",
                ));
            }
        }
        Ok(())
    }

    /// Stable digest of the profile, stored in bank manifests.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("profile serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}

/// Opaque text conditioning. Only the backend that produced it interprets it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCond {
    pub tokens: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStack {
    /// One map per decoder layer, layer 1 first.
    pub layers: Vec<FeatureMap>,
    pub timestep: usize,
}

impl FeatureStack {
    /// Decoder layer `layer` (1-based).
    pub fn layer(&self, layer: usize) -> &FeatureMap {
        &self.layers[layer - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadKv {
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
}

/// Keys and values of one decoder self-attention site, split by head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteKv {
    pub heads: Vec<HeadKv>,
}

impl SiteKv {
    pub fn tokens(&self) -> usize {
        self.heads.first().map_or(0, |h| h.keys.nrows())
    }
}

/// K/V for every decoder self-attention site, in decoder order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub sites: Vec<SiteKv>,
}

impl AttentionRecord {
    pub fn token_counts(&self) -> Vec<usize> {
        self.sites.iter().map(SiteKv::tokens).collect()
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        for (i, site) in self.sites.iter().enumerate() {
            for head in &site.heads {
                if head.keys.dim() != head.values.dim() {
                    return Err(Error::contract(
                        "attention",
                        format!("site {i}: key/value shapes differ"),
                    ));
                }
                if head.keys.ncols() != head_dim {
                    return Err(Error::contract(
                        "attention",
                        format!("site {i}: head dim {} != {head_dim}", head.keys.ncols()),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capture {
    pub features: bool,
    pub attention: bool,
    /// Activations of the text cross-attention sites (probing only).
    pub text_attention: bool,
}

impl Capture {
    pub const NONE: Capture = Capture {
        features: false,
        attention: false,
        text_attention: false,
    };
    pub const FEATURES: Capture = Capture {
        features: true,
        attention: false,
        text_attention: false,
    };
    pub const ATTENTION: Capture = Capture {
        features: false,
        attention: true,
        text_attention: false,
    };
    pub const ALL: Capture = Capture {
        features: true,
        attention: true,
        text_attention: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOutput {
    pub noise_pred: Latent,
    pub features: Option<FeatureStack>,
    pub attention: Option<AttentionRecord>,
    pub text_attention: Option<Vec<Array2<f64>>>,
}

/// Cotangents for a vector-Jacobian product through `predict`.
#[derive(Debug, Clone, Default)]
pub struct Cotangent {
    pub noise: Option<Latent>,
    /// Per decoder layer (layer 1 first), token-major like [`FeatureMap::data`].
    pub features: Vec<Option<Array2<f64>>>,
}

impl Cotangent {
    pub fn features(layers: Vec<Option<Array2<f64>>>) -> Self {
        Cotangent {
            noise: None,
            features: layers,
        }
    }
}

/// One call of the denoiser.
#[derive(Debug, Clone, Copy)]
pub struct PredictArgs<'a> {
    pub latent: &'a Latent,
    /// Training timestep.
    pub timestep: usize,
    pub cond: &'a TextCond,
    pub attn_override: Option<&'a AttentionRecord>,
}

/// The denoiser ε_θ plus its image codec.
///
/// Implementations are immutable after construction; capture and override
/// state is passed per call so concurrent jobs can share one instance.
pub trait Denoiser: Send + Sync {
    fn profile(&self) -> &BackendProfile;

    fn encode_text(&self, prompt: &str) -> TextCond;

    fn predict(&self, args: PredictArgs<'_>, capture: Capture) -> Result<DenoiseOutput>;

    /// Pulls cotangents on the noise prediction and decoder features back onto
    /// the input latent. Override K/V are treated as constants.
    fn vjp(&self, args: PredictArgs<'_>, cotangent: &Cotangent) -> Result<Latent>;

    fn encode(&self, image: &RgbImage) -> Result<Latent>;

    fn decode(&self, latent: &Latent) -> Result<RgbImage>;

    fn null_text(&self) -> TextCond {
        self.encode_text("")
    }

    /// Shared precondition checks for `predict`/`vjp`.
    fn check_args(&self, args: &PredictArgs<'_>) -> Result<()> {
        let profile = self.profile();
        args.latent.check_shape(profile.latent_shape(), "latent")?;
        if args.timestep > profile.timestep_count_max {
            return Err(Error::contract(
                "t",
                format!(
                    "timestep {} exceeds {}",
                    args.timestep, profile.timestep_count_max
                ),
            ));
        }
        if !args.latent.is_finite() {
            return Err(Error::contract("latent", "non-finite values"));
        }
        if let Some(ov) = args.attn_override {
            if ov.sites.len() != DECODER_LAYERS {
                return Err(Error::contract(
                    "attn_override",
                    format!("expected {DECODER_LAYERS} sites, got {}", ov.sites.len()),
                ));
            }
            ov.validate(profile.attention_head_dim)?;
            for (i, site) in ov.sites.iter().enumerate() {
                if site.heads.len() != profile.attention_heads {
                    return Err(Error::contract(
                        "attn_override",
                        format!("site {i}: expected {} heads", profile.attention_heads),
                    ));
                }
                let (h, w) = profile.layer_size(i + 1);
                let native = h * w;
                let n = site.tokens();
                if n != native && n != 2 * native {
                    return Err(Error::contract(
                        "attn_override",
                        format!("site {i}: {n} tokens, expected {native} or {}", 2 * native),
                    ));
                }
            }
        }
        Ok(())
    }
}
