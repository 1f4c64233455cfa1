//! A denoiser with scripted outputs, for exercising samplers and inversion
//! without a network.

use ndarray::{Array2, Array3};

use super::{
    AttentionRecord, BackendProfile, Capture, Cotangent, DenoiseOutput, Denoiser, FeatureStack,
    HeadKv, PredictArgs, SiteKv, TextCond, ToyDenoiser,
};
use crate::error::Result;
use crate::image::RgbImage;
use crate::tensor::{FeatureMap, Latent};

/// Predicts a constant noise field: `cond_value` for a non-empty text
/// condition, `uncond_value` for the null condition. Features are average
/// pools of the input latent, K/V are zeros. The profile and codec are the
/// toy backend's.
pub struct RiggedDenoiser {
    inner: ToyDenoiser,
    pub cond_value: f64,
    pub uncond_value: f64,
}

impl RiggedDenoiser {
    pub fn new(cond_value: f64, uncond_value: f64) -> Self {
        RiggedDenoiser {
            inner: ToyDenoiser::new(0),
            cond_value,
            uncond_value,
        }
    }

    pub fn zero() -> Self {
        RiggedDenoiser::new(0.0, 0.0)
    }
}

impl Denoiser for RiggedDenoiser {
    fn profile(&self) -> &BackendProfile {
        self.inner.profile()
    }

    fn encode_text(&self, prompt: &str) -> TextCond {
        self.inner.encode_text(prompt)
    }

    fn predict(&self, args: PredictArgs<'_>, capture: Capture) -> Result<DenoiseOutput> {
        self.check_args(&args)?;
        let profile = self.profile();
        let value = if args.cond.tokens.iter().all(|v| *v == 0.0) {
            self.uncond_value
        } else {
            self.cond_value
        };
        let noise_pred = Latent::new(Array3::from_elem(args.latent.shape(), value));
        let features = capture.features.then(|| FeatureStack {
            layers: (1..=4)
                .map(|layer| {
                    let (h, w) = profile.layer_size(layer);
                    let s = profile.feature_dims[layer - 1].scale;
                    let (c, _, _) = args.latent.shape();
                    let data = Array2::from_shape_fn((h * w, c), |(p, ch)| {
                        let (y, x) = (p / w, p % w);
                        let mut acc = 0.0;
                        for dy in 0..s {
                            for dx in 0..s {
                                acc += args.latent.data[[ch, y * s + dy, x * s + dx]];
                            }
                        }
                        acc / (s * s) as f64
                    });
                    FeatureMap {
                        height: h,
                        width: w,
                        data,
                    }
                })
                .collect(),
            timestep: args.timestep,
        });
        let attention = capture.attention.then(|| AttentionRecord {
            sites: (1..=4)
                .map(|layer| {
                    let (h, w) = profile.layer_size(layer);
                    SiteKv {
                        heads: (0..profile.attention_heads)
                            .map(|_| HeadKv {
                                keys: Array2::zeros((h * w, profile.attention_head_dim)),
                                values: Array2::zeros((h * w, profile.attention_head_dim)),
                            })
                            .collect(),
                    }
                })
                .collect(),
        });
        Ok(DenoiseOutput {
            noise_pred,
            features,
            attention,
            text_attention: None,
        })
    }

    fn vjp(&self, args: PredictArgs<'_>, cotangent: &Cotangent) -> Result<Latent> {
        self.check_args(&args)?;
        let profile = self.profile();
        let mut grad = Latent::zeros(args.latent.shape());
        let (c, h, w) = args.latent.shape();
        for (i, ct) in cotangent.features.iter().enumerate() {
            let Some(ct) = ct else { continue };
            let s = profile.feature_dims[i].scale;
            let lw = w / s;
            let norm = (s * s) as f64;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        grad.data[[ch, y, x]] += ct[[(y / s) * lw + x / s, ch]] / norm;
                    }
                }
            }
        }
        Ok(grad)
    }

    fn encode(&self, image: &RgbImage) -> Result<Latent> {
        self.inner.encode(image)
    }

    fn decode(&self, latent: &Latent) -> Result<RgbImage> {
        self.inner.decode(latent)
    }
}
