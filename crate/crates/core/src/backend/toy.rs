//! Deterministic reference denoiser.
//!
//! A four-scale encoder/decoder over a `4 × 16 × 16` latent with one
//! multi-head self-attention site per decoder block and one text
//! cross-attention site at the bottleneck. Weights are drawn from a seeded
//! ChaCha stream, so two instances with the same seed are bitwise identical.
//! The codec is exact: pixels map to `[-1, 1]` without spatial downscale.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    AttentionRecord, BackendProfile, Capture, Cotangent, DenoiseOutput, Denoiser, FeatureStack,
    FeatureTap, HeadKv, LayerDims, PredictArgs, SiteKv, TextCond, DECODER_LAYERS,
};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::schedule::ScheduleSpec;
use crate::tensor::{FeatureMap, Latent};

const TIME_DIM: usize = 8;
const TEXT_TOKENS: usize = 4;
const TEXT_DIM: usize = 8;
const ENC_WIDTHS: [usize; 4] = [8, 16, 16, 16];
const DEC_WIDTHS: [usize; 4] = [16, 16, 16, 8];

/// Construction parameters of the toy network.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyOptions {
    pub seed: u64,
    pub latent_size: (usize, usize),
    /// Gain of the final projection. Small values keep ε̂ nearly constant
    /// between neighbouring inversion steps, which makes DDIM inversion
    /// reconstruct closely.
    pub output_gain: f64,
    pub schedule: ScheduleSpec,
    pub feature_tap: FeatureTap,
}

impl Default for ToyOptions {
    fn default() -> Self {
        ToyOptions {
            seed: 0,
            latent_size: (16, 16),
            output_gain: 0.0005,
            schedule: ScheduleSpec::default(),
            feature_tap: FeatureTap::BlockOutput,
        }
    }
}

struct AttnWeights {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    o: Array2<f64>,
}

struct DecBlock {
    w_main: Array2<f64>,
    w_skip: Option<Array2<f64>>,
    bias: Array1<f64>,
    time: Array2<f64>,
    attn: AttnWeights,
}

struct Weights {
    w_in: Array2<f64>,
    b_in: Array1<f64>,
    t_in: Array2<f64>,
    enc: Vec<(Array2<f64>, Array1<f64>)>,
    t_mid: Array2<f64>,
    text: AttnWeights,
    dec: Vec<DecBlock>,
    w_out: Array2<f64>,
}

pub struct ToyDenoiser {
    profile: BackendProfile,
    weights: Weights,
    /// Average-pool operators, finest first: full→/2, /2→/4, /4→/8.
    pools: Vec<Array2<f64>>,
    /// Nearest upsample operators: /8→/4, /4→/2, /2→full.
    ups: Vec<Array2<f64>>,
    /// `1 / sqrt(alpha_bar)` per training timestep, so the network sees
    /// latents at roughly clean-image scale at every noise level.
    input_scale: Vec<f64>,
}

struct Forward {
    noise: Var,
    features: Vec<Var>,
    pre_attention: Vec<Var>,
    kv: Vec<SiteKv>,
    text_attention: Array2<f64>,
}

impl ToyDenoiser {
    pub fn new(seed: u64) -> Self {
        ToyDenoiser::with_options(ToyOptions {
            seed,
            ..ToyOptions::default()
        })
        .expect("default toy options are valid")
    }

    pub fn with_options(opts: ToyOptions) -> Result<Self> {
        let (h, w) = opts.latent_size;
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::contract(
                "latent_size",
                "toy latent sides must be positive multiples of 8",
            ));
        }
        let heads = 2;
        let head_dim = 4;
        let profile = BackendProfile {
            name: format!("toy/seed={}/gain={}", opts.seed, opts.output_gain),
            latent_channels: 4,
            latent_size: (h, w),
            downscale: 1,
            decoder_layer_count: DECODER_LAYERS,
            feature_dims: DEC_WIDTHS
                .iter()
                .zip([8, 4, 2, 1])
                .map(|(&channels, scale)| LayerDims { channels, scale })
                .collect(),
            attention_heads: heads,
            attention_head_dim: head_dim,
            timestep_count_max: opts.schedule.train_steps,
            schedule: opts.schedule,
            feature_tap: opts.feature_tap,
        };
        profile.validate()?;

        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut mat = |rows: usize, cols: usize, gain: f64| {
            let bound = gain * (3.0 / rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        let inner = heads * head_dim;
        let attn = |width: usize, kv_in: usize, mat: &mut dyn FnMut(usize, usize, f64) -> Array2<f64>| {
            AttnWeights {
                q: mat(width, inner, 1.0),
                k: mat(kv_in, inner, 1.0),
                v: mat(kv_in, inner, 1.0),
                o: mat(inner, width, 0.5),
            }
        };

        let w_in = mat(4, ENC_WIDTHS[0], 1.0);
        let b_in = mat(1, ENC_WIDTHS[0], 0.1).row(0).to_owned();
        let t_in = mat(TIME_DIM, ENC_WIDTHS[0], 0.5);
        let mut enc = Vec::new();
        for i in 1..4 {
            let wm = mat(ENC_WIDTHS[i - 1], ENC_WIDTHS[i], 1.0);
            let b = mat(1, ENC_WIDTHS[i], 0.1).row(0).to_owned();
            enc.push((wm, b));
        }
        let t_mid = mat(TIME_DIM, ENC_WIDTHS[3], 0.5);
        let text = attn(ENC_WIDTHS[3], TEXT_DIM, &mut mat);
        let mut dec = Vec::new();
        for (i, &width) in DEC_WIDTHS.iter().enumerate() {
            let (main_in, skip_in) = if i == 0 {
                (ENC_WIDTHS[3], None)
            } else {
                (DEC_WIDTHS[i - 1], Some(ENC_WIDTHS[3 - i]))
            };
            let w_main = mat(main_in, width, 1.0);
            let w_skip = skip_in.map(|s| mat(s, width, 1.0));
            let bias = mat(1, width, 0.1).row(0).to_owned();
            let time = mat(TIME_DIM, width, 0.5);
            let attn = attn(width, width, &mut mat);
            dec.push(DecBlock {
                w_main,
                w_skip,
                bias,
                time,
                attn,
            });
        }
        let w_out = mat(DEC_WIDTHS[3], 4, opts.output_gain);

        let mut alpha_bar = 1.0;
        let mut input_scale = vec![1.0];
        for beta in profile.schedule.betas() {
            alpha_bar *= 1.0 - beta;
            input_scale.push(1.0 / alpha_bar.sqrt());
        }

        let sizes = [(h, w), (h / 2, w / 2), (h / 4, w / 4), (h / 8, w / 8)];
        let pools = (0..3).map(|i| pool_matrix(sizes[i])).collect();
        let ups = (0..3).rev().map(|i| upsample_matrix(sizes[i + 1])).collect();

        Ok(ToyDenoiser {
            profile,
            weights: Weights {
                w_in,
                b_in,
                t_in,
                enc,
                t_mid,
                text,
                dec,
                w_out,
            },
            pools,
            ups,
            input_scale,
        })
    }

    fn forward<'w>(
        &'w self,
        tape: &mut Tape<'w>,
        z: Var,
        timestep: usize,
        cond: &TextCond,
        attn_override: Option<&AttentionRecord>,
    ) -> Forward {
        let w = &self.weights;
        let temb = time_embedding(timestep);

        let z = tape.scale(z, self.input_scale[timestep]);
        let h0 = tape.matmul_w(z, &w.w_in);
        let h0 = tape.add_row(h0, &(&w.b_in + &temb.dot(&w.t_in)));
        let h0 = tape.tanh(h0);
        let mut skips = vec![h0];
        let mut x = h0;
        for (i, (wm, b)) in w.enc.iter().enumerate() {
            let pooled = tape.left_mul(&self.pools[i], x);
            let y = tape.matmul_w(pooled, wm);
            let bias = if i == 2 { b + &temb.dot(&w.t_mid) } else { b.clone() };
            let y = tape.add_row(y, &bias);
            x = tape.tanh(y);
            skips.push(x);
        }

        // Text cross-attention at the bottleneck. Never overridden.
        let text_tokens = tape.constant(cond.tokens.clone());
        let (cross, _) = self.attention(tape, x, text_tokens, &w.text, None);
        let text_attention = tape.value(cross).clone();
        let mut x = tape.add(x, cross);

        let mut features = Vec::with_capacity(DECODER_LAYERS);
        let mut pre_attention = Vec::with_capacity(DECODER_LAYERS);
        let mut kv = Vec::with_capacity(DECODER_LAYERS);
        for (i, block) in w.dec.iter().enumerate() {
            let main = if i == 0 {
                x
            } else {
                tape.left_mul(&self.ups[i - 1], x)
            };
            let mut y = tape.matmul_w(main, &block.w_main);
            if let Some(ws) = &block.w_skip {
                let s = tape.matmul_w(skips[3 - i], ws);
                y = tape.add(y, s);
            }
            let y = tape.add_row(y, &(&block.bias + &temb.dot(&block.time)));
            let y = tape.tanh(y);
            let site_override = attn_override.map(|r| &r.sites[i]);
            let (att, site_kv) = self.attention(tape, y, y, &block.attn, site_override);
            let out = tape.add(y, att);
            pre_attention.push(y);
            features.push(out);
            kv.push(site_kv);
            x = out;
        }
        let noise = tape.matmul_w(x, &w.w_out);
        Forward {
            noise,
            features,
            pre_attention,
            kv,
            text_attention,
        }
    }

    /// Multi-head attention of `x` over `source`. When `kv_override` is set,
    /// its keys and values replace the ones projected from `source`.
    fn attention<'w>(
        &'w self,
        tape: &mut Tape<'w>,
        x: Var,
        source: Var,
        weights: &'w AttnWeights,
        kv_override: Option<&SiteKv>,
    ) -> (Var, SiteKv) {
        let heads = self.profile.attention_heads;
        let d = self.profile.attention_head_dim;
        let q = tape.matmul_w(x, &weights.q);
        let k = tape.matmul_w(source, &weights.k);
        let v = tape.matmul_w(source, &weights.v);
        let mut outs = Vec::with_capacity(heads);
        let mut captured = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.col_slice(q, h * d, d);
            let kh = tape.col_slice(k, h * d, d);
            let vh = tape.col_slice(v, h * d, d);
            captured.push(HeadKv {
                keys: tape.value(kh).clone(),
                values: tape.value(vh).clone(),
            });
            let (kh, vh) = match kv_override {
                Some(site) => (
                    tape.constant(site.heads[h].keys.clone()),
                    tape.constant(site.heads[h].values.clone()),
                ),
                None => (kh, vh),
            };
            let logits = tape.matmul_bt(qh, kh);
            let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
            let probs = tape.softmax_rows(logits);
            outs.push(tape.matmul(probs, vh));
        }
        let merged = tape.concat_cols(&outs);
        (
            tape.matmul_w(merged, &weights.o),
            SiteKv { heads: captured },
        )
    }

    fn feature_vars<'a>(&self, fwd: &'a Forward) -> &'a [Var] {
        match self.profile.feature_tap {
            FeatureTap::BlockOutput => &fwd.features,
            FeatureTap::PreAttention => &fwd.pre_attention,
        }
    }
}

impl Denoiser for ToyDenoiser {
    fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn encode_text(&self, prompt: &str) -> TextCond {
        let prompt = prompt.trim();
        if prompt.is_empty() {
            return TextCond {
                tokens: Array2::zeros((TEXT_TOKENS, TEXT_DIM)),
            };
        }
        let tokens = Array2::from_shape_fn((TEXT_TOKENS, TEXT_DIM), |(i, j)| {
            let digest = Sha256::digest(format!("{i}:{prompt}").as_bytes());
            digest[j] as f64 / 127.5 - 1.0
        });
        TextCond { tokens }
    }

    fn predict(&self, args: PredictArgs<'_>, capture: Capture) -> Result<DenoiseOutput> {
        self.check_args(&args)?;
        let (_, h, w) = args.latent.shape();
        let mut tape = Tape::new();
        let z = tape.constant(args.latent.to_tokens());
        let fwd = self.forward(&mut tape, z, args.timestep, args.cond, args.attn_override);
        let noise_pred = Latent::from_tokens(tape.value(fwd.noise), h, w);
        let features = capture.features.then(|| FeatureStack {
            layers: self
                .feature_vars(&fwd)
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let (fh, fw) = self.profile.layer_size(i + 1);
                    FeatureMap {
                        height: fh,
                        width: fw,
                        data: tape.value(*v).clone(),
                    }
                })
                .collect(),
            timestep: args.timestep,
        });
        let text_attention = capture.text_attention.then(|| vec![fwd.text_attention.clone()]);
        let attention = capture.attention.then(|| AttentionRecord { sites: fwd.kv });
        Ok(DenoiseOutput {
            noise_pred,
            features,
            attention,
            text_attention,
        })
    }

    fn vjp(&self, args: PredictArgs<'_>, cotangent: &Cotangent) -> Result<Latent> {
        self.check_args(&args)?;
        let (_, h, w) = args.latent.shape();
        let mut tape = Tape::new();
        let z = tape.input(args.latent.to_tokens());
        let fwd = self.forward(&mut tape, z, args.timestep, args.cond, args.attn_override);
        let noise_tokens = cotangent.noise.as_ref().map(Latent::to_tokens);
        let mut seeds: Vec<(Var, &Array2<f64>)> = Vec::new();
        if let Some(n) = &noise_tokens {
            seeds.push((fwd.noise, n));
        }
        let feature_vars = self.feature_vars(&fwd);
        for (i, ct) in cotangent.features.iter().enumerate() {
            if let Some(ct) = ct {
                let var = *feature_vars.get(i).ok_or_else(|| {
                    Error::contract("cotangent", format!("no decoder layer {}", i + 1))
                })?;
                if ct.dim() != tape.value(var).dim() {
                    return Err(Error::contract(
                        "cotangent",
                        format!("layer {} cotangent shape {:?}", i + 1, ct.dim()),
                    ));
                }
                seeds.push((var, ct));
            }
        }
        let grad = tape.backward(&seeds, z);
        Ok(Latent::from_tokens(&grad, h, w))
    }

    fn encode(&self, image: &RgbImage) -> Result<Latent> {
        let (lh, lw) = self.profile.latent_dims_for(image.height, image.width)?;
        if (lh, lw) != self.profile.latent_size {
            return Err(Error::contract(
                "image",
                format!(
                    "{}x{} does not match the toy latent {:?}",
                    image.height, image.width, self.profile.latent_size
                ),
            ));
        }
        let mut data = Array3::zeros((4, lh, lw));
        for y in 0..lh {
            for x in 0..lw {
                let px = image.pixel(y, x);
                let mut sum = 0.0;
                for c in 0..3 {
                    let v = px[c] as f64 / 127.5 - 1.0;
                    data[[c, y, x]] = v;
                    sum += v;
                }
                data[[3, y, x]] = sum / 3.0;
            }
        }
        Ok(Latent::new(data))
    }

    fn decode(&self, latent: &Latent) -> Result<RgbImage> {
        latent.check_shape(self.profile.latent_shape(), "latent")?;
        let (_, h, w) = latent.shape();
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = ((latent.data[[c, y, x]] + 1.0) * 127.5).round();
                    data.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
        RgbImage::new(w, h, data)
    }
}

fn time_embedding(timestep: usize) -> Array1<f64> {
    let half = TIME_DIM / 2;
    Array1::from_shape_fn(TIME_DIM, |i| {
        let freq = 1.0 / 10000f64.powf((i % half) as f64 / half as f64);
        let arg = timestep as f64 * freq;
        if i < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// 2×2 average pooling from an `(h, w)` grid to `(h/2, w/2)`.
fn pool_matrix((h, w): (usize, usize)) -> Array2<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut p = Array2::zeros((oh * ow, h * w));
    for y in 0..h {
        for x in 0..w {
            p[[(y / 2) * ow + x / 2, y * w + x]] = 0.25;
        }
    }
    p
}

/// Nearest 2× upsampling from an `(h, w)` grid.
fn upsample_matrix((h, w): (usize, usize)) -> Array2<f64> {
    let (oh, ow) = (h * 2, w * 2);
    let mut u = Array2::zeros((oh * ow, h * w));
    for y in 0..oh {
        for x in 0..ow {
            u[[y * ow + x, (y / 2) * w + x / 2]] = 1.0;
        }
    }
    u
}
