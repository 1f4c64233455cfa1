//! Energies over decoder-feature correspondence and their gradient with
//! respect to the latent being sampled.
//!
//! Guided-side features (original or reference image) are constants: they
//! come from a separate forward pass and never receive gradient.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::backend::{
    AttentionRecord, BackendProfile, Capture, Cotangent, Denoiser, FeatureStack, PredictArgs,
    TextCond, DECODER_LAYERS,
};
use crate::error::{Error, Result};
use crate::inversion::BankEntry;
use crate::mask::{CellPair, Mask, PairingMap};
use crate::tasks::{downsample_masks, EditSpec, LayerMasks, SimilarityMode, TaskKind};
use crate::tensor::{FeatureMap, Latent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub alpha: f64,
    pub beta: f64,
    pub w_e: f64,
    pub w_c: f64,
    pub w_o: f64,
    pub w_i: f64,
    /// Learning rate on the energy gradient.
    pub eta: f64,
    /// Multiplier applied to `eta` after every gated step.
    pub eta_decay: f64,
    /// Number of leading sampling steps that receive the gradient.
    pub n_gated: usize,
    /// Decoder layers (1-based) the energy is summed over.
    pub layers: Vec<usize>,
    pub cfg_scale: f64,
    /// Multiply the gradient by `sqrt(1 - alpha_bar_t)`.
    pub sigma_scaling: bool,
    /// Decode an `x0` preview every this many steps; 0 disables previews.
    pub preview_every: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            alpha: 1.0,
            beta: 4.0,
            w_e: 1.0,
            w_c: 1.0,
            w_o: 1.0,
            w_i: 2.5,
            eta: 0.06,
            eta_decay: 1.0,
            n_gated: 30,
            layers: vec![2, 3],
            cfg_scale: 5.0,
            sigma_scaling: false,
            preview_every: 10,
        }
    }
}

impl GuidanceConfig {
    /// Defaults for one task. Step sizes are the median of `calibrate_eta`
    /// over random edits on the toy backend at the first gated step.
    pub fn for_task(kind: TaskKind) -> Self {
        let base = GuidanceConfig::default();
        let (eta, w_o) = match kind {
            TaskKind::Moving => (0.06, 1.0),
            TaskKind::Resizing => (0.1, 1.0),
            TaskKind::Replacing => (0.18, 0.0),
            TaskKind::Pasting => (0.1, 0.0),
            TaskKind::Dragging => (0.09, 0.0),
        };
        GuidanceConfig { eta, w_o, ..base }
    }

    /// Task defaults with the spec's overrides applied.
    pub fn for_spec(spec: &EditSpec) -> Result<Self> {
        Self::resolve(spec, &WeightOverrides::default(), &WeightOverrides::default())
    }

    /// Layers, later ones winning: task defaults, `defaults` (e.g. a config
    /// file), the spec's own overrides, then `forced` (e.g. command-line
    /// flags).
    pub fn resolve(spec: &EditSpec, defaults: &WeightOverrides, forced: &WeightOverrides) -> Result<Self> {
        let mut cfg = GuidanceConfig::for_task(spec.kind)
            .with_overrides(defaults)?
            .with_overrides(&spec.weights)?
            .with_overrides(forced)?;
        if !spec.has_opt_term() {
            cfg.w_o = 0.0;
        }
        Ok(cfg)
    }

    pub fn with_overrides(mut self, o: &WeightOverrides) -> Result<Self> {
        o.validate()?;
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { self.$f = v; } )* };
        }
        apply!(alpha, beta, w_e, w_c, w_o, w_i, eta, eta_decay, n_gated, layers, cfg_scale, sigma_scaling, preview_every);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::contract("alpha", "must be > 0"));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::contract("beta", "must be > 0"));
        }
        for (name, w) in [
            ("w_e", self.w_e),
            ("w_c", self.w_c),
            ("w_o", self.w_o),
            ("w_i", self.w_i),
            ("eta", self.eta),
            ("eta_decay", self.eta_decay),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::contract(name, "must be finite and >= 0"));
            }
        }
        if !(self.cfg_scale >= 1.0) || !self.cfg_scale.is_finite() {
            return Err(Error::contract("cfg_scale", "must be >= 1"));
        }
        if self.layers.is_empty() {
            return Err(Error::contract("layers", "at least one layer"));
        }
        for &l in &self.layers {
            if !(1..=DECODER_LAYERS).contains(&l) {
                return Err(Error::contract("layers", format!("layer {l} outside 1..=4")));
            }
        }
        Ok(())
    }

    pub fn energy_edit(&self, s: f64) -> f64 {
        energy_edit(s, self.alpha, self.beta)
    }

    /// Step size for the `k`-th gated step (0-based).
    pub fn eta_at(&self, k: usize) -> f64 {
        self.eta * self.eta_decay.powi(k as i32)
    }
}

/// Per-request overrides; unset fields keep the task default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_e: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_o: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_i: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_gated: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cfg_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_scaling: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preview_every: Option<usize>,
}

impl WeightOverrides {
    pub fn validate(&self) -> Result<()> {
        let mut probe = GuidanceConfig::default();
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { probe.$f = v; } )* };
        }
        apply!(alpha, beta, w_e, w_c, w_o, w_i, eta, eta_decay, n_gated, layers, cfg_scale, sigma_scaling, preview_every);
        probe.validate()
    }
}

/// `1 / (alpha + beta * s)`.
pub fn energy_edit(s: f64, alpha: f64, beta: f64) -> f64 {
    1.0 / (alpha + beta * s)
}

fn energy_edit_slope(s: f64, alpha: f64, beta: f64) -> f64 {
    let d = alpha + beta * s;
    -beta / (d * d)
}

/// Cosine of `a` and `b` and its gradient with respect to `a`. A zero vector
/// has cosine 0 and no gradient.
fn cosine_with_grad(a: ArrayView1<f64>, b: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, Array1::zeros(a.len()));
    }
    let cos = a.dot(&b) / (na * nb);
    let grad = &b / (na * nb) - &(&a * (cos / (na * na)));
    (cos, grad)
}

/// Similarity with its gradient on the generated-side features.
#[derive(Debug, Clone)]
pub struct Scored {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Mean of `0.5 cos + 0.5` over pairs; guided features sampled bilinearly.
pub fn local_similarity(gen: &FeatureMap, gud: &FeatureMap, pairs: &[CellPair]) -> Result<Scored> {
    if pairs.is_empty() {
        return Err(Error::contract("mask", "similarity undefined on an empty mask"));
    }
    check_channels(gen, gud)?;
    let mut grad = Array2::zeros(gen.data.dim());
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for p in pairs {
        let target = gud.sample(p.gud_cell.0, p.gud_cell.1);
        let (cos, g) = cosine_with_grad(gen.data.row(p.gen_token), target.view());
        total += 0.5 * cos + 0.5;
        grad.row_mut(p.gen_token).scaled_add(0.5 / n, &g);
    }
    Ok(Scored {
        value: total / n,
        grad,
    })
}

/// `0.5 cos(mean gen over gen_tokens, mean gud over gud_tokens) + 0.5`.
pub fn global_similarity(
    gen: &FeatureMap,
    gen_tokens: &[usize],
    gud: &FeatureMap,
    gud_tokens: &[usize],
) -> Result<Scored> {
    if gen_tokens.is_empty() || gud_tokens.is_empty() {
        return Err(Error::contract("mask", "similarity undefined on an empty mask"));
    }
    check_channels(gen, gud)?;
    let mean = |f: &FeatureMap, toks: &[usize]| {
        let mut m = Array1::zeros(f.channels());
        for &q in toks {
            m += &f.data.row(q);
        }
        m / toks.len() as f64
    };
    let mg = mean(gen, gen_tokens);
    let mu = mean(gud, gud_tokens);
    let (cos, g) = cosine_with_grad(mg.view(), mu.view());
    let mut grad = Array2::zeros(gen.data.dim());
    let scale = 0.5 / gen_tokens.len() as f64;
    for &q in gen_tokens {
        grad.row_mut(q).scaled_add(scale, &g);
    }
    Ok(Scored {
        value: 0.5 * cos + 0.5,
        grad,
    })
}

fn check_channels(gen: &FeatureMap, gud: &FeatureMap) -> Result<()> {
    if gen.channels() != gud.channels() || (gen.height, gen.width) != (gud.height, gud.width) {
        return Err(Error::contract(
            "features",
            format!(
                "generated {}x{}x{} vs guided {}x{}x{}",
                gen.height,
                gen.width,
                gen.channels(),
                gud.height,
                gud.width,
                gud.channels()
            ),
        ));
    }
    Ok(())
}

fn check_mask_dims(f: &FeatureMap, m: &Mask, field: &str) -> Result<()> {
    if m.dims() != (f.height, f.width) {
        return Err(Error::contract(
            field,
            format!("mask {:?} vs features {:?}", m.dims(), (f.height, f.width)),
        ));
    }
    Ok(())
}

/// Local similarity with masks already at the feature resolution.
pub fn s_local(
    f_gen: &FeatureMap,
    m_gen: &Mask,
    f_gud: &FeatureMap,
    m_gud: &Mask,
    pairing: &PairingMap,
) -> Result<f64> {
    check_mask_dims(f_gen, m_gen, "m_gen")?;
    check_mask_dims(f_gud, m_gud, "m_gud")?;
    if m_gud.is_empty() {
        return Err(Error::contract("m_gud", "similarity undefined on an empty mask"));
    }
    let pairs = pairing.layer_pairs(m_gen, 1);
    if !matches!(pairing, PairingMap::Scale { .. }) {
        for p in &pairs {
            let (y, x) = (p.gud_cell.0.round() as i64, p.gud_cell.1.round() as i64);
            if !m_gud.get_signed(y, x) {
                return Err(Error::contract("pairing", format!("({y}, {x}) is outside m_gud")));
            }
        }
    }
    Ok(local_similarity(f_gen, f_gud, &pairs)?.value)
}

pub fn s_global(f_gen: &FeatureMap, m_gen: &Mask, f_gud: &FeatureMap, m_gud: &Mask) -> Result<f64> {
    check_mask_dims(f_gen, m_gen, "m_gen")?;
    check_mask_dims(f_gud, m_gud, "m_gud")?;
    Ok(global_similarity(f_gen, &m_gen.tokens(), f_gud, &m_gud.tokens())?.value)
}

fn identity_pairs(m: &Mask) -> Vec<CellPair> {
    m.tokens()
        .into_iter()
        .map(|q| CellPair {
            gen_token: q,
            gud_cell: ((q / m.width()) as f64, (q % m.width()) as f64),
        })
        .collect()
}

/// Content term on `m_share`; `None` when the mask is empty.
pub fn energy_content(
    f_gen: &FeatureMap,
    f_gud: &FeatureMap,
    m_share: &Mask,
    alpha: f64,
    beta: f64,
) -> Result<Option<f64>> {
    check_mask_dims(f_gen, m_share, "m_share")?;
    if m_share.is_empty() {
        return Ok(None);
    }
    let s = local_similarity(f_gen, f_gud, &identity_pairs(m_share))?.value;
    Ok(Some(energy_edit(s, alpha, beta)))
}

/// Inpainting term; 0 when nothing was uncovered.
pub fn energy_opt_moving(
    f_gen: &FeatureMap,
    f_gud: &FeatureMap,
    m_ipt: &Mask,
    m_ref: &Mask,
    config: &GuidanceConfig,
) -> Result<f64> {
    check_mask_dims(f_gen, m_ipt, "m_ipt")?;
    check_mask_dims(f_gud, m_ref, "m_ref")?;
    if m_ipt.is_empty() {
        return Ok(0.0);
    }
    if m_ref.is_empty() {
        return Err(Error::contract("m_ref", "reference region is empty"));
    }
    Ok(opt_term(f_gen, f_gud, m_ipt, m_ref, config)?.value)
}

fn opt_term(
    f_gen: &FeatureMap,
    f_gud: &FeatureMap,
    m_ipt: &Mask,
    m_ref: &Mask,
    c: &GuidanceConfig,
) -> Result<Scored> {
    let ipt = m_ipt.tokens();
    let g = global_similarity(f_gen, &ipt, f_gud, &m_ref.tokens())?;
    let l = local_similarity(f_gen, f_gud, &identity_pairs(m_ipt))?;
    let pull = c.w_i * energy_edit(g.value, c.alpha, c.beta);
    let slope = c.w_i * energy_edit_slope(g.value, c.alpha, c.beta);
    Ok(Scored {
        value: pull + l.value,
        grad: g.grad * slope + l.grad,
    })
}

/// Unweighted term values; `None` marks a term that was skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub edit: Option<f64>,
    pub content: Option<f64>,
    pub opt: Option<f64>,
}

impl EnergyTerms {
    pub fn weighted(&self, c: &GuidanceConfig) -> f64 {
        c.w_e * self.edit.unwrap_or(0.0)
            + c.w_c * self.content.unwrap_or(0.0)
            + c.w_o * self.opt.unwrap_or(0.0)
    }

    fn accumulate(&mut self, other: &EnergyTerms) {
        let add = |a: &mut Option<f64>, b: Option<f64>| {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + b);
            }
        };
        add(&mut self.edit, other.edit);
        add(&mut self.content, other.content);
        add(&mut self.opt, other.opt);
    }
}

/// Weighted sum over the per-layer terms.
pub fn total_energy(terms: &[EnergyTerms], config: &GuidanceConfig) -> f64 {
    terms.iter().map(|t| t.weighted(config)).sum()
}

/// Features of one decoder layer for the generated, original and reference
/// streams.
pub struct LayerFeatures<'a> {
    pub gen: &'a FeatureMap,
    pub gud: &'a FeatureMap,
    pub reference: Option<&'a FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct LayerEval {
    pub terms: EnergyTerms,
    pub grad: Option<Array2<f64>>,
}

/// Evaluates the weighted energy of one layer. Terms with zero weight are
/// not computed.
pub fn evaluate_layer(
    f: &LayerFeatures<'_>,
    masks: &LayerMasks,
    spec: &EditSpec,
    c: &GuidanceConfig,
    want_grad: bool,
) -> Result<LayerEval> {
    let mut terms = EnergyTerms::default();
    let mut grad = want_grad.then(|| Array2::zeros(f.gen.data.dim()));
    let add = |name: &str, value: f64, weight: f64, g: Option<Array2<f64>>, grad: &mut Option<Array2<f64>>| -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                detail: format!("layer {} {name} energy is {value}", masks.layer),
            });
        }
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step: 0,
                    detail: format!("layer {} {name} gradient", masks.layer),
                });
            }
            acc.scaled_add(weight, &g);
        }
        Ok(())
    };

    if c.w_e != 0.0 {
        let source = if spec.uses_reference_image {
            f.reference
                .ok_or_else(|| Error::contract("reference", "task needs reference-image features"))?
        } else {
            f.gud
        };
        let scored = match spec.similarity_mode {
            SimilarityMode::Local if !masks.edit_pairs.is_empty() => {
                Some(local_similarity(f.gen, source, &masks.edit_pairs)?)
            }
            SimilarityMode::Global if !masks.gen.is_empty() && !masks.gud.is_empty() => Some(
                global_similarity(f.gen, &masks.gen.tokens(), source, &masks.gud.tokens())?,
            ),
            _ => {
                log::warn!("layer {}: editing mask empty, edit term skipped", masks.layer);
                None
            }
        };
        if let Some(s) = scored {
            let e = energy_edit(s.value, c.alpha, c.beta);
            let g = want_grad.then(|| s.grad * energy_edit_slope(s.value, c.alpha, c.beta));
            add("edit", e, c.w_e, g, &mut grad)?;
            terms.edit = Some(e);
        }
    }

    if c.w_c != 0.0 {
        if masks.share.is_empty() {
            log::warn!("layer {}: m_share empty, content term skipped", masks.layer);
        } else {
            let s = local_similarity(f.gen, f.gud, &identity_pairs(&masks.share))?;
            let e = energy_edit(s.value, c.alpha, c.beta);
            let g = want_grad.then(|| s.grad * energy_edit_slope(s.value, c.alpha, c.beta));
            add("content", e, c.w_c, g, &mut grad)?;
            terms.content = Some(e);
        }
    }

    if c.w_o != 0.0 {
        match (&masks.ipt, &masks.reference) {
            (Some(ipt), Some(r)) if !ipt.is_empty() && !r.is_empty() => {
                let s = opt_term(f.gen, f.gud, ipt, r, c)?;
                add("opt", s.value, c.w_o, want_grad.then_some(s.grad), &mut grad)?;
                terms.opt = Some(s.value);
            }
            _ => log::warn!("layer {}: m_ipt or m_ref empty, opt term skipped", masks.layer),
        }
    }
    Ok(LayerEval { terms, grad })
}

/// Everything a guidance implementation may look at for one step.
pub struct GuidanceContext<'a> {
    pub backend: &'a dyn Denoiser,
    pub z_t: &'a Latent,
    /// Sampling step, `T..=1`.
    pub t: usize,
    pub timestep: usize,
    /// Cumulative signal level at step `t`.
    pub alpha_bar: f64,
    pub cond: &'a TextCond,
    pub entry: &'a BankEntry,
    /// K/V substituted into decoder self-attention for this step.
    pub kv: Option<&'a AttentionRecord>,
}

#[derive(Debug, Clone)]
pub struct GuidanceEval {
    pub gradient: Latent,
    /// Summed over the configured layers.
    pub terms: EnergyTerms,
    pub total: f64,
}

/// Source of the energy gradient added to the predicted noise.
pub trait Guidance: Send + Sync {
    fn evaluate(&self, ctx: &GuidanceContext<'_>) -> Result<GuidanceEval>;
}

/// The feature-correspondence energy of an edit.
#[derive(Debug, Clone)]
pub struct FeatureGuidance {
    pub spec: EditSpec,
    pub config: GuidanceConfig,
    layers: Vec<LayerMasks>,
}

impl FeatureGuidance {
    pub fn new(spec: EditSpec, config: GuidanceConfig, profile: &BackendProfile) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let layers = downsample_masks(&spec, profile)?;
        for l in &config.layers {
            let m = &layers[l - 1];
            if !m.vanished.is_empty() {
                log::warn!("layer {l}: masks {:?} vanish after downsampling", m.vanished);
            }
        }
        Ok(FeatureGuidance {
            spec,
            config,
            layers,
        })
    }

    pub fn layer_masks(&self, layer: usize) -> &LayerMasks {
        &self.layers[layer - 1]
    }

    fn features(&self, ctx: &GuidanceContext<'_>, latent: &Latent) -> Result<FeatureStack> {
        let out = ctx.backend.predict(
            PredictArgs {
                latent,
                timestep: ctx.timestep,
                cond: ctx.cond,
                attn_override: ctx.kv,
            },
            Capture::FEATURES,
        )?;
        Ok(out.features.expect("features were captured"))
    }

    fn run(&self, ctx: &GuidanceContext<'_>, want_grad: bool) -> Result<(Vec<LayerEval>, Option<Latent>)> {
        let gen = self.features(ctx, ctx.z_t)?;
        let gud = self.features(ctx, &ctx.entry.z_gud)?;
        let reference = if self.spec.uses_reference_image {
            let z_ref = ctx.entry.z_ref.as_ref().ok_or_else(|| {
                Error::contract("bank", "task needs a bank with a reference image")
            })?;
            Some(self.features(ctx, z_ref)?)
        } else {
            None
        };
        let mut evals = Vec::with_capacity(self.config.layers.len());
        let mut cot: Vec<Option<Array2<f64>>> = vec![None; DECODER_LAYERS];
        for &l in &self.config.layers {
            let f = LayerFeatures {
                gen: gen.layer(l),
                gud: gud.layer(l),
                reference: reference.as_ref().map(|r| r.layer(l)),
            };
            let eval = evaluate_layer(&f, &self.layers[l - 1], &self.spec, &self.config, want_grad)
                .map_err(|e| with_step(e, ctx.t))?;
            if let Some(g) = &eval.grad {
                match &mut cot[l - 1] {
                    Some(acc) => *acc += g,
                    slot => *slot = Some(g.clone()),
                }
            }
            evals.push(eval);
        }
        if !want_grad {
            return Ok((evals, None));
        }
        let grad = ctx.backend.vjp(
            PredictArgs {
                latent: ctx.z_t,
                timestep: ctx.timestep,
                cond: ctx.cond,
                attn_override: ctx.kv,
            },
            &Cotangent::features(cot),
        )?;
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                step: ctx.t,
                detail: "latent gradient after backpropagation through the denoiser".into(),
            });
        }
        Ok((evals, Some(grad)))
    }

    /// Energy without the gradient.
    pub fn energy(&self, ctx: &GuidanceContext<'_>) -> Result<f64> {
        let (evals, _) = self.run(ctx, false)?;
        Ok(evals.iter().map(|e| e.terms.weighted(&self.config)).sum())
    }

    /// Per-layer terms, in the order of `config.layers`.
    pub fn layer_terms(&self, ctx: &GuidanceContext<'_>) -> Result<Vec<EnergyTerms>> {
        Ok(self.run(ctx, false)?.0.into_iter().map(|e| e.terms).collect())
    }
}

fn with_step(e: Error, t: usize) -> Error {
    match e {
        Error::NonFinite { detail, .. } => Error::NonFinite { step: t, detail },
        other => other,
    }
}

impl Guidance for FeatureGuidance {
    fn evaluate(&self, ctx: &GuidanceContext<'_>) -> Result<GuidanceEval> {
        let (evals, grad) = self.run(ctx, true)?;
        let mut terms = EnergyTerms::default();
        for e in &evals {
            terms.accumulate(&e.terms);
        }
        Ok(GuidanceEval {
            gradient: grad.expect("gradient requested"),
            total: evals.iter().map(|e| e.terms.weighted(&self.config)).sum(),
            terms,
        })
    }
}

/// `∇_{z_t} E` for one step of an edit.
pub fn guidance_gradient(
    backend: &dyn Denoiser,
    z_t: &Latent,
    t: usize,
    timestep: usize,
    alpha_bar: f64,
    entry: &BankEntry,
    spec: &EditSpec,
    config: &GuidanceConfig,
    cond: &TextCond,
    kv: Option<&AttentionRecord>,
) -> Result<GuidanceEval> {
    let g = FeatureGuidance::new(spec.clone(), config.clone(), backend.profile())?;
    g.evaluate(&GuidanceContext {
        backend,
        z_t,
        t,
        timestep,
        alpha_bar,
        cond,
        entry,
        kv,
    })
}

/// Step size that makes the first gated update's max-abs equal to the
/// max-abs of the predicted noise at that step.
pub fn calibrate_eta(noise_max_abs: f64, gradient: &Latent) -> Result<f64> {
    let g = gradient.max_abs();
    if g == 0.0 || !g.is_finite() {
        return Err(Error::contract("gradient", "cannot calibrate on a zero gradient"));
    }
    Ok(noise_max_abs / g)
}

/// `0.5 · ||z_t[patch] − sqrt(alpha_bar_t) · target[patch]||²`, a stand-in
/// energy pulling a latent patch toward a clean target at the current noise
/// level. Used to check that guidance steers sampling.
#[derive(Debug, Clone)]
pub struct QuadraticPull {
    /// Latent-resolution mask selecting the patch.
    pub patch: Mask,
    pub target: Latent,
}

impl QuadraticPull {
    fn residual(&self, z: &Latent, alpha_bar: f64) -> Latent {
        let mut r = Latent::zeros(z.shape());
        let s = alpha_bar.sqrt();
        for (y, x) in self.patch.cells() {
            for c in 0..z.shape().0 {
                r.data[[c, y, x]] = z.data[[c, y, x]] - s * self.target.data[[c, y, x]];
            }
        }
        r
    }

    /// L2 distance of the patch of a clean latent to the target.
    pub fn distance(&self, z0: &Latent) -> f64 {
        self.residual(z0, 1.0).norm()
    }
}

impl Guidance for QuadraticPull {
    fn evaluate(&self, ctx: &GuidanceContext<'_>) -> Result<GuidanceEval> {
        let gradient = self.residual(ctx.z_t, ctx.alpha_bar);
        let e = 0.5 * gradient.dot(&gradient);
        Ok(GuidanceEval {
            gradient,
            terms: EnergyTerms {
                edit: Some(e),
                content: None,
                opt: None,
            },
            total: e,
        })
    }
}
