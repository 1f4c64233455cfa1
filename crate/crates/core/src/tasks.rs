//! Edit specifications for the five supported tasks.
//!
//! Builders take raw user intent (an object mask and an offset, a set of drag
//! points, ...) and derive every mask the energies need, so callers never do
//! mask algebra themselves.

use serde::{Deserialize, Serialize};

use crate::backend::{BackendProfile, DECODER_LAYERS};
use crate::error::{Error, Result};
use crate::guidance::WeightOverrides;
use crate::mask::{CellPair, DragPair, Mask, PairingMap, PatchPair};

pub const REQUEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Moving,
    Resizing,
    Replacing,
    Pasting,
    Dragging,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Moving,
        TaskKind::Resizing,
        TaskKind::Replacing,
        TaskKind::Pasting,
        TaskKind::Dragging,
    ];

    pub fn needs_reference(self) -> bool {
        matches!(self, TaskKind::Replacing | TaskKind::Pasting)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Position-by-position cosine under a pairing map.
    Local,
    /// Cosine of region-mean features.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    pub kind: TaskKind,
    /// Where the edited content should end up.
    pub m_gen: Mask,
    /// Where the guiding content lives (original or reference image).
    pub m_gud: Mask,
    /// Region that must stay unchanged.
    pub m_share: Mask,
    /// Region uncovered by a move, to be inpainted.
    pub m_ipt: Option<Mask>,
    /// Appearance source for the inpainted region.
    pub m_ref: Option<Mask>,
    pub pairing: PairingMap,
    pub similarity_mode: SimilarityMode,
    pub uses_reference_image: bool,
    pub gamma: Option<f64>,
    #[serde(default)]
    pub weights: WeightOverrides,
}

/// Integer pixel offset `(dy, dx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Offset {
    pub dy: i64,
    pub dx: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DragPointSet {
    pub points: Vec<DragPair>,
    pub share: Mask,
}

impl EditSpec {
    pub fn dims(&self) -> (usize, usize) {
        self.m_gen.dims()
    }

    /// The inpainting term only exists for moves that uncover pixels.
    pub fn has_opt_term(&self) -> bool {
        matches!(self.kind, TaskKind::Moving | TaskKind::Resizing)
            && self.m_ipt.as_ref().is_some_and(|m| !m.is_empty())
            && self.m_ref.as_ref().is_some_and(|m| !m.is_empty())
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        let named = [
            ("m_gud", Some(&self.m_gud)),
            ("m_share", Some(&self.m_share)),
            ("m_ipt", self.m_ipt.as_ref()),
            ("m_ref", self.m_ref.as_ref()),
        ];
        for (field, mask) in named {
            if let Some(m) = mask {
                if m.dims() != dims {
                    return Err(Error::contract(
                        field,
                        format!("resolution {:?} differs from m_gen {:?}", m.dims(), dims),
                    ));
                }
            }
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::contract("gamma", "must be positive"));
            }
        }
        if self.kind.needs_reference() != self.uses_reference_image {
            return Err(Error::contract(
                "uses_reference_image",
                format!("inconsistent with task {:?}", self.kind),
            ));
        }
        if self.similarity_mode == SimilarityMode::Local {
            check_bijective(&self.pairing, &self.m_gen, &self.m_gud)?;
        }
        Ok(())
    }
}

/// Local pairings must match every generated cell with exactly one distinct
/// guided cell and cover the guided mask. Scale maps pair with interpolated
/// guided features and are exempt.
fn check_bijective(pairing: &PairingMap, m_gen: &Mask, m_gud: &Mask) -> Result<()> {
    let pairs: Vec<((usize, usize), (i64, i64))> = match pairing {
        PairingMap::Scale { .. } => return Ok(()),
        PairingMap::Points { patches } => patches
            .iter()
            .flat_map(|p| {
                p.dst_cells()
                    .zip(p.src_cells())
                    .map(|(d, s)| (d, (s.0 as i64, s.1 as i64)))
                    .collect::<Vec<_>>()
            })
            .collect(),
        _ => m_gen
            .cells()
            .map(|(y, x)| {
                let (gy, gx) = pairing
                    .gud_position((y as f64, x as f64))
                    .expect("non-point map");
                ((y, x), (gy.round() as i64, gx.round() as i64))
            })
            .collect(),
    };
    let mut gen_seen = std::collections::HashSet::new();
    let mut gud_seen = std::collections::HashSet::new();
    for (g, s) in &pairs {
        if !m_gud.get_signed(s.0, s.1) {
            return Err(Error::contract(
                "pairing",
                format!("cell {g:?} pairs with ({}, {}) outside m_gud", s.0, s.1),
            ));
        }
        gen_seen.insert(*g);
        gud_seen.insert(*s);
    }
    if matches!(pairing, PairingMap::Points { .. }) {
        // union semantics: overlapping patches may share a generated cell
        return Ok(());
    }
    if gen_seen.len() != pairs.len() || gud_seen.len() != pairs.len() || pairs.len() != m_gud.count() {
        return Err(Error::contract("pairing", "pairing is not a bijection"));
    }
    Ok(())
}

fn require_nonempty(mask: &Mask, field: &str) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::contract(field, "mask is empty"));
    }
    Ok(())
}

fn require_same_dims(a: &Mask, b: &Mask, field: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::contract(
            field,
            format!("resolution {:?} differs from {:?}", b.dims(), a.dims()),
        ));
    }
    Ok(())
}

/// Ring around the inpainting region, outside both object positions.
fn default_reference_region(m_ipt: &Mask, m_gen: &Mask, m_gud: &Mask) -> Mask {
    let occupied = m_gen.union(m_gud);
    for radius in 1..=4 {
        let ring = m_ipt.dilate(radius).difference(&occupied);
        if !ring.is_empty() {
            return ring;
        }
    }
    occupied.complement()
}

fn move_like(
    kind: TaskKind,
    m_gud: Mask,
    m_gen: Mask,
    pairing: PairingMap,
    gamma: Option<f64>,
    reference_region: Option<Mask>,
) -> Result<EditSpec> {
    let m_share = m_gen.union(&m_gud).complement();
    let m_ipt = m_gud.difference(&m_gen);
    let m_ref = match reference_region {
        Some(r) => {
            require_same_dims(&m_gud, &r, "reference_region")?;
            require_nonempty(&r, "reference_region")?;
            r
        }
        None => default_reference_region(&m_ipt, &m_gen, &m_gud),
    };
    let spec = EditSpec {
        kind,
        m_gen,
        m_gud,
        m_share,
        m_ipt: Some(m_ipt),
        m_ref: Some(m_ref),
        pairing,
        similarity_mode: SimilarityMode::Local,
        uses_reference_image: false,
        gamma,
        weights: WeightOverrides::default(),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn build_moving(
    object_mask: &Mask,
    offset: Offset,
    reference_region: Option<&Mask>,
) -> Result<EditSpec> {
    require_nonempty(object_mask, "object_mask")?;
    let m_gen = object_mask.translate(offset.dy, offset.dx)?;
    move_like(
        TaskKind::Moving,
        object_mask.clone(),
        m_gen,
        PairingMap::Translation {
            dy: offset.dy as f64,
            dx: offset.dx as f64,
        },
        None,
        reference_region.cloned(),
    )
}

/// Scales the object by `gamma` about its bounding-box center, then moves it
/// by `offset`.
pub fn build_resizing(
    object_mask: &Mask,
    gamma: f64,
    offset: Offset,
    reference_region: Option<&Mask>,
) -> Result<EditSpec> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::contract("gamma", format!("must be > 0, got {gamma}")));
    }
    require_nonempty(object_mask, "object_mask")?;
    let anchor = object_mask.bbox_center().expect("nonempty mask");
    let resized = object_mask.scale_about(anchor, gamma);
    if resized.is_empty() {
        return Err(Error::contract("gamma", "object vanishes at this scale"));
    }
    let m_gen = resized.translate(offset.dy, offset.dx)?;
    move_like(
        TaskKind::Resizing,
        object_mask.clone(),
        m_gen,
        PairingMap::Scale {
            anchor,
            gamma,
            dy: offset.dy as f64,
            dx: offset.dx as f64,
        },
        Some(gamma),
        reference_region.cloned(),
    )
}

/// `m_gen_object` marks the object in the edited image, `m_gud_reference`
/// the same-category object in the reference image.
pub fn build_replacing(m_gen_object: &Mask, m_gud_reference: &Mask) -> Result<EditSpec> {
    require_nonempty(m_gen_object, "object_mask")?;
    require_nonempty(m_gud_reference, "reference_mask")?;
    require_same_dims(m_gen_object, m_gud_reference, "reference_mask")?;
    let spec = EditSpec {
        kind: TaskKind::Replacing,
        m_gen: m_gen_object.clone(),
        m_gud: m_gud_reference.clone(),
        m_share: m_gen_object.complement(),
        m_ipt: None,
        m_ref: None,
        pairing: PairingMap::Identity,
        similarity_mode: SimilarityMode::Global,
        uses_reference_image: true,
        gamma: None,
        weights: WeightOverrides::default(),
    };
    spec.validate()?;
    Ok(spec)
}

/// `m_gud_in_reference` marks the object in the reference image,
/// `m_gen_target` where it should appear. The two must be translates.
pub fn build_pasting(m_gud_in_reference: &Mask, m_gen_target: &Mask) -> Result<EditSpec> {
    require_nonempty(m_gud_in_reference, "reference_mask")?;
    require_nonempty(m_gen_target, "target_mask")?;
    require_same_dims(m_gud_in_reference, m_gen_target, "target_mask")?;
    if m_gud_in_reference.count() != m_gen_target.count() {
        return Err(Error::contract(
            "target_mask",
            format!(
                "cell count {} differs from reference object's {}",
                m_gen_target.count(),
                m_gud_in_reference.count()
            ),
        ));
    }
    let (sy, sx, _, _) = m_gud_in_reference.bbox().expect("nonempty");
    let (ty, tx, _, _) = m_gen_target.bbox().expect("nonempty");
    let (dy, dx) = (ty as i64 - sy as i64, tx as i64 - sx as i64);
    if m_gud_in_reference.translate(dy, dx).ok().as_ref() != Some(m_gen_target) {
        return Err(Error::contract(
            "target_mask",
            "target must be a translated copy of the reference object",
        ));
    }
    let spec = EditSpec {
        kind: TaskKind::Pasting,
        m_gen: m_gen_target.clone(),
        m_gud: m_gud_in_reference.clone(),
        m_share: m_gen_target.complement(),
        m_ipt: None,
        m_ref: None,
        pairing: PairingMap::Translation {
            dy: dy as f64,
            dx: dx as f64,
        },
        similarity_mode: SimilarityMode::Local,
        uses_reference_image: true,
        gamma: None,
        weights: WeightOverrides::default(),
    };
    spec.validate()?;
    Ok(spec)
}

/// 3×3 patches around each source and destination point. Patches that cross
/// the border are clipped identically on both sides.
pub fn build_dragging(points: &DragPointSet) -> Result<EditSpec> {
    let (h, w) = points.share.dims();
    if points.points.is_empty() {
        return Err(Error::contract("points", "at least one drag pair is required"));
    }
    let inside = |p: crate::mask::Point| p.y >= 0 && p.x >= 0 && (p.y as usize) < h && (p.x as usize) < w;
    let mut patches = Vec::with_capacity(points.points.len());
    let mut m_gud = Mask::empty(h, w);
    let mut m_gen = Mask::empty(h, w);
    for (i, pair) in points.points.iter().enumerate() {
        if !inside(pair.src) {
            return Err(Error::contract(format!("points[{i}].src"), "outside the image"));
        }
        if !inside(pair.dst) {
            return Err(Error::contract(format!("points[{i}].dst"), "outside the image"));
        }
        let offsets: Vec<(i64, i64)> = (-1..=1)
            .flat_map(|dy| (-1..=1).map(move |dx| (dy, dx)))
            .filter(|&(dy, dx)| {
                let ok = |p: crate::mask::Point| {
                    let (y, x) = (p.y + dy, p.x + dx);
                    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w
                };
                ok(pair.src) && ok(pair.dst)
            })
            .collect();
        let patch = PatchPair {
            pair: *pair,
            offsets,
        };
        for (y, x) in patch.src_cells() {
            m_gud.set(y, x, true);
        }
        for (y, x) in patch.dst_cells() {
            m_gen.set(y, x, true);
        }
        patches.push(patch);
    }
    let spec = EditSpec {
        kind: TaskKind::Dragging,
        m_gen,
        m_gud,
        m_share: points.share.clone(),
        m_ipt: None,
        m_ref: None,
        pairing: PairingMap::Points { patches },
        similarity_mode: SimilarityMode::Local,
        uses_reference_image: false,
        gamma: None,
        weights: WeightOverrides::default(),
    };
    spec.validate()?;
    Ok(spec)
}

/// Masks and pairs resampled to one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMasks {
    /// 1-based decoder layer.
    pub layer: usize,
    pub size: (usize, usize),
    /// Generated-token / guided-cell pairs for local similarity.
    pub edit_pairs: Vec<CellPair>,
    pub gen: Mask,
    pub gud: Mask,
    pub share: Mask,
    pub ipt: Option<Mask>,
    pub reference: Option<Mask>,
    /// Names of masks that were nonempty at pixel resolution but vanished here.
    pub vanished: Vec<&'static str>,
}

/// Downsamples every mask of `spec` to each decoder layer of `profile`.
pub fn downsample_masks(spec: &EditSpec, profile: &BackendProfile) -> Result<Vec<LayerMasks>> {
    if spec.dims() != profile.image_size() {
        return Err(Error::contract(
            "masks",
            format!(
                "mask resolution {:?} does not match image size {:?}",
                spec.dims(),
                profile.image_size()
            ),
        ));
    }
    (1..=DECODER_LAYERS)
        .map(|layer| {
            let s = profile.layer_pixel_scale(layer);
            let mut vanished = Vec::new();
            let mut down = |name: &'static str, m: &Mask| {
                let d = m.downsample(s);
                if d.is_empty() && !m.is_empty() {
                    vanished.push(name);
                }
                d
            };
            let gen = down("m_gen", &spec.m_gen);
            let gud = down("m_gud", &spec.m_gud);
            let share = down("m_share", &spec.m_share);
            let ipt = spec.m_ipt.as_ref().map(|m| down("m_ipt", m));
            let reference = spec.m_ref.as_ref().map(|m| down("m_ref", m));
            let edit_pairs = spec.pairing.layer_pairs(&spec.m_gen, s);
            if edit_pairs.is_empty() && !spec.m_gen.is_empty() && !vanished.contains(&"m_gen") {
                vanished.push("m_gen");
            }
            Ok(LayerMasks {
                layer,
                size: profile.layer_size(layer),
                edit_pairs,
                gen,
                gud,
                share,
                ipt,
                reference,
                vanished,
            })
        })
        .collect()
}

/// Raw user inputs for one edit, as exchanged over the API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub v: u32,
    #[serde(flatten)]
    pub task: TaskInput,
    #[serde(default)]
    pub weights: WeightOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskInput {
    Moving {
        object_mask: Mask,
        offset: Offset,
        #[serde(default)]
        reference_region: Option<Mask>,
    },
    Resizing {
        object_mask: Mask,
        gamma: f64,
        #[serde(default)]
        offset: Offset,
        #[serde(default)]
        reference_region: Option<Mask>,
    },
    Replacing {
        object_mask: Mask,
        reference_mask: Mask,
    },
    Pasting {
        reference_mask: Mask,
        target_mask: Mask,
    },
    Dragging {
        points: Vec<DragPair>,
        share_mask: Mask,
    },
}

impl EditRequest {
    pub fn new(task: TaskInput) -> Self {
        EditRequest {
            v: REQUEST_VERSION,
            task,
            weights: WeightOverrides::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let req: EditRequest = serde_json::from_str(text)
            .map_err(|e| Error::contract("request", e.to_string()))?;
        if req.v != REQUEST_VERSION {
            return Err(Error::contract(
                "v",
                format!("unsupported request version {}", req.v),
            ));
        }
        Ok(req)
    }

    pub fn kind(&self) -> TaskKind {
        match self.task {
            TaskInput::Moving { .. } => TaskKind::Moving,
            TaskInput::Resizing { .. } => TaskKind::Resizing,
            TaskInput::Replacing { .. } => TaskKind::Replacing,
            TaskInput::Pasting { .. } => TaskKind::Pasting,
            TaskInput::Dragging { .. } => TaskKind::Dragging,
        }
    }

    /// Validates the inputs and derives the full edit specification.
    pub fn build(&self) -> Result<EditSpec> {
        let mut spec = match &self.task {
            TaskInput::Moving {
                object_mask,
                offset,
                reference_region,
            } => build_moving(object_mask, *offset, reference_region.as_ref()),
            TaskInput::Resizing {
                object_mask,
                gamma,
                offset,
                reference_region,
            } => build_resizing(object_mask, *gamma, *offset, reference_region.as_ref()),
            TaskInput::Replacing {
                object_mask,
                reference_mask,
            } => build_replacing(object_mask, reference_mask),
            TaskInput::Pasting {
                reference_mask,
                target_mask,
            } => build_pasting(reference_mask, target_mask),
            TaskInput::Dragging { points, share_mask } => build_dragging(&DragPointSet {
                points: points.clone(),
                share: share_mask.clone(),
            }),
        }?;
        self.weights.validate()?;
        spec.weights = self.weights.clone();
        Ok(spec)
    }
}
