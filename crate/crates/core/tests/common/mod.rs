#![allow(dead_code)]

use dragedit_core::backend::{Denoiser, ToyDenoiser};
use dragedit_core::inversion::{invert, InversionInput, MemoryBank};
use dragedit_core::schedule::NoiseSchedule;
use dragedit_core::tensor::Latent;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A clean latent in the codec's range.
pub fn random_latent(seed: u64) -> Latent {
    let mut r = rng(seed);
    Latent::new(Array3::from_shape_fn((4, 16, 16), |_| r.random_range(-1.0..1.0)))
}

pub fn toy() -> ToyDenoiser {
    ToyDenoiser::new(7)
}

pub fn schedule(backend: &dyn Denoiser, steps: usize) -> NoiseSchedule {
    NoiseSchedule::new(&backend.profile().schedule, steps).unwrap()
}

pub fn bank(backend: &dyn Denoiser, steps: usize, seed: u64, with_ref: bool) -> MemoryBank {
    let z0 = random_latent(seed);
    let z_ref = random_latent(seed + 1000);
    invert(
        backend,
        &schedule(backend, steps),
        InversionInput {
            z0: &z0,
            z0_ref: with_ref.then_some(&z_ref),
            prompt: "a photo",
        },
    )
    .unwrap()
}

use dragedit_core::mask::{DragPair, Mask, Point};
use dragedit_core::tasks::{
    build_dragging, build_moving, build_pasting, build_replacing, build_resizing, DragPointSet,
    EditSpec, Offset, TaskKind,
};

pub const N: usize = 16;

/// A random axis-aligned box of side 2..=6 inside the 16×16 grid.
pub fn random_box(r: &mut ChaCha8Rng) -> Mask {
    let h = r.random_range(2..=6);
    let w = r.random_range(2..=6);
    let y0 = r.random_range(0..=N - h);
    let x0 = r.random_range(0..=N - w);
    Mask::rect(N, N, y0, x0, y0 + h, x0 + w)
}

/// Offset that keeps `m` inside the grid.
pub fn random_offset(r: &mut ChaCha8Rng, m: &Mask) -> Offset {
    let (y0, x0, y1, x1) = m.bbox().unwrap();
    Offset {
        dy: r.random_range(-(y0 as i64)..=(N as i64 - 1 - y1 as i64)),
        dx: r.random_range(-(x0 as i64)..=(N as i64 - 1 - x1 as i64)),
    }
}

pub fn random_spec(kind: TaskKind, r: &mut ChaCha8Rng) -> EditSpec {
    match kind {
        TaskKind::Moving => {
            let m = random_box(r);
            let o = random_offset(r, &m);
            build_moving(&m, o, None).unwrap()
        }
        TaskKind::Resizing => loop {
            let m = random_box(r);
            let gamma = r.random_range(0.5..2.0);
            let anchor = m.bbox_center().unwrap();
            let scaled = m.scale_about(anchor, gamma);
            if scaled.is_empty() {
                continue;
            }
            let o = random_offset(r, &scaled);
            return build_resizing(&m, gamma, o, None).unwrap();
        },
        TaskKind::Replacing => build_replacing(&random_box(r), &random_box(r)).unwrap(),
        TaskKind::Pasting => {
            let m = random_box(r);
            let o = random_offset(r, &m);
            build_pasting(&m, &m.translate(o.dy, o.dx).unwrap()).unwrap()
        }
        TaskKind::Dragging => {
            let count = r.random_range(1..=3);
            let pt = |r: &mut ChaCha8Rng| Point {
                x: r.random_range(0..N as i64),
                y: r.random_range(0..N as i64),
            };
            let points = (0..count).map(|_| DragPair { src: pt(r), dst: pt(r) }).collect();
            build_dragging(&DragPointSet {
                points,
                share: random_box(r).complement(),
            })
            .unwrap()
        }
    }
}

use dragedit_core::attention::build_kv_plan;
use dragedit_core::guidance::{FeatureGuidance, GuidanceContext, GuidanceEval, Guidance};
use dragedit_core::backend::TextCond;

/// Evaluates a guidance energy at arbitrary latents for one bank step.
pub struct Probe<'a> {
    pub backend: &'a dyn Denoiser,
    pub bank: &'a MemoryBank,
    pub schedule: &'a NoiseSchedule,
    pub cond: TextCond,
    pub t: usize,
}

impl<'a> Probe<'a> {
    pub fn new(backend: &'a dyn Denoiser, bank: &'a MemoryBank, schedule: &'a NoiseSchedule, t: usize) -> Self {
        Probe {
            backend,
            cond: backend.encode_text(&bank.prompt),
            bank,
            schedule,
            t,
        }
    }

    fn with_ctx<R>(&self, g: &FeatureGuidance, z: &Latent, f: impl FnOnce(&GuidanceContext<'_>) -> R) -> R {
        let entry = self.bank.lookup(self.t).unwrap();
        let plan = build_kv_plan(entry, g.spec.kind).unwrap();
        let ctx = GuidanceContext {
            backend: self.backend,
            z_t: z,
            t: self.t,
            timestep: self.schedule.timestep(self.t).unwrap(),
            alpha_bar: self.schedule.alpha_bar(self.t).unwrap(),
            cond: &self.cond,
            entry,
            kv: Some(&plan.record),
        };
        f(&ctx)
    }

    pub fn energy(&self, g: &FeatureGuidance, z: &Latent) -> f64 {
        self.with_ctx(g, z, |c| g.energy(c).unwrap())
    }

    pub fn eval(&self, g: &FeatureGuidance, z: &Latent) -> GuidanceEval {
        self.with_ctx(g, z, |c| g.evaluate(c).unwrap())
    }

    /// Relative error of the analytic directional derivative against central
    /// differences along `d`.
    pub fn fd_rel_error(&self, g: &FeatureGuidance, z: &Latent, d: &Latent, eps: f64) -> f64 {
        let an = self.eval(g, z).gradient.dot(d);
        let fd = (self.energy(g, &z.axpy(eps, d)) - self.energy(g, &z.axpy(-eps, d))) / (2.0 * eps);
        (an - fd).abs() / an.abs().max(fd.abs()).max(1e-12)
    }
}

pub fn random_direction(r: &mut ChaCha8Rng) -> Latent {
    Latent::new(Array3::from_shape_fn((4, N, N), |_| r.random_range(-1.0..1.0)))
}

/// A gradient-evaluation instance: a latent near the bank at a random gated
/// step.
pub fn perturbed(bank: &MemoryBank, t: usize, r: &mut ChaCha8Rng, scale: f64) -> Latent {
    let noise = Latent::new(Array3::from_shape_fn((4, N, N), |_| r.random_range(-scale..scale)));
    bank.lookup(t).unwrap().z_gud.axpy(1.0, &noise)
}
