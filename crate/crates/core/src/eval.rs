//! Point-distance evaluation.
//!
//! `targets.json` declares, per sample, where the handle points start and
//! where they should end up:
//!
//! ```json
//! {"v": 1, "samples": [{"id": "face_01",
//!   "initial": [{"x": 10, "y": 12}], "target": [{"x": 20, "y": 12}]}]}
//! ```
//!
//! The results directory holds `<id>.json` files, `{"v": 1, "points": [...]}`,
//! with the point locations found in each edited image by an external
//! detector. The report gives the mean Euclidean distance of edited points to
//! their targets, next to the same distance for the unedited points.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EVAL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointF {
    pub x: f64,
    pub y: f64,
}

impl PointF {
    pub fn distance(self, other: PointF) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSample {
    pub id: String,
    pub initial: Vec<PointF>,
    pub target: Vec<PointF>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub v: u32,
    pub samples: Vec<TargetSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultPoints {
    pub v: u32,
    pub points: Vec<PointF>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub id: String,
    pub points: usize,
    pub mean_distance: f64,
    pub initial_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub v: u32,
    pub samples: Vec<SampleReport>,
    pub points: usize,
    /// Mean over all points of all samples.
    pub mean_distance: f64,
    /// Same mean for the unedited points, the upper bound.
    pub initial_distance: f64,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<24} {:>6} {:>12} {:>12}\n", "sample", "points", "distance", "initial");
        for s in &self.samples {
            out += &format!(
                "{:<24} {:>6} {:>12.4} {:>12.4}\n",
                s.id, s.points, s.mean_distance, s.initial_distance
            );
        }
        out += &format!(
            "{:<24} {:>6} {:>12.4} {:>12.4}\n",
            "mean", self.points, self.mean_distance, self.initial_distance
        );
        out
    }
}

fn mean_distance(a: &[PointF], b: &[PointF]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p.distance(*q)).sum::<f64>() / a.len() as f64
}

/// Scores edited points against the targets. `results` must hold one entry
/// per sample id.
pub fn evaluate(targets: &Targets, results: &std::collections::HashMap<String, Vec<PointF>>) -> Result<EvalReport> {
    if targets.v != EVAL_VERSION {
        return Err(Error::contract("v", format!("unsupported targets version {}", targets.v)));
    }
    if targets.samples.is_empty() {
        return Err(Error::contract("samples", "no samples"));
    }
    let mut samples = Vec::with_capacity(targets.samples.len());
    let (mut sum, mut sum_initial, mut count) = (0.0, 0.0, 0usize);
    for s in &targets.samples {
        if s.initial.len() != s.target.len() || s.target.is_empty() {
            return Err(Error::contract(
                format!("samples[{}]", s.id),
                "initial and target point lists must be nonempty and equally long",
            ));
        }
        let edited = results
            .get(&s.id)
            .ok_or_else(|| Error::contract(format!("results[{}]", s.id), "missing result"))?;
        if edited.len() != s.target.len() {
            return Err(Error::contract(
                format!("results[{}]", s.id),
                format!("{} points, expected {}", edited.len(), s.target.len()),
            ));
        }
        let n = s.target.len();
        let d = mean_distance(edited, &s.target);
        let d0 = mean_distance(&s.initial, &s.target);
        sum += d * n as f64;
        sum_initial += d0 * n as f64;
        count += n;
        samples.push(SampleReport {
            id: s.id.clone(),
            points: n,
            mean_distance: d,
            initial_distance: d0,
        });
    }
    Ok(EvalReport {
        v: EVAL_VERSION,
        samples,
        points: count,
        mean_distance: sum / count as f64,
        initial_distance: sum_initial / count as f64,
    })
}

/// Reads `targets.json` and `results_dir/<id>.json` and scores them.
pub fn evaluate_dir(results_dir: impl AsRef<Path>, targets_path: impl AsRef<Path>) -> Result<EvalReport> {
    let targets: Targets = serde_json::from_str(&fs::read_to_string(targets_path)?)?;
    let mut results = std::collections::HashMap::new();
    for s in &targets.samples {
        let path = results_dir.as_ref().join(format!("{}.json", s.id));
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::contract(format!("results[{}]", s.id), format!("{}: {e}", path.display())))?;
        let r: ResultPoints = serde_json::from_str(&text)?;
        if r.v != EVAL_VERSION {
            return Err(Error::contract(format!("results[{}].v", s.id), "unsupported version"));
        }
        results.insert(s.id.clone(), r.points);
    }
    evaluate(&targets, &results)
}
