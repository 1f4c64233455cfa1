//! Binary masks and the geometric pairing between guided and generated
//! regions.
//!
//! Coordinates: cell `(y, x)` covers `[y, y+1) × [x, x+1)` in continuous
//! pixel units, so its center sits at `(y + 0.5, x + 0.5)`. A feature layer
//! with `s` pixels per cell has its cell `q` centered at `(q + 0.5) · s`.

use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{gray_from_png, gray_to_png};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Mask {
            height,
            width,
            bits,
        }
    }

    /// Axis-aligned rectangle of rows `y0..y1` and columns `x0..x1`.
    pub fn rect(height: usize, width: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        Mask::from_fn(height, width, |y, x| y >= y0 && y < y1 && x >= x0 && x < x1)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Like [`Mask::get`] but false outside the grid.
    pub fn get_signed(&self, y: i64, x: i64) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.get(y as usize, x as usize)
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Selected cells in raster order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| (i / self.width, i % self.width))
    }

    /// Selected cells as row-major token indices.
    pub fn tokens(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
            .collect()
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert_eq!(self.dims(), other.dims(), "mask resolutions differ");
        Mask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && b)
    }

    /// Cells in `self` and not in `other`.
    pub fn difference(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Shifts every cell by `(dy, dx)`. Errors if any selected cell leaves
    /// the grid.
    pub fn translate(&self, dy: i64, dx: i64) -> Result<Mask> {
        let mut out = Mask::empty(self.height, self.width);
        for (y, x) in self.cells() {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny < 0 || nx < 0 || ny >= self.height as i64 || nx >= self.width as i64 {
                return Err(Error::contract(
                    "offset",
                    format!("cell ({y},{x}) moves out of bounds to ({ny},{nx})"),
                ));
            }
            out.set(ny as usize, nx as usize, true);
        }
        Ok(out)
    }

    /// Chebyshev dilation by `radius` cells.
    pub fn dilate(&self, radius: usize) -> Mask {
        let r = radius as i64;
        Mask::from_fn(self.height, self.width, |y, x| {
            (-r..=r).any(|dy| (-r..=r).any(|dx| self.get_signed(y as i64 + dy, x as i64 + dx)))
        })
    }

    /// Inclusive bounding box `(y0, x0, y1, x1)`.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut it = self.cells();
        let (y, x) = it.next()?;
        Some(it.fold((y, x, y, x), |(y0, x0, y1, x1), (y, x)| {
            (y0.min(y), x0.min(x), y1.max(y), x1.max(x))
        }))
    }

    /// Bounding-box center in continuous coordinates.
    pub fn bbox_center(&self) -> Option<(f64, f64)> {
        self.bbox().map(|(y0, x0, y1, x1)| {
            ((y0 + y1 + 1) as f64 / 2.0, (x0 + x1 + 1) as f64 / 2.0)
        })
    }

    /// Block downsample by `factor`: a coarse cell is on when at least half of
    /// its `factor × factor` block is on.
    pub fn downsample(&self, factor: usize) -> Mask {
        if factor == 1 {
            return self.clone();
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let area = (factor * factor) as f64;
        Mask::from_fn(h, w, |y, x| {
            let mut on = 0usize;
            for dy in 0..factor {
                for dx in 0..factor {
                    on += self.get(y * factor + dy, x * factor + dx) as usize;
                }
            }
            on as f64 / area >= 0.5
        })
    }

    /// Resizes by `gamma` about `anchor` (continuous coordinates) and keeps
    /// the original grid: cells whose source falls outside the grid are off.
    /// Nearest-neighbor sampling.
    pub fn scale_about(&self, anchor: (f64, f64), gamma: f64) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| {
            let sy = anchor.0 + (y as f64 + 0.5 - anchor.0) / gamma;
            let sx = anchor.1 + (x as f64 + 0.5 - anchor.1) / gamma;
            self.get_signed(sy.floor() as i64, sx.floor() as i64)
        })
    }

    /// 0/255 single-channel raster.
    pub fn to_raster(&self) -> Vec<u8> {
        self.bits.iter().map(|b| if *b { 255 } else { 0 }).collect()
    }

    /// Any nonzero byte counts as on.
    pub fn from_raster(height: usize, width: usize, data: &[u8]) -> Result<Mask> {
        if data.len() != height * width {
            return Err(Error::contract("mask", "raster size mismatch"));
        }
        Ok(Mask {
            height,
            width,
            bits: data.iter().map(|v| *v != 0).collect(),
        })
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        gray_to_png(self.width, self.height, &self.to_raster())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Mask> {
        let (w, h, data) = gray_from_png(bytes)?;
        Mask::from_raster(h, w, &data)
    }

    pub fn to_base64_png(&self) -> Result<String> {
        Ok(base64::engine::general_purpose::STANDARD.encode(self.to_png()?))
    }

    pub fn from_base64_png(text: &str) -> Result<Mask> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(text.trim())
            .map_err(|e| Error::Format(format!("mask base64: {e}")))?;
        Mask::from_png(&bytes)
    }
}

impl Serialize for Mask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let text = self.to_base64_png().map_err(serde::ser::Error::custom)?;
        s.serialize_str(&text)
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Mask::from_base64_png(&text).map_err(serde::de::Error::custom)
    }
}

/// A pixel position, row `y` and column `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: i64,
    pub y: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DragPair {
    pub src: Point,
    pub dst: Point,
}

/// One dragged point with its (possibly border-clipped) patch offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPair {
    pub pair: DragPair,
    /// Offsets `(dy, dx)` from the point that survive clipping on both sides.
    pub offsets: Vec<(i64, i64)>,
}

impl PatchPair {
    pub fn src_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.offsets
            .iter()
            .map(|(dy, dx)| ((self.pair.src.y + dy) as usize, (self.pair.src.x + dx) as usize))
    }

    pub fn dst_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.offsets
            .iter()
            .map(|(dy, dx)| ((self.pair.dst.y + dy) as usize, (self.pair.dst.x + dx) as usize))
    }
}

/// Alignment between generated-side cells and guided-side positions.
///
/// Each variant maps a generated position to the guided position whose
/// feature it should match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PairingMap {
    Identity,
    /// `gen = gud + (dy, dx)`.
    Translation { dy: f64, dx: f64 },
    /// `gen = anchor + gamma · (gud − anchor) + (dy, dx)`.
    Scale {
        anchor: (f64, f64),
        gamma: f64,
        dy: f64,
        dx: f64,
    },
    /// Per-point patch translations.
    Points { patches: Vec<PatchPair> },
}

/// One generated-side token paired with a fractional guided-side cell
/// position at the same feature resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPair {
    pub gen_token: usize,
    pub gud_cell: (f64, f64),
}

impl PairingMap {
    /// Guided position for a generated position, continuous pixel units.
    /// `None` for per-point maps, which are resolved patch by patch.
    pub fn gud_position(&self, (y, x): (f64, f64)) -> Option<(f64, f64)> {
        match self {
            PairingMap::Identity => Some((y, x)),
            PairingMap::Translation { dy, dx } => Some((y - dy, x - dx)),
            PairingMap::Scale {
                anchor,
                gamma,
                dy,
                dx,
            } => Some((
                anchor.0 + (y - dy - anchor.0) / gamma,
                anchor.1 + (x - dx - anchor.1) / gamma,
            )),
            PairingMap::Points { .. } => None,
        }
    }

    /// Pairs at a feature layer with `scale` pixels per cell. `gen` is the
    /// generated-side mask at pixel resolution.
    pub fn layer_pairs(&self, gen: &Mask, scale: usize) -> Vec<CellPair> {
        let s = scale as f64;
        let to_cell = |(y, x): (f64, f64)| (y / s - 0.5, x / s - 0.5);
        let center = |q: usize, w: usize| (((q / w) as f64 + 0.5) * s, ((q % w) as f64 + 0.5) * s);
        match self {
            PairingMap::Points { patches } => {
                let mut pairs = Vec::new();
                for patch in patches {
                    let mut dst = Mask::empty(gen.height(), gen.width());
                    for (y, x) in patch.dst_cells() {
                        dst.set(y, x, true);
                    }
                    let coarse = dst.downsample(scale);
                    let shift = (
                        (patch.pair.dst.y - patch.pair.src.y) as f64,
                        (patch.pair.dst.x - patch.pair.src.x) as f64,
                    );
                    for q in coarse.tokens() {
                        let (y, x) = center(q, coarse.width());
                        pairs.push(CellPair {
                            gen_token: q,
                            gud_cell: to_cell((y - shift.0, x - shift.1)),
                        });
                    }
                }
                pairs
            }
            _ => {
                let coarse = gen.downsample(scale);
                coarse
                    .tokens()
                    .into_iter()
                    .map(|q| CellPair {
                        gen_token: q,
                        gud_cell: to_cell(
                            self.gud_position(center(q, coarse.width()))
                                .expect("non-point map"),
                        ),
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_algebra() {
        let a = Mask::rect(4, 4, 0, 0, 2, 2);
        let b = Mask::rect(4, 4, 1, 1, 3, 3);
        assert_eq!(a.union(&b).count(), 7);
        assert_eq!(a.intersect(&b).count(), 1);
        assert_eq!(a.difference(&b).count(), 3);
        assert_eq!(a.complement().count(), 12);
    }

    #[test]
    fn translate_rejects_out_of_bounds() {
        let a = Mask::rect(4, 4, 2, 2, 4, 4);
        assert_eq!(a.translate(-2, -2).unwrap(), Mask::rect(4, 4, 0, 0, 2, 2));
        let err = a.translate(1, 0).unwrap_err();
        assert_eq!(err.field(), Some("offset"));
    }

    #[test]
    fn downsample_threshold_is_half_the_block() {
        let full = Mask::full(16, 16);
        assert_eq!(full.downsample(4), Mask::full(4, 4));
        let mut single = Mask::empty(16, 16);
        single.set(5, 5, true);
        assert!(single.downsample(4).is_empty());
        assert_eq!(single.downsample(1), single);
        // 2 of 4 cells on -> on
        let half = Mask::rect(4, 4, 0, 0, 1, 2);
        assert_eq!(half.downsample(2).tokens(), vec![0]);
    }

    #[test]
    fn scale_about_center_doubles_a_centered_square() {
        let m = Mask::rect(8, 8, 3, 3, 5, 5);
        let anchor = m.bbox_center().unwrap();
        assert_eq!(anchor, (4.0, 4.0));
        assert_eq!(m.scale_about(anchor, 2.0), Mask::rect(8, 8, 2, 2, 6, 6));
        assert_eq!(m.scale_about(anchor, 1.0), m);
    }

    #[test]
    fn png_round_trip() {
        let m = Mask::from_fn(5, 7, |y, x| (y * 3 + x) % 4 == 0);
        assert_eq!(Mask::from_base64_png(&m.to_base64_png().unwrap()).unwrap(), m);
        assert_eq!(m.to_raster().iter().filter(|v| **v == 255).count(), m.count());
    }

    #[test]
    fn translation_pairs_are_integer_at_full_resolution() {
        let gud = Mask::rect(8, 8, 1, 1, 3, 3);
        let gen = gud.translate(3, 0).unwrap();
        let map = PairingMap::Translation { dy: 3.0, dx: 0.0 };
        let pairs = map.layer_pairs(&gen, 1);
        assert_eq!(pairs.len(), 4);
        let mut gud_cells: Vec<_> = pairs
            .iter()
            .map(|p| (p.gud_cell.0 as usize, p.gud_cell.1 as usize))
            .collect();
        gud_cells.sort();
        assert_eq!(gud_cells, gud.cells().collect::<Vec<_>>());
        assert!(pairs.iter().all(|p| p.gud_cell.0.fract() == 0.0));
    }

    #[test]
    fn coarse_translation_pairs_are_fractional() {
        let gen = Mask::rect(8, 8, 2, 2, 6, 6);
        let map = PairingMap::Translation { dy: 1.0, dx: 0.0 };
        let pairs = map.layer_pairs(&gen, 2);
        assert_eq!(pairs.len(), 4);
        // layer cell (1,1) centered at pixel (3,3) pairs with pixel (2,3) -> cell (0.5, 1.0)
        let p = pairs.iter().find(|p| p.gen_token == 5).unwrap();
        assert_eq!(p.gud_cell, (0.5, 1.0));
    }
}
