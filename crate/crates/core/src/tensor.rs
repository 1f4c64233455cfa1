use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceTag {
    Image,
    Latent,
}

/// A `[channels × height × width]` tensor in image or latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub data: Array3<f64>,
    pub space: SpaceTag,
}

impl Latent {
    pub fn new(data: Array3<f64>) -> Self {
        Latent {
            data,
            space: SpaceTag::Latent,
        }
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Latent::new(Array3::zeros(shape))
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn dot(&self, other: &Latent) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    /// `self + s * other`
    pub fn axpy(&self, s: f64, other: &Latent) -> Latent {
        Latent {
            data: &self.data + &(&other.data * s),
            space: self.space,
        }
    }

    pub fn check_shape(&self, expected: (usize, usize, usize), field: &str) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::contract(
                field,
                format!("shape {:?} does not match {:?}", self.shape(), expected),
            ));
        }
        Ok(())
    }

    /// Token-major view: `[h*w × c]`.
    pub fn to_tokens(&self) -> Array2<f64> {
        chw_to_tokens(&self.data)
    }

    pub fn from_tokens(tokens: &Array2<f64>, h: usize, w: usize) -> Latent {
        Latent::new(tokens_to_chw(tokens, h, w))
    }
}

pub fn chw_to_tokens(data: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = data.dim();
    Array2::from_shape_fn((h * w, c), |(p, ch)| data[[ch, p / w, p % w]])
}

pub fn tokens_to_chw(tokens: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = tokens.ncols();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| tokens[[y * w + x, ch]])
}

/// A decoder feature map, token-major `[h*w × c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn at(&self, y: usize, x: usize) -> ndarray::ArrayView1<'_, f64> {
        self.data.row(y * self.width + x)
    }

    /// Bilinear sample at fractional cell coordinates (cell centers are
    /// integers). Points outside the grid's extent read as zero; inside it,
    /// neighbors are clamped to the edge.
    pub fn sample(&self, y: f64, x: f64) -> ndarray::Array1<f64> {
        let mut out = ndarray::Array1::zeros(self.channels());
        let (h, w) = (self.height as f64, self.width as f64);
        if y + 0.5 < 0.0 || x + 0.5 < 0.0 || y + 0.5 >= h || x + 0.5 >= w {
            return out;
        }
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let weight = wy * wx;
                if weight == 0.0 {
                    continue;
                }
                let yy = clamp(y0 + dy, self.height);
                let xx = clamp(x0 + dx, self.width);
                out.scaled_add(weight, &self.at(yy, xx));
            }
        }
        out
    }

    /// Resizes the map by `gamma` about `anchor` (continuous cell units,
    /// cell `q` spans `[q, q+1)`) and keeps the original grid. Cells whose
    /// source lies outside the grid are zero.
    pub fn scale_about(&self, anchor: (f64, f64), gamma: f64) -> FeatureMap {
        let mut data = Array2::zeros(self.data.dim());
        for y in 0..self.height {
            for x in 0..self.width {
                let sy = anchor.0 + (y as f64 + 0.5 - anchor.0) / gamma - 0.5;
                let sx = anchor.1 + (x as f64 + 0.5 - anchor.1) / gamma - 0.5;
                data.row_mut(y * self.width + x).assign(&self.sample(sy, sx));
            }
        }
        FeatureMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn scaled(&self, s: f64) -> FeatureMap {
        FeatureMap {
            height: self.height,
            width: self.width,
            data: &self.data * s,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn token_layout_round_trips() {
        let data = Array3::from_shape_fn((3, 2, 4), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let tokens = chw_to_tokens(&data);
        assert_eq!(tokens[[5, 2]], 211.0);
        assert_eq!(tokens_to_chw(&tokens, 2, 4), data);
    }

    #[test]
    fn bilinear_sample_is_exact_on_cells_and_zero_outside() {
        let fm = FeatureMap {
            height: 2,
            width: 2,
            data: array![[1.0], [2.0], [3.0], [4.0]],
        };
        assert_eq!(fm.sample(1.0, 0.0)[0], 3.0);
        assert_eq!(fm.sample(0.5, 0.5)[0], 2.5);
        assert_eq!(fm.sample(-1.0, 0.0)[0], 0.0);
        assert_eq!(fm.sample(0.0, 1.5)[0], 0.0);
        // inside the extent but past the last center: clamped
        assert_eq!(fm.sample(0.0, 1.25)[0], 2.0);
    }

    #[test]
    fn shrinking_pads_the_vacant_border_with_zeros() {
        let fm = FeatureMap {
            height: 8,
            width: 8,
            data: Array2::ones((64, 3)),
        };
        let out = fm.scale_about((4.0, 4.0), 0.5);
        for y in 0..8 {
            for x in 0..8 {
                let inside = (2..6).contains(&y) && (2..6).contains(&x);
                let expected = if inside { 1.0 } else { 0.0 };
                assert!(out.at(y, x).iter().all(|v| *v == expected), "({y},{x})");
            }
        }
    }
}
