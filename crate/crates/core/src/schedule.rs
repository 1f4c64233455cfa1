//! Noise schedules and the deterministic DDIM step grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// β linear in `[beta_start, beta_end]`.
    Linear,
    /// √β linear, as used by latent diffusion checkpoints.
    ScaledLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Number of training timesteps.
    pub train_steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            kind: ScheduleKind::ScaledLinear,
            beta_start: 0.00085,
            beta_end: 0.012,
            train_steps: 1000,
        }
    }
}

impl ScheduleSpec {
    pub fn betas(&self) -> Vec<f64> {
        let n = self.train_steps;
        let lerp = |a: f64, b: f64, i: usize| {
            if n == 1 {
                a
            } else {
                a + (b - a) * i as f64 / (n - 1) as f64
            }
        };
        (0..n)
            .map(|i| match self.kind {
                ScheduleKind::Linear => lerp(self.beta_start, self.beta_end, i),
                ScheduleKind::ScaledLinear => {
                    lerp(self.beta_start.sqrt(), self.beta_end.sqrt(), i).powi(2)
                }
            })
            .collect()
    }
}

/// ᾱ over a `steps`-long sampling grid. Step `t` maps to training timestep
/// `round(t * train_steps / steps)`; step 0 is noise-free (ᾱ = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    timesteps: Vec<usize>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(spec: &ScheduleSpec, steps: usize) -> Result<Self> {
        if steps == 0 || steps > spec.train_steps {
            return Err(Error::contract(
                "steps",
                format!("must be in 1..={}, got {steps}", spec.train_steps),
            ));
        }
        let betas = spec.betas();
        let mut cumulative = Vec::with_capacity(spec.train_steps + 1);
        cumulative.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            cumulative.push(acc);
        }
        let timesteps: Vec<usize> = (0..=steps)
            .map(|t| ((t * spec.train_steps) as f64 / steps as f64).round() as usize)
            .collect();
        let alpha_bar = timesteps.iter().map(|&tau| cumulative[tau]).collect();
        Ok(NoiseSchedule {
            steps,
            timesteps,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// ᾱ at sampling step `t` (0 ≤ t ≤ steps).
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::contract("t", format!("step {t} outside 0..={}", self.steps))
        })
    }

    /// Training timestep fed to the denoiser at sampling step `t`.
    pub fn timestep(&self, t: usize) -> Result<usize> {
        self.timesteps.get(t).copied().ok_or_else(|| {
            Error::contract("t", format!("step {t} outside 0..={}", self.steps))
        })
    }

    /// Overrides ᾱ values directly. Test rigs use this to build degenerate
    /// schedules.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Self {
        let steps = alpha_bar.len() - 1;
        NoiseSchedule {
            steps,
            timesteps: (0..=steps).collect(),
            alpha_bar,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_zero_is_noise_free_and_grid_is_monotone() {
        let s = NoiseSchedule::new(&ScheduleSpec::default(), 50).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        for t in 0..50 {
            assert!(s.alpha_bar(t + 1).unwrap() < s.alpha_bar(t).unwrap());
        }
        assert_eq!(s.timestep(50).unwrap(), 1000);
        assert_eq!(s.timestep(1).unwrap(), 20);
    }

    #[test]
    fn out_of_range_step_is_rejected() {
        let s = NoiseSchedule::new(&ScheduleSpec::default(), 10).unwrap();
        assert!(s.alpha_bar(11).is_err());
        assert!(NoiseSchedule::new(&ScheduleSpec::default(), 0).is_err());
    }

    #[test]
    fn linear_schedule_matches_direct_product() {
        // Oracle values: prod_{i=1..t}(1 - beta_i), beta_i = 1e-4 + (0.02 - 1e-4)(i-1)/9,
        // evaluated term by term in a scratch script.
        let spec = ScheduleSpec {
            kind: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
            train_steps: 10,
        };
        let s = NoiseSchedule::new(&spec, 10).unwrap();
        let expected = [
            1.0,
            0.9999,
            0.99758912,
            0.9930778003128888,
            0.9863910764574487,
            0.9775683562735794,
            0.9666630381658163,
            0.9537419755556665,
            0.9388847950031216,
            0.9221830777053439,
            0.903739416151237,
        ];
        for (t, e) in expected.iter().enumerate() {
            let got = s.alpha_bar(t).unwrap();
            assert!((got - e).abs() < 1e-12, "t={t}: {got} vs {e}");
        }
    }
}
