use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-β DDPM schedule. Timesteps are 1-based: `beta(1) .. beta(T)`.
///
/// Kept in double precision; the cumulative product loses accuracy in f32
/// near `t = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {timesteps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect();
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> usize {
        assert!(
            t >= 1 && t <= self.betas.len(),
            "timestep {t} outside 1..={}",
            self.betas.len()
        );
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.check(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[self.check(t)]
        }
    }

    /// Evenly spaced decreasing subsequence `T - floor(i·T/steps)`, `i = 0..steps`.
    ///
    /// `steps == T` gives `T, T-1, .., 1`.
    pub fn subsequence(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.timesteps();
        if steps == 0 || steps > t {
            return Err(Error::Config(format!("inference steps {steps} not in 1..={t}")));
        }
        Ok((0..steps).map(|i| t - i * t / steps).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_of_linear_ramp() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-12);
        assert!(s.alpha_bar(1000) < 0.05);
    }

    #[test]
    fn alpha_bar_strictly_decreasing_betas_increasing() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) > s.beta(t - 1));
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.5).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn subsequences() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let full = s.subsequence(1000).unwrap();
        assert_eq!(full, (1..=1000).rev().collect::<Vec<_>>());
        let hundred = s.subsequence(100).unwrap();
        assert_eq!(hundred.len(), 100);
        assert_eq!(hundred[0], 1000);
        assert_eq!(hundred[99], 10);
        assert!(hundred.windows(2).all(|w| w[0] > w[1]));
        assert!(s.subsequence(0).is_err() && s.subsequence(1001).is_err());
    }
}
