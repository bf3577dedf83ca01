use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step-size controller settings for the adaptive integrator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub safety: f64,
    pub min_shrink: f64,
    pub max_grow: f64,
    /// Cap on step attempts (accepted + rejected).
    pub max_steps: usize,
    /// Reuse the last stage of an accepted step as the next first stage.
    pub fsal: bool,
}

pub const DEFAULT_TOL: f64 = 1e-3;

impl SolverConfig {
    /// Defaults scaled to the horizon `[t0, t1]`.
    pub fn for_horizon(t0: f64, t1: f64) -> Self {
        Self::with_tolerance(t0, t1, DEFAULT_TOL, DEFAULT_TOL)
    }

    pub fn with_tolerance(t0: f64, t1: f64, rtol: f64, atol: f64) -> Self {
        let span = (t1 - t0).abs();
        Self {
            rtol,
            atol,
            h_init: span / 100.0,
            h_min: 1e-8 * span,
            h_max: span,
            safety: 0.9,
            min_shrink: 0.2,
            max_grow: 10.0,
            max_steps: 10_000,
            fsal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.h_min > 0.0
            && self.h_min <= self.h_init
            && self.h_init <= self.h_max
            && self.safety > 0.0
            && self.safety < 1.0
            && self.min_shrink < 1.0
            && self.min_shrink > 0.0
            && self.max_grow > 1.0
            && self.rtol > 0.0
            && self.atol > 0.0
            && self.max_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid solver config {self:?}")))
        }
    }
}

/// Accept/reject decision and next step size for a scaled error norm.
///
/// `scaled_err` is the RMS of `err_i / (atol + rtol * max(|y_i|, |y5_i|))`;
/// the step is accepted when it is at most one.
pub fn step_size_update(h: f64, scaled_err: f64, cfg: &SolverConfig) -> (bool, f64) {
    let accept = scaled_err <= 1.0;
    let factor = if scaled_err == 0.0 {
        cfg.max_grow
    } else {
        (cfg.safety * scaled_err.powf(-0.2)).clamp(cfg.min_shrink, cfg.max_grow)
    };
    (accept, (h * factor).clamp(cfg.h_min, cfg.h_max))
}

/// Scaled RMS error norm over all components (batch included).
pub fn scaled_error_norm(err: &[f64], y: &[f64], y_new: &[f64], cfg: &SolverConfig) -> f64 {
    let n = err.len().max(1) as f64;
    let sq: f64 = err
        .iter()
        .zip(y.iter().zip(y_new))
        .map(|(e, (a, b))| {
            let sc = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            (e / sc) * (e / sc)
        })
        .sum();
    (sq / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SolverConfig {
        let mut c = SolverConfig::for_horizon(0.0, 1000.0);
        c.h_min = 1e-12;
        c
    }

    #[test]
    fn zero_error_grows_by_max_factor() {
        let (acc, h) = step_size_update(0.1, 0.0, &cfg());
        assert!(acc);
        assert!((h - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unit_error_accepts_with_safety_factor() {
        let (acc, h) = step_size_update(0.1, 1.0, &cfg());
        assert!(acc);
        assert!((h - 0.09).abs() < 1e-15);
    }

    #[test]
    fn error_of_32_rejects_and_halves_times_safety() {
        // 32^(-1/5) = 1/2
        let (acc, h) = step_size_update(0.1, 32.0, &cfg());
        assert!(!acc);
        assert!((h - 0.1 * 0.9 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn shrink_and_bounds_are_clamped() {
        let c = cfg();
        let (_, h) = step_size_update(0.1, 1e12, &c);
        assert!((h - 0.1 * c.min_shrink).abs() < 1e-15);
        let (_, h) = step_size_update(c.h_max, 0.0, &c);
        assert_eq!(h, c.h_max);
        let (_, h) = step_size_update(c.h_min, 1e12, &c);
        assert_eq!(h, c.h_min);
    }

    #[test]
    fn defaults_are_valid_and_scale_with_horizon() {
        for t1 in [1.0, 5.0, 100.0] {
            let c = SolverConfig::for_horizon(0.0, t1);
            c.validate().unwrap();
            assert_eq!(c.h_init, t1 / 100.0);
            assert_eq!(c.h_max, t1);
        }
        let mut bad = SolverConfig::for_horizon(0.0, 1.0);
        bad.safety = 1.5;
        assert!(bad.validate().is_err());
    }
}
