//! Per-beam physical-layer statistics and the measurement degradation model.
//!
//! SNR follows the monostatic radar link budget of a UPA transmitter and
//! receiver, range-error variance is the CRB inflated by `alpha`, and the
//! detection probability is the Marcum-Q tail for a Neyman-Pearson
//! threshold `lambda = -ln P_FA`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DistanceMatrix;
use crate::grid::{ensure_same_shape, Grid};
use crate::rng::{self, Domain};
use crate::special::marcum_q1;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Small-scale fading applied to the link budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Fading {
    /// `|h|² = 1` on every beam.
    #[default]
    None,
    /// `|h|² ~ Exp(1)`, drawn per cell from the given seed.
    Rayleigh { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensingConfig {
    pub n_t: usize,
    pub n_r: usize,
    /// Transmit power in watts.
    pub p_s: f64,
    /// Noise power in watts.
    pub sigma_z2: f64,
    pub bandwidth_b: f64,
    pub alpha: f64,
    pub p_fa: f64,
    pub c: f64,
    pub rho0: f64,
    pub sigma0_2: f64,
    pub fading: Fading,
}

impl Default for SensingConfig {
    fn default() -> Self {
        SensingConfig {
            n_t: 4,
            n_r: 4,
            p_s: dbm_to_watts(0.0),
            sigma_z2: dbm_to_watts(-20.0),
            bandwidth_b: 1e9,
            alpha: 1.0,
            p_fa: 1e-4,
            c: SPEED_OF_LIGHT,
            rho0: 0.05,
            sigma0_2: 1.0,
            fading: Fading::None,
        }
    }
}

impl SensingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("p_s", self.p_s),
            ("sigma_z2", self.sigma_z2),
            ("bandwidth_b", self.bandwidth_b),
            ("c", self.c),
            ("sigma0_2", self.sigma0_2),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_t == 0 || self.n_r == 0 {
            return Err(Error::Config("antenna counts must be positive".into()));
        }
        if !(1.0..=2.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [1, 2], got {}",
                self.alpha
            )));
        }
        if !(self.p_fa > 0.0 && self.p_fa < 1.0) {
            return Err(Error::Config("p_fa must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.rho0) {
            return Err(Error::Config("rho0 must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn with_power_dbm(&self, dbm: f64) -> Self {
        SensingConfig {
            p_s: dbm_to_watts(dbm),
            ..self.clone()
        }
    }

    pub fn threshold(&self) -> Result<f64> {
        detection_threshold(self.p_fa)
    }
}

/// Per-beam SNR, range-error variance and detection probability.
#[derive(Clone, Debug, PartialEq)]
pub struct StatMaps {
    pub snr: Grid<f64>,
    pub var: Grid<f64>,
    pub det_prob: Grid<f64>,
}

impl StatMaps {
    /// All three maps for a ground-truth matrix under `cfg`.
    pub fn compute(gt: &DistanceMatrix, rcs: &Grid<f64>, cfg: &SensingConfig) -> Result<Self> {
        let snr = snr_map(gt, rcs, cfg)?;
        let var = crb_var_map(&snr, gt.valid(), cfg)?;
        let det_prob = detection_prob_map(&snr, cfg)?;
        Ok(StatMaps { snr, var, det_prob })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.snr.shape()
    }

    pub fn mean_det_prob(&self) -> f64 {
        self.det_prob.mean()
    }

    pub fn mean_var(&self) -> f64 {
        self.var.mean()
    }
}

/// `N_t² N_r² rcs² P_s / (4 d² sigma_z²)` per valid cell, 0 elsewhere.
pub fn snr_map(gt: &DistanceMatrix, rcs: &Grid<f64>, cfg: &SensingConfig) -> Result<Grid<f64>> {
    ensure_same_shape(gt.shape(), rcs.shape())?;
    let gain = (cfg.n_t * cfg.n_t * cfg.n_r * cfg.n_r) as f64;
    let mut out = Grid::filled(gt.w(), gt.h(), 0.0);
    for i in 0..gt.w() {
        for j in 0..gt.h() {
            let Some(d) = gt.get(i, j) else { continue };
            if d == 0.0 {
                return Err(Error::SingularGeometry { i, j });
            }
            let rho = *rcs.get(i, j);
            let mut g = gain * rho * rho * cfg.p_s / (4.0 * d * d * cfg.sigma_z2);
            if let Fading::Rayleigh { seed } = cfg.fading {
                let mut r = rng::stream(seed, Domain::Fading, gt.values().index(i, j) as u64);
                g *= -(1.0 - rng::uniform(&mut r)).ln();
            }
            out.set(i, j, g);
        }
    }
    Ok(out)
}

/// `alpha c² / (8 pi² snr B²)` on valid cells, 0 on invalid ones.
pub fn crb_var_map(snr: &Grid<f64>, valid: &Grid<bool>, cfg: &SensingConfig) -> Result<Grid<f64>> {
    ensure_same_shape(snr.shape(), valid.shape())?;
    let k = cfg.alpha * cfg.c * cfg.c / (8.0 * PI * PI * cfg.bandwidth_b * cfg.bandwidth_b);
    let mut out = Grid::filled(snr.w(), snr.h(), 0.0);
    for i in 0..snr.w() {
        for j in 0..snr.h() {
            if !*valid.get(i, j) {
                continue;
            }
            let g = *snr.get(i, j);
            if !(g > 0.0) {
                return Err(Error::InfiniteVariance { i, j });
            }
            out.set(i, j, k / g);
        }
    }
    Ok(out)
}

/// Neyman-Pearson threshold for single noncoherent detection.
pub fn detection_threshold(p_fa: f64) -> Result<f64> {
    if !(p_fa > 0.0 && p_fa < 1.0) {
        return Err(Error::InvalidInput(format!(
            "false-alarm probability must lie in (0, 1), got {p_fa}"
        )));
    }
    Ok(-p_fa.ln())
}

/// Detection probability for one beam at SNR `snr`.
pub fn detection_probability(snr: f64, lambda: f64) -> Result<f64> {
    if snr == 0.0 {
        // Q1(0, sqrt(2 lambda)) = exp(-lambda) = P_FA
        return Ok((-lambda).exp());
    }
    marcum_q1((2.0 * snr).sqrt(), (2.0 * lambda).sqrt())
}

pub fn detection_prob_map(snr: &Grid<f64>, cfg: &SensingConfig) -> Result<Grid<f64>> {
    let lambda = cfg.threshold()?;
    let mut out = Vec::with_capacity(snr.len());
    for &g in snr.as_slice() {
        if !(g >= 0.0) {
            return Err(Error::InvalidInput(format!("negative snr {g}")));
        }
        out.push(detection_probability(g, lambda)?);
    }
    Grid::from_vec(snr.w(), snr.h(), out)
}

/// Output of [`degrade`]: the measured matrix and cells whose noisy range
/// went negative and were clamped to 0 and invalidated.
#[derive(Clone, Debug, PartialEq)]
pub struct Degraded {
    pub dm: DistanceMatrix,
    pub clamped: Vec<(usize, usize)>,
}

/// `(gt + eps) ⊙ M` with `eps ~ N(0, var)` and `M ~ Bernoulli(det_prob)`,
/// independent per cell. Cell `k` always consumes one uniform then one
/// normal from stream `k`, so two calls with one seed share their draws:
/// raising the detection probability only adds cells, and scaling the
/// variance scales the same noise realization.
pub fn degrade(gt: &DistanceMatrix, maps: &StatMaps, seed: u64) -> Result<Degraded> {
    ensure_same_shape(gt.shape(), maps.shape())?;
    let (w, h) = gt.shape();
    let mut values = Grid::filled(w, h, 0.0);
    let mut valid = Grid::filled(w, h, false);
    let mut clamped = Vec::new();
    for i in 0..w {
        for j in 0..h {
            let k = values.index(i, j);
            let mut r = rng::stream(seed, Domain::Degrade, k as u64);
            let u = rng::uniform(&mut r);
            let z = rng::normal(&mut r);
            let Some(d) = gt.get(i, j) else { continue };
            if u >= *maps.det_prob.get(i, j) {
                continue;
            }
            let noisy = d + maps.var.get(i, j).sqrt() * z;
            if noisy < 0.0 {
                clamped.push((i, j));
                continue;
            }
            values.set(i, j, noisy);
            valid.set(i, j, true);
        }
    }
    Ok(Degraded {
        dm: DistanceMatrix::new(values, valid)?,
        clamped,
    })
}

/// Scene filter: mean detection probability at least `rho0` and mean
/// variance at most `sigma0_2`, both inclusive.
pub fn scene_admissible(maps: &StatMaps, cfg: &SensingConfig) -> bool {
    maps.mean_det_prob() >= cfg.rho0 && maps.mean_var() <= cfg.sigma0_2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_unit() -> SensingConfig {
        SensingConfig {
            n_t: 4,
            n_r: 4,
            p_s: 1.0,
            sigma_z2: 0.01,
            ..Default::default()
        }
    }

    fn single(d: f64) -> DistanceMatrix {
        DistanceMatrix::full(Grid::filled(1, 1, d)).unwrap()
    }

    #[test]
    fn snr_hand_value_and_inverse_square() {
        let rcs = Grid::filled(1, 1, 1.0);
        let g = snr_map(&single(10.0), &rcs, &cfg_unit()).unwrap();
        // 256 / (4 * 100 * 0.01)
        assert!((g.as_slice()[0] - 64.0).abs() < 1e-9);
        let g2 = snr_map(&single(20.0), &rcs, &cfg_unit()).unwrap();
        assert!((g2.as_slice()[0] - 16.0).abs() < 1e-9);
        let g0 = snr_map(&single(10.0), &Grid::filled(1, 1, 0.0), &cfg_unit()).unwrap();
        assert_eq!(g0.as_slice()[0], 0.0);
    }

    #[test]
    fn snr_zero_distance_is_singular() {
        let rcs = Grid::filled(1, 1, 1.0);
        assert!(matches!(
            snr_map(&single(0.0), &rcs, &cfg_unit()),
            Err(Error::SingularGeometry { i: 0, j: 0 })
        ));
    }

    #[test]
    fn invalid_cells_have_zero_snr() {
        let dm = DistanceMatrix::invalid(2, 2);
        let g = snr_map(&dm, &Grid::filled(2, 2, 1.0), &cfg_unit()).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn crb_hand_value() {
        let cfg = SensingConfig {
            c: 3e8,
            bandwidth_b: 1e9,
            alpha: 1.0,
            ..Default::default()
        };
        let valid = Grid::filled(1, 1, true);
        let v = crb_var_map(&Grid::filled(1, 1, 1.0), &valid, &cfg).unwrap();
        let want = 9e16 / (8.0 * PI * PI * 1e18);
        assert!((v.as_slice()[0] - want).abs() < 1e-15);
        assert!((v.as_slice()[0] - 1.1398e-3).abs() < 1e-7);

        let v4 = crb_var_map(&Grid::filled(1, 1, 4.0), &valid, &cfg).unwrap();
        assert!((v4.as_slice()[0] * 4.0 - v.as_slice()[0]).abs() < 1e-18);

        let cfg2 = SensingConfig { alpha: 2.0, ..cfg };
        let v2 = crb_var_map(&Grid::filled(1, 1, 1.0), &valid, &cfg2).unwrap();
        assert_eq!(v2.as_slice()[0], 2.0 * v.as_slice()[0]);
    }

    #[test]
    fn crb_zero_snr_on_valid_cell_errors() {
        let valid = Grid::filled(1, 1, true);
        assert!(matches!(
            crb_var_map(&Grid::filled(1, 1, 0.0), &valid, &cfg_unit()),
            Err(Error::InfiniteVariance { .. })
        ));
        let masked = Grid::filled(1, 1, false);
        assert_eq!(
            crb_var_map(&Grid::filled(1, 1, 0.0), &masked, &cfg_unit())
                .unwrap()
                .as_slice()[0],
            0.0
        );
    }

    #[test]
    fn threshold_values() {
        assert!((detection_threshold((-1.0f64).exp()).unwrap() - 1.0).abs() < 1e-15);
        assert!((detection_threshold(0.01).unwrap() - 4.605_17).abs() < 1e-5);
        assert!((detection_threshold(1e-3).unwrap() - 6.907_76).abs() < 1e-5);
        assert!(detection_threshold(0.0).is_err());
        assert!(detection_threshold(1.0).is_err());
    }

    #[test]
    fn detection_anchor_and_equal_argument_identity() {
        let cfg = SensingConfig {
            p_fa: 1e-3,
            ..Default::default()
        };
        let lambda = cfg.threshold().unwrap();
        let snr = Grid::from_vec(3, 1, vec![0.0, lambda, 640.0]).unwrap();
        let p = detection_prob_map(&snr, &cfg).unwrap();
        assert!((p.as_slice()[0] - 1e-3).abs() < 1e-15);
        let want = 0.5 * (1.0 + crate::special::bessel_i0_scaled(2.0 * lambda));
        assert!((p.as_slice()[1] - want).abs() < 1e-10);
        assert!((1.0 - p.as_slice()[2]) < 1e-6);
    }

    #[test]
    fn var_times_snr_is_constant() {
        let cfg = cfg_unit();
        let snr = Grid::from_vec(4, 1, vec![0.5, 3.0, 77.0, 1e4]).unwrap();
        let var = crb_var_map(&snr, &Grid::filled(4, 1, true), &cfg).unwrap();
        let k: Vec<f64> = snr
            .as_slice()
            .iter()
            .zip(var.as_slice())
            .map(|(g, v)| g * v)
            .collect();
        for v in &k {
            assert!((v - k[0]).abs() < 1e-12 * k[0]);
        }
    }

    fn maps(w: usize, h: usize, var: f64, p: f64) -> StatMaps {
        StatMaps {
            snr: Grid::filled(w, h, 1.0),
            var: Grid::filled(w, h, var),
            det_prob: Grid::filled(w, h, p),
        }
    }

    #[test]
    fn degrade_identity_and_total_miss() {
        let gt = DistanceMatrix::full(Grid::from_fn(8, 8, |i, j| 5.0 + i as f64 + 0.1 * j as f64))
            .unwrap();
        let out = degrade(&gt, &maps(8, 8, 0.0, 1.0), 3).unwrap();
        assert_eq!(out.dm, gt);
        let out = degrade(&gt, &maps(8, 8, 0.0, 0.0), 3).unwrap();
        assert_eq!(out.dm.valid_count(), 0);
    }

    #[test]
    fn degrade_statistics() {
        let gt = DistanceMatrix::full(Grid::filled(100, 100, 20.0)).unwrap();
        let out = degrade(&gt, &maps(100, 100, 1e-2, 0.5), 11).unwrap();
        let frac = out.dm.valid_fraction();
        assert!((frac - 0.5).abs() <= 0.015, "retained {frac}");
        let errs: Vec<f64> = out
            .dm
            .values()
            .as_slice()
            .iter()
            .zip(out.dm.valid().as_slice())
            .filter(|(_, v)| **v)
            .map(|(d, _)| d - 20.0)
            .collect();
        let var = errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64;
        assert!((var / 1e-2 - 1.0).abs() <= 0.05, "var {var}");
    }

    #[test]
    fn degrade_clamps_negative_ranges() {
        let gt = DistanceMatrix::full(Grid::filled(20, 20, 0.01)).unwrap();
        let out = degrade(&gt, &maps(20, 20, 1.0, 1.0), 5).unwrap();
        assert!(!out.clamped.is_empty());
        for &(i, j) in &out.clamped {
            assert!(!out.dm.valid().get(i, j));
        }
        assert_eq!(out.dm.valid_count() + out.clamped.len(), 400);
    }

    #[test]
    fn degrade_masks_nest_across_detection_levels() {
        let gt = DistanceMatrix::full(Grid::filled(16, 16, 10.0)).unwrap();
        let lo = degrade(&gt, &maps(16, 16, 1e-4, 0.3), 9).unwrap();
        let hi = degrade(&gt, &maps(16, 16, 1e-4, 0.7), 9).unwrap();
        for (a, b) in lo.dm.valid().as_slice().iter().zip(hi.dm.valid().as_slice()) {
            assert!(!a | b);
        }
    }

    #[test]
    fn admissibility() {
        let cfg = SensingConfig {
            rho0: 0.4,
            sigma0_2: 0.0,
            ..Default::default()
        };
        assert!(scene_admissible(&maps(2, 2, 0.0, 1.0), &cfg));
        assert!(!scene_admissible(&maps(2, 2, 0.0, 0.2), &cfg));
        assert!(scene_admissible(&maps(2, 2, 0.0, 0.4), &cfg));
        let cfg = SensingConfig {
            sigma0_2: 1e-3,
            ..cfg
        };
        assert!(!scene_admissible(&maps(2, 2, 2e-3, 1.0), &cfg));
    }

    #[test]
    fn config_validation() {
        assert!(SensingConfig::default().validate().is_ok());
        let bad = SensingConfig {
            alpha: 2.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SensingConfig {
            p_fa: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
