//! Noise and sparsity schedules, the CRB-anisotropic forward corruption,
//! the probabilistic sampling mask, and the conditional reverse sampler.
//!
//! Everything here works in normalized distance units `d / d_max`. The
//! forward covariance is `sigma_t * nvar` exactly as written, so `sigma_t`
//! is a variance, not a standard deviation.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DistanceMatrix;
use crate::grid::{ensure_same_shape, Grid};
use crate::rng::{self, Domain};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Geometric,
    Linear,
}

/// Serialized form of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho_min: f64,
    pub spacing: Spacing,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t: 50,
            sigma_min: 1e-4,
            sigma_max: 1.0,
            rho_min: 0.05,
            spacing: Spacing::Geometric,
        }
    }
}

/// Noise levels `sigma_1 < ... < sigma_T` and sampling ratios
/// `1 = rho_1 >= ... >= rho_T`, indexed by `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    sigmas: Vec<f64>,
    rhos: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(sigmas: Vec<f64>, rhos: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() || sigmas.len() != rhos.len() {
            return Err(Error::Config(
                "schedule needs equally many (>= 1) sigmas and rhos".into(),
            ));
        }
        if !(sigmas[0] > 0.0) || sigmas.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("sigmas must be positive and strictly increasing".into()));
        }
        if rhos[0] != 1.0
            || rhos.iter().any(|r| !(0.0..=1.0).contains(r))
            || rhos.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::Config(
                "rhos must start at 1, stay in [0, 1] and be nonincreasing".into(),
            ));
        }
        Ok(DiffusionSchedule { sigmas, rhos })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.t;
        if t == 0 {
            return Err(Error::Config("schedule needs T >= 1".into()));
        }
        if !(cfg.sigma_min > 0.0 && cfg.sigma_max >= cfg.sigma_min) {
            return Err(Error::Config("need 0 < sigma_min <= sigma_max".into()));
        }
        if !(0.0..=1.0).contains(&cfg.rho_min) {
            return Err(Error::Config("rho_min must lie in [0, 1]".into()));
        }
        let frac = |k: usize| if t == 1 { 0.0 } else { k as f64 / (t - 1) as f64 };
        let sigmas = (0..t)
            .map(|k| match cfg.spacing {
                Spacing::Geometric => cfg.sigma_min * (cfg.sigma_max / cfg.sigma_min).powf(frac(k)),
                Spacing::Linear => cfg.sigma_min + (cfg.sigma_max - cfg.sigma_min) * frac(k),
            })
            .collect();
        let rhos = (0..t).map(|k| 1.0 - (1.0 - cfg.rho_min) * frac(k)).collect();
        Self::new(sigmas, rhos)
    }

    #[allow(non_snake_case)]
    pub fn T(&self) -> usize {
        self.sigmas.len()
    }

    /// `sigma_t` for `t` in `0..=T`, with `sigma_0 = 0`.
    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.sigmas[t - 1]
        }
    }

    pub fn rho(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.rhos[t - 1]
        }
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn rhos(&self) -> &[f64] {
        &self.rhos
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.T() {
            return Err(Error::InvalidInput(format!(
                "step {t} outside 1..={}",
                self.T()
            )));
        }
        Ok(())
    }

    /// Largest `t` whose expected retention `rho_t * mean_psi` is at least
    /// `observed_fraction`.
    pub fn matching_step(&self, mean_psi: f64, observed_fraction: f64) -> usize {
        (1..=self.T())
            .rev()
            .find(|&t| self.rho(t) * mean_psi >= observed_fraction)
            .unwrap_or(1)
    }
}

/// Variance map rescaled so its entries sum to `W * H`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedVarianceMap(Grid<f64>);

impl NormalizedVarianceMap {
    pub fn values(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn uniform(w: usize, h: usize) -> Self {
        NormalizedVarianceMap(Grid::filled(w, h, 1.0))
    }
}

pub fn normalize_variance(var: &Grid<f64>) -> Result<NormalizedVarianceMap> {
    if var.is_empty() {
        return Err(Error::InvalidInput("empty variance grid".into()));
    }
    if let Some(v) = var.as_slice().iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "variance entries must be positive and finite, found {v}"
        )));
    }
    let scale = var.len() as f64 / var.sum();
    Ok(NormalizedVarianceMap(var.map(|v| v * scale)))
}

/// Replace entries of cells outside `valid` by the mean over valid cells,
/// so a masked CRB map can be trace-normalized.
pub fn fill_invalid_variance(var: &Grid<f64>, valid: &Grid<bool>) -> Result<Grid<f64>> {
    ensure_same_shape(var.shape(), valid.shape())?;
    let (sum, n) = var
        .as_slice()
        .iter()
        .zip(valid.as_slice())
        .filter(|(_, m)| **m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        return Err(Error::Degenerate("no valid cell to take a variance from".into()));
    }
    let mean = sum / n as f64;
    var.zip_map(valid, |v, m| if *m { *v } else { mean })
}

/// `Omega_t ~ N(clean, sigma_t * nvar)`, cells independent.
pub fn forward_noise(
    clean: &Grid<f64>,
    t: usize,
    sched: &DiffusionSchedule,
    nvar: &NormalizedVarianceMap,
    seed: u64,
) -> Result<Grid<f64>> {
    sched.check_step(t)?;
    add_anisotropic_noise(clean, sched.sigma(t), nvar, rng::mix(&[seed, t as u64]), Domain::ForwardNoise)
}

fn add_anisotropic_noise(
    base: &Grid<f64>,
    level: f64,
    nvar: &NormalizedVarianceMap,
    seed: u64,
    domain: Domain,
) -> Result<Grid<f64>> {
    ensure_same_shape(base.shape(), nvar.shape())?;
    let mut out = base.clone();
    for (k, (o, v)) in out
        .as_mut_slice()
        .iter_mut()
        .zip(nvar.values().as_slice())
        .enumerate()
    {
        let mut r = rng::stream(seed, domain, k as u64);
        *o += (level * v).sqrt() * rng::normal(&mut r);
    }
    Ok(out)
}

/// `M_t(i, j) = [rho_t * psi(i, j) > mu]` with `mu ~ U(0, 1)` per cell.
pub fn forward_mask(psi: &Grid<f64>, t: usize, sched: &DiffusionSchedule, seed: u64) -> Result<Grid<bool>> {
    sched.check_step(t)?;
    Ok(bernoulli_mask(psi, sched.rho(t), rng::mix(&[seed, t as u64]), Domain::ForwardMask))
}

pub(crate) fn bernoulli_mask(psi: &Grid<f64>, rho: f64, seed: u64, domain: Domain) -> Grid<bool> {
    let mut k = 0u64;
    psi.map(|p| {
        let mut r = rng::stream(seed, domain, k);
        k += 1;
        rho * p > rng::uniform(&mut r)
    })
}

/// `M_t ⊙ Omega_t`: the noisy state with masked cells invalidated.
pub fn forward_degrade_step(
    clean: &Grid<f64>,
    t: usize,
    sched: &DiffusionSchedule,
    nvar: &NormalizedVarianceMap,
    psi: &Grid<f64>,
    seed: u64,
) -> Result<DistanceMatrix> {
    ensure_same_shape(clean.shape(), psi.shape())?;
    let noisy = forward_noise(clean, t, sched, nvar, seed)?;
    let mask = forward_mask(psi, t, sched, seed)?;
    // distance matrices hold non-negative values, so large-sigma draws
    // below zero are clamped rather than dropped
    let values = noisy.zip_map(&mask, |v, m| if *m { v.max(0.0) } else { 0.0 })?;
    DistanceMatrix::new(values, mask)
}

/// Fill every invalid cell with the value of its nearest valid cell in
/// 8-neighbour BFS order (ties go to the earliest cell in azimuth-major
/// order). Errors when nothing is valid.
pub fn nearest_fill(dm: &DistanceMatrix) -> Result<Grid<f64>> {
    let (w, h) = dm.shape();
    if dm.valid_count() == 0 {
        return Err(Error::Degenerate("cannot fill a matrix without valid cells".into()));
    }
    let mut out = dm.values().clone();
    let mut seen = dm.valid().clone();
    let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
    for i in 0..w {
        for j in 0..h {
            if *seen.get(i, j) {
                queue.push_back((i, j));
            }
        }
    }
    while let Some((i, j)) = queue.pop_front() {
        let v = *out.get(i, j);
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                if ni < 0 || nj < 0 || ni >= w as i64 || nj >= h as i64 {
                    continue;
                }
                let (ni, nj) = (ni as usize, nj as usize);
                if !*seen.get(ni, nj) {
                    seen.set(ni, nj, true);
                    out.set(ni, nj, v);
                    queue.push_back((ni, nj));
                }
            }
        }
    }
    Ok(out)
}

/// Conditioning for one reverse run. `observed` holds the measurement in
/// normalized units and `obs_var` its absolute per-cell variance in the
/// same units.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub det_prob: Grid<f64>,
    pub norm_var: NormalizedVarianceMap,
    pub observed: DistanceMatrix,
    pub obs_var: Grid<f64>,
    /// Seed for per-step thinning of the observation; `None` disables it.
    pub thin_seed: Option<u64>,
}

impl ConditioningBundle {
    pub fn new(
        det_prob: Grid<f64>,
        norm_var: NormalizedVarianceMap,
        observed: DistanceMatrix,
        obs_var: Grid<f64>,
    ) -> Result<Self> {
        let s = det_prob.shape();
        ensure_same_shape(s, norm_var.shape())?;
        ensure_same_shape(s, observed.shape())?;
        ensure_same_shape(s, obs_var.shape())?;
        if det_prob.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("detection probabilities must lie in [0, 1]".into()));
        }
        Ok(ConditioningBundle {
            det_prob,
            norm_var,
            observed,
            obs_var,
            thin_seed: None,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.det_prob.shape()
    }

    pub fn mask(&self) -> &Grid<bool> {
        self.observed.valid()
    }

    /// The observation as seen at step `t`: thinned to expected retention
    /// `rho_t` when a thinning seed is set.
    pub fn observation_at(&self, t: usize, sched: &DiffusionSchedule) -> Result<DistanceMatrix> {
        let Some(seed) = self.thin_seed else {
            return Ok(self.observed.clone());
        };
        let rho = sched.rho(t);
        if rho >= 1.0 {
            return Ok(self.observed.clone());
        }
        let keep = bernoulli_mask(
            &Grid::filled(self.observed.w(), self.observed.h(), 1.0),
            rho,
            rng::mix(&[seed, t as u64]),
            Domain::ObsThinning,
        );
        let valid = self.observed.valid().zip_map(&keep, |a, b| *a && *b)?;
        DistanceMatrix::new(self.observed.values().clone(), valid)
    }
}

/// Clean-data predictor used by the reverse sampler.
pub trait Denoiser {
    fn denoise(&self, state: &Grid<f64>, t: usize, cond: &ConditioningBundle) -> Result<Grid<f64>>;
}

impl<F> Denoiser for F
where
    F: Fn(&Grid<f64>, usize, &ConditioningBundle) -> Result<Grid<f64>>,
{
    fn denoise(&self, state: &Grid<f64>, t: usize, cond: &ConditioningBundle) -> Result<Grid<f64>> {
        self(state, t, cond)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub stochastic: bool,
    /// First reverse step; `None` starts at `T`.
    pub t_start: Option<usize>,
    /// Start at the step whose expected retention matches the observed
    /// fraction instead of `t_start`.
    pub match_sparsity: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            stochastic: false,
            t_start: None,
            match_sparsity: false,
        }
    }
}

/// Starting state: nearest-neighbour fill of the observation plus
/// `sigma_t`-level anisotropic noise.
pub fn initial_state(
    cond: &ConditioningBundle,
    t: usize,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Grid<f64>> {
    let filled = nearest_fill(&cond.observed)?;
    add_anisotropic_noise(&filled, sched.sigma(t), &cond.norm_var, seed, Domain::ReverseInit)
}

/// Run the reverse chain from `t_start` down to 1 and return the final
/// clean estimate in normalized units, valid everywhere.
pub fn reverse_sample(
    denoiser: &dyn Denoiser,
    cond: &ConditioningBundle,
    sched: &DiffusionSchedule,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<DistanceMatrix> {
    let t_start = if cfg.match_sparsity {
        sched.matching_step(cond.det_prob.mean(), cond.observed.valid_fraction())
    } else {
        cfg.t_start.unwrap_or(sched.T())
    };
    sched.check_step(t_start)?;
    let mut state = initial_state(cond, t_start, sched, seed)?;
    for t in (1..=t_start).rev() {
        let pred = denoiser.denoise(&state, t, cond)?;
        ensure_same_shape(state.shape(), pred.shape())?;
        if !pred.all_finite() {
            return Err(Error::Divergence { step: t });
        }
        let ratio = sched.sigma(t - 1) / sched.sigma(t);
        let mut next = pred.zip_map(&state, |p, s| p + ratio * (s - p))?;
        if cfg.stochastic && t > 1 {
            let (lo, hi) = (sched.sigma(t - 1), sched.sigma(t));
            let eta2 = (lo * (hi - lo)).max(0.0);
            next = add_anisotropic_noise(
                &next,
                eta2,
                &cond.norm_var,
                rng::mix(&[seed, t as u64]),
                Domain::ReverseStep,
            )?;
        }
        if !next.all_finite() {
            return Err(Error::Divergence { step: t });
        }
        state = next;
    }
    let (w, h) = state.shape();
    DistanceMatrix::new(state.map(|v| v.max(0.0)), Grid::filled(w, h, true))
}

/// Exact posterior mean `E[Omega_0 | Omega_t]` for a uniform prior over a
/// finite set of clean grids and the forward likelihood
/// `N(Omega_t; Omega_0, sigma_t * nvar)`.
pub fn analytic_posterior_denoiser(
    prior: Vec<Grid<f64>>,
    sched: DiffusionSchedule,
    nvar: NormalizedVarianceMap,
) -> Result<impl Denoiser> {
    if prior.is_empty() {
        return Err(Error::InvalidInput("prior must not be empty".into()));
    }
    for p in &prior {
        ensure_same_shape(nvar.shape(), p.shape())?;
    }
    Ok(move |state: &Grid<f64>, t: usize, _: &ConditioningBundle| {
        posterior_mean(&prior, state, sched.sigma(t), &nvar)
    })
}

pub fn posterior_mean(
    prior: &[Grid<f64>],
    state: &Grid<f64>,
    sigma: f64,
    nvar: &NormalizedVarianceMap,
) -> Result<Grid<f64>> {
    let logw: Vec<f64> = prior
        .iter()
        .map(|p| {
            -p.as_slice()
                .iter()
                .zip(state.as_slice())
                .zip(nvar.values().as_slice())
                .map(|((a, b), v)| (a - b) * (a - b) / (2.0 * sigma * v))
                .sum::<f64>()
        })
        .collect();
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut out = Grid::filled(state.w(), state.h(), 0.0);
    for (p, wt) in prior.iter().zip(&weights) {
        for (o, v) in out.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *o += wt / z * v;
        }
    }
    Ok(out)
}
