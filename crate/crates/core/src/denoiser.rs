//! Trainable clean-data predictor: input assembly, output
//! parameterization, hybrid loss, training loop and checkpoints.
//!
//! Input channel order (see [`CHANNEL_NAMES`]):
//!
//! | # | content |
//! |---|---------|
//! | 0 | `c_in * (state - fill)` |
//! | 1 | observation, centred and scaled, 0 where unobserved |
//! | 2 | observation mask |
//! | 3 | median fill of the observation, centred and scaled |
//! | 4 | detection probability `Psi` |
//! | 5 | `ln(Sigma_d) / 2` |
//! | 6 | log standard deviation of the observation noise, 0 where unobserved |
//! | 7 | `ln(sigma_t) / 4` |
//! | 8..12 | `sin`/`cos` of `ln(sigma_t)` at frequencies 1/2 and 1 |
//! | 12 | `ln(sigma_data)` of the cell, shifted by 5 |
//!
//! All grids are in normalized distance units.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::mt_default;
use crate::diffusion::{
    forward_mask, forward_noise, ConditioningBundle, Denoiser, DiffusionSchedule, NormalizedVarianceMap,
    ScheduleConfig,
};
use crate::error::{Error, Result};
use crate::geometry::DistanceMatrix;
use crate::grid::{ensure_same_shape, Grid};
use crate::nn::{FeatureExtractor, Padding, ParamEntry, Tensor, UNet, UNetCache, UNetConfig};
use crate::par;
use crate::rng::{self, Domain};

pub const INPUT_CHANNELS: usize = 13;

pub const CHANNEL_NAMES: [&str; INPUT_CHANNELS] = [
    "state",
    "observation",
    "mask",
    "fill",
    "det_prob",
    "log_norm_var",
    "log_obs_std",
    "log_sigma",
    "sin_half",
    "cos_half",
    "sin_one",
    "cos_one",
    "log_sigma_data",
];

/// What the network output is added to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualBase {
    /// `state + sqrt(s + sigma_data^2) * F` with `s` the cell's noise
    /// variance: identity on the state
    /// channel when the head is zero.
    State,
    /// `c_skip * state + (1 - c_skip) * fill + c_out * F`, with the
    /// coefficients taken at the cell's noise variance.
    #[default]
    Preconditioned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub widths: [usize; 3],
    pub groups: usize,
    pub padding: Padding,
    /// Typical clean-data error scale of the residual base.
    pub sigma_data: f64,
    /// Shrink `sigma_data` per cell from the observed 3x3 neighbours; see
    /// [`local_sigma_data`].
    pub local_sigma_data: bool,
    /// Floor of the per-cell scale.
    pub sigma_data_min: f64,
    /// Weight of the neighbour median absolute deviation in the per-cell
    /// scale.
    pub spread_gain: f64,
    /// Exponent on the unobserved-neighbour fraction in the per-cell scale.
    pub hole_exponent: f64,
    pub value_center: f64,
    pub value_scale: f64,
    pub base: ResidualBase,
    /// Inverse-variance blend of prediction and observation on observed
    /// cells.
    pub fuse_observations: bool,
    /// Precondition each cell with its own noise variance
    /// `sigma_t * nvar(i, j)` instead of the scalar `sigma_t`.
    pub per_cell_noise: bool,
    pub feature_channels: [usize; 3],
    pub feature_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            widths: [32, 64, 128],
            groups: 8,
            padding: Padding::Reflect,
            sigma_data: 0.02,
            local_sigma_data: true,
            sigma_data_min: 5e-4,
            spread_gain: 0.25,
            hole_exponent: 1.0,
            value_center: 0.35,
            value_scale: 0.1,
            base: ResidualBase::Preconditioned,
            fuse_observations: true,
            per_cell_noise: true,
            feature_channels: [8, 16, 32],
            feature_seed: 0x5eed,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0 && self.value_scale > 0.0) {
            return Err(Error::Config("sigma_data and value_scale must be positive".into()));
        }
        if !(self.sigma_data_min > 0.0 && self.sigma_data_min <= self.sigma_data && self.spread_gain >= 0.0 && self.hole_exponent > 0.0) {
            return Err(Error::Config(
                "sigma_data_min must lie in (0, sigma_data], spread_gain must be non-negative and hole_exponent positive".into(),
            ));
        }
        if self.widths.iter().chain(&self.feature_channels).any(|w| *w == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: INPUT_CHANNELS,
            widths: self.widths,
            groups: self.groups,
            padding: self.padding,
        }
    }
}

/// Architecture plus parameter layout; parameters are passed separately so
/// one model can serve many parameter sets.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub cfg: DenoiserConfig,
    net: UNet,
    entries: Vec<ParamEntry>,
    n_params: usize,
}

/// Per-cell output map `out = offset + gain * F` of one forward call.
struct OutputMap {
    offset: Vec<f64>,
    gain: Vec<f64>,
}

pub struct Prepared {
    input: Tensor,
    map: OutputMap,
}

/// Median fill of an observation, or a constant when nothing is observed.
pub fn fill_observation(obs: &DistanceMatrix, fallback: f64) -> Result<Grid<f64>> {
    if obs.valid_count() == 0 {
        return Ok(Grid::filled(obs.w(), obs.h(), fallback));
    }
    let filled = mt_default(obs)?;
    Ok(filled
        .values()
        .zip_map(filled.valid(), |v, ok| if *ok { *v } else { fallback })?)
}

/// Per-cell clean-data scale
/// `sqrt(min^2 + (max * (1 - n/m)^e)^2 + (gain * mad)^2)`, capped at `max`,
/// where `n` of the `m` in-bounds 3x3 neighbours are observed and `mad` is
/// the median absolute deviation of their values (0 with fewer than two).
/// Cells whose neighbours mostly agree get a small scale, cells inside
/// holes the full one.
fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn local_sigma_data(obs: &DistanceMatrix, cfg: &DenoiserConfig) -> Vec<f64> {
    let (w, h) = obs.shape();
    let ov = obs.values().as_slice();
    let om = obs.valid().as_slice();
    if !cfg.local_sigma_data {
        return vec![cfg.sigma_data; w * h];
    }
    let lo2 = cfg.sigma_data_min * cfg.sigma_data_min;
    let mut out = Vec::with_capacity(w * h);
    let mut vals = Vec::with_capacity(8);
    for i in 0..w {
        for j in 0..h {
            let mut m = 0usize;
            vals.clear();
            for ii in i.saturating_sub(1)..(i + 2).min(w) {
                for jj in j.saturating_sub(1)..(j + 2).min(h) {
                    if ii == i && jj == j {
                        continue;
                    }
                    m += 1;
                    let k = ii * h + jj;
                    if om[k] {
                        vals.push(ov[k]);
                    }
                }
            }
            let n = vals.len();
            let mad = if n >= 2 {
                let med = median(&mut vals);
                vals.iter_mut().for_each(|v| *v = (*v - med).abs());
                median(&mut vals)
            } else {
                0.0
            };
            let hole = cfg.sigma_data * (1.0 - n as f64 / m.max(1) as f64).powf(cfg.hole_exponent);
            let spread = cfg.spread_gain * mad;
            out.push((lo2 + hole * hole + spread * spread).sqrt().min(cfg.sigma_data));
        }
    }
    out
}

impl DenoiserModel {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let (net, store) = UNet::new(cfg.unet())?;
        Ok(DenoiserModel {
            cfg,
            net,
            n_params: store.len(),
            entries: store.entries,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        self.net.init(&mut p, seed);
        p
    }

    /// Randomize the output head too (for tests that need a live output).
    pub fn randomize_head(&self, params: &mut [f64], seed: u64) {
        self.net.init_head(params, seed);
    }

    pub fn feature_extractor(&self) -> FeatureExtractor {
        FeatureExtractor::new(self.cfg.feature_seed, self.cfg.feature_channels, self.cfg.padding)
    }

    /// Assemble the channel stack and the output map for one call.
    #[allow(clippy::too_many_arguments)]
    pub fn prepare(
        &self,
        state: &Grid<f64>,
        sigma: f64,
        obs: &DistanceMatrix,
        obs_var: &Grid<f64>,
        det_prob: &Grid<f64>,
        norm_var: &NormalizedVarianceMap,
    ) -> Result<Prepared> {
        let shape = state.shape();
        ensure_same_shape(shape, obs.shape())?;
        ensure_same_shape(shape, obs_var.shape())?;
        ensure_same_shape(shape, det_prob.shape())?;
        ensure_same_shape(shape, norm_var.shape())?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("noise level must be positive, got {sigma}")));
        }
        let c = &self.cfg;
        let sd = local_sigma_data(obs, c);
        let fill = fill_observation(obs, c.value_center)?;
        let (w, h) = shape;
        let p = w * h;
        let mut x = Tensor::zeros(INPUT_CHANNELS, w, h);
        let u = sigma.ln();
        let consts = [u / 4.0, (0.5 * u).sin(), (0.5 * u).cos(), u.sin(), u.cos()];
        let mut offset = vec![0.0; p];
        let mut gain = vec![0.0; p];
        let sv = state.as_slice();
        let fv = fill.as_slice();
        let ov = obs.values().as_slice();
        let om = obs.valid().as_slice();
        let nv = norm_var.values().as_slice();
        for k in 0..p {
            let s = if c.per_cell_noise { sigma * nv[k] } else { sigma };
            let sd2 = sd[k] * sd[k];
            let c_in = 1.0 / (s + sd2).sqrt();
            let c_skip = sd2 / (s + sd2);
            let c_out = (s * sd2 / (s + sd2)).sqrt();
            let scaled = |v: f64| (v - c.value_center) / c.value_scale;
            x.data[k] = c_in * (sv[k] - fv[k]);
            if om[k] {
                x.data[p + k] = scaled(ov[k]);
                x.data[2 * p + k] = 1.0;
                x.data[6 * p + k] = (0.5 * obs_var.as_slice()[k].max(1e-12).ln() + 7.0) / 2.0;
            }
            x.data[3 * p + k] = scaled(fv[k]);
            x.data[4 * p + k] = det_prob.as_slice()[k];
            x.data[5 * p + k] = nv[k].max(1e-12).ln() / 2.0;
            for (n, v) in consts.iter().enumerate() {
                x.data[(7 + n) * p + k] = *v;
            }
            x.data[12 * p + k] = sd[k].ln() + 5.0;
            let (base, g) = match c.base {
                ResidualBase::State => (sv[k], 1.0 / c_in),
                ResidualBase::Preconditioned => (c_skip * sv[k] + (1.0 - c_skip) * fv[k], c_out),
            };
            let (a, b) = if c.fuse_observations && om[k] {
                let vo = obs_var.as_slice()[k].max(0.0);
                let vp = c_out * c_out;
                let wt = vo / (vp + vo);
                (wt * base + (1.0 - wt) * ov[k], wt * g)
            } else {
                (base, g)
            };
            offset[k] = a;
            gain[k] = b;
        }
        if !x.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericOverflow("non-finite denoiser input".into()));
        }
        Ok(Prepared {
            input: x,
            map: OutputMap { offset, gain },
        })
    }

    fn run(&self, params: &[f64], prep: &Prepared) -> Result<(Grid<f64>, UNetCache)> {
        if params.len() != self.n_params {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.n_params,
                params.len()
            )));
        }
        let (f, cache) = self.net.forward(params, &prep.input)?;
        let out: Vec<f64> = f
            .data
            .iter()
            .zip(prep.map.offset.iter().zip(&prep.map.gain))
            .map(|(f, (a, g))| a + g * f)
            .collect();
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericOverflow("non-finite denoiser activation".into()));
        }
        Ok((Grid::from_vec(prep.input.w, prep.input.h, out)?, cache))
    }

    pub fn forward(&self, params: &[f64], prep: &Prepared) -> Result<Grid<f64>> {
        Ok(self.run(params, prep)?.0)
    }

    /// Clean prediction at step `t` for a reverse run.
    pub fn denoise(
        &self,
        params: &[f64],
        state: &Grid<f64>,
        t: usize,
        sched: &DiffusionSchedule,
        cond: &ConditioningBundle,
    ) -> Result<Grid<f64>> {
        let obs = cond.observation_at(t, sched)?;
        let prep = self.prepare(state, sched.sigma(t), &obs, &cond.obs_var, &cond.det_prob, &cond.norm_var)?;
        self.forward(params, &prep)
    }
}

/// A model with fixed parameters bound to a schedule.
#[derive(Clone, Debug)]
pub struct NsadmDenoiser {
    pub model: DenoiserModel,
    pub params: Vec<f64>,
    pub sched: DiffusionSchedule,
}

impl Denoiser for NsadmDenoiser {
    fn denoise(&self, state: &Grid<f64>, t: usize, cond: &ConditioningBundle) -> Result<Grid<f64>> {
        self.model.denoise(&self.params, state, t, &self.sched, cond)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mse: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// Hybrid loss over all cells; see [`hybrid_loss_masked`].
pub fn hybrid_loss(
    pred: &Grid<f64>,
    target: &Grid<f64>,
    f: &FeatureExtractor,
    lambda_loss: f64,
) -> Result<(LossParts, Grid<f64>)> {
    let all = Grid::filled(pred.w(), pred.h(), true);
    hybrid_loss_masked(pred, target, &all, f, lambda_loss)
}

/// `mean_valid (pred - target)^2 + lambda * sum_s mean (f_s(pred') - f_s(target))^2`
/// where `pred'` takes the target value outside `valid`. Returns the loss
/// and its gradient w.r.t. `pred` (zero outside `valid`).
pub fn hybrid_loss_masked(
    pred: &Grid<f64>,
    target: &Grid<f64>,
    valid: &Grid<bool>,
    f: &FeatureExtractor,
    lambda_loss: f64,
) -> Result<(LossParts, Grid<f64>)> {
    ensure_same_shape(target.shape(), pred.shape())?;
    ensure_same_shape(target.shape(), valid.shape())?;
    if !(lambda_loss >= 0.0) {
        return Err(Error::InvalidInput("lambda_loss must be non-negative".into()));
    }
    let (w, h) = pred.shape();
    let n = valid.as_slice().iter().filter(|v| **v).count();
    if n == 0 {
        return Err(Error::UndefinedMetric("loss over zero valid cells".into()));
    }
    let mut grad = vec![0.0; w * h];
    let mut mse = 0.0;
    let merged: Vec<f64> = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .zip(valid.as_slice())
        .map(|((p, t), ok)| if *ok { *p } else { *t })
        .collect();
    for (k, (p, t)) in merged.iter().zip(target.as_slice()).enumerate() {
        let d = p - t;
        mse += d * d;
        grad[k] = 2.0 * d / n as f64;
    }
    mse /= n as f64;
    let mut perceptual = 0.0;
    if lambda_loss > 0.0 {
        let xp = Tensor::from_vec(1, w, h, merged)?;
        let xt = Tensor::from_vec(1, w, h, target.as_slice().to_vec())?;
        let (fp, cache) = f.forward(&xp)?;
        let (ft, _) = f.forward(&xt)?;
        let mut douts = Vec::with_capacity(fp.len());
        for (a, b) in fp.iter().zip(&ft) {
            let m = a.data.len() as f64;
            let mut d = Tensor::zeros(a.c, a.w, a.h);
            for ((g, x), y) in d.data.iter_mut().zip(&a.data).zip(&b.data) {
                perceptual += (x - y) * (x - y) / m;
                *g = lambda_loss * 2.0 * (x - y) / m;
            }
            douts.push(d);
        }
        let dx = f.backward(&cache, &douts);
        for (g, (d, ok)) in grad.iter_mut().zip(dx.data.iter().zip(valid.as_slice())) {
            if *ok {
                *g += d;
            }
        }
    }
    for (g, ok) in grad.iter_mut().zip(valid.as_slice()) {
        if !ok {
            *g = 0.0;
        }
    }
    Ok((
        LossParts {
            mse,
            perceptual,
            total: mse + lambda_loss * perceptual,
        },
        Grid::from_vec(w, h, grad)?,
    ))
}

/// One training scene in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub clean: Grid<f64>,
    /// Cells where the ground truth is defined.
    pub valid: Grid<bool>,
    pub det_prob: Grid<f64>,
    pub norm_var: NormalizedVarianceMap,
    /// Absolute measurement variance per cell.
    pub obs_var: Grid<f64>,
}

impl TrainingExample {
    fn check(&self) -> Result<()> {
        let s = self.clean.shape();
        ensure_same_shape(s, self.valid.shape())?;
        ensure_same_shape(s, self.det_prob.shape())?;
        ensure_same_shape(s, self.norm_var.shape())?;
        ensure_same_shape(s, self.obs_var.shape())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_loss: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub clip_norm: f64,
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Training observations use the scene's noise variance scaled by a
    /// log-uniform factor in `[1, obs_noise_boost]`.
    pub obs_noise_boost: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            epochs: 40,
            lambda_loss: 0.1,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            clip_norm: 1.0,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            obs_noise_boost: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.clip_norm, self.eps, self.obs_noise_boost];
        if !(self.lr >= 0.0) || self.batch_size == 0 || pos.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("training hyperparameters must be positive".into()));
        }
        if !(self.lambda_loss >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("lambda_loss, momentum or beta2 out of range".into()));
        }
        if self.obs_noise_boost < 1.0 {
            return Err(Error::Config("obs_noise_boost must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub mse: f64,
    pub perceptual: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory(pub Vec<LossRecord>);

pub const LOSS_CSV_HEADER: &str = "step,mse_term,perceptual_term,total";

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOSS_CSV_HEADER);
        s.push('\n');
        for r in &self.0 {
            s.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.mse, r.perceptual, r.total));
        }
        s
    }

    /// Exponential moving average of the total loss.
    pub fn smoothed(&self, alpha: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.0.len());
        let mut acc = None;
        for r in &self.0 {
            let v = match acc {
                None => r.total,
                Some(a) => alpha * a + (1.0 - alpha) * r.total,
            };
            acc = Some(v);
            out.push(v);
        }
        out
    }

    /// Mean total loss over records `range`.
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.0[range];
        s.iter().map(|r| r.total).sum::<f64>() / s.len().max(1) as f64
    }
}

/// One sample of the training distribution: noisy state, thinned noisy
/// observation, and the clean target.
struct Draw {
    prep: Prepared,
    example: usize,
}

fn draw_sample(
    model: &DenoiserModel,
    ex: &TrainingExample,
    sched: &DiffusionSchedule,
    boost: f64,
    seed: u64,
) -> Result<Prepared> {
    let mut r = rng::stream(seed, Domain::Training, 0);
    let t = 1 + ((rng::uniform(&mut r) * sched.T() as f64) as usize).min(sched.T() - 1);
    let scale = (rng::uniform(&mut r) * boost.ln()).exp();
    let state = forward_noise(&ex.clean, t, sched, &ex.norm_var, seed)?;
    let mask = forward_mask(&ex.det_prob, t, sched, seed)?;
    let mut k = 0u64;
    let mut values = Vec::with_capacity(ex.clean.len());
    let mut valid = Vec::with_capacity(ex.clean.len());
    let obs_var = ex.obs_var.map(|v| v * scale);
    for ((c, v), (m, g)) in ex
        .clean
        .as_slice()
        .iter()
        .zip(obs_var.as_slice())
        .zip(mask.as_slice().iter().zip(ex.valid.as_slice()))
    {
        let mut rc = rng::stream(seed, Domain::Degrade, k);
        k += 1;
        let ok = *m && *g;
        values.push(if ok { (c + v.sqrt() * rng::normal(&mut rc)).max(0.0) } else { 0.0 });
        valid.push(ok);
    }
    let (w, h) = ex.clean.shape();
    let obs = DistanceMatrix::new(Grid::from_vec(w, h, values)?, Grid::from_vec(w, h, valid)?)?;
    model.prepare(&state, sched.sigma(t), &obs, &obs_var, &ex.det_prob, &ex.norm_var)
}

/// Loss and parameter gradient for one drawn sample.
fn sample_grad(
    model: &DenoiserModel,
    params: &[f64],
    draw: &Draw,
    ex: &TrainingExample,
    f: &FeatureExtractor,
    lambda_loss: f64,
) -> Result<(LossParts, Vec<f64>)> {
    let (out, cache) = model.run(params, &draw.prep)?;
    let (loss, dout) = hybrid_loss_masked(&out, &ex.clean, &ex.valid, f, lambda_loss)?;
    let w = draw.prep.input.w;
    let h = draw.prep.input.h;
    let df = Tensor::from_vec(
        1,
        w,
        h,
        dout.as_slice()
            .iter()
            .zip(&draw.prep.map.gain)
            .map(|(d, g)| d * g)
            .collect(),
    )?;
    let mut grads = vec![0.0; params.len()];
    model.net.backward(params, &cache, &df, &mut grads);
    Ok((loss, grads))
}

enum OptState {
    Sgd { vel: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

/// Stateful optimizer loop; [`train`] drives it to completion, tests can
/// stop it between epochs.
pub struct Trainer<'a> {
    model: &'a DenoiserModel,
    data: &'a [TrainingExample],
    sched: &'a DiffusionSchedule,
    cfg: TrainConfig,
    features: FeatureExtractor,
    params: Vec<f64>,
    opt: OptState,
    epoch: usize,
    step: usize,
    history: LossHistory,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a DenoiserModel,
        data: &'a [TrainingExample],
        sched: &'a DiffusionSchedule,
        cfg: TrainConfig,
        init: Vec<f64>,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        for ex in data {
            ex.check()?;
        }
        if init.len() != model.n_params() {
            return Err(Error::InvalidInput("initial parameters do not match the model".into()));
        }
        let n = init.len();
        let opt = match cfg.optimizer {
            OptimizerKind::SgdMomentum => OptState::Sgd { vel: vec![0.0; n] },
            OptimizerKind::Adam => OptState::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        };
        Ok(Trainer {
            model,
            data,
            sched,
            features: model.feature_extractor(),
            cfg,
            params: init,
            opt,
            epoch: 0,
            step: 0,
            history: LossHistory::default(),
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn history(&self) -> &LossHistory {
        &self.history
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Deterministic shuffle of the example indices for the current epoch.
    fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        let mut r = rng::stream(self.cfg.seed, Domain::Training, rng::mix(&[0x0e, self.epoch as u64]));
        for i in (1..idx.len()).rev() {
            let j = ((rng::uniform(&mut r) * (i + 1) as f64) as usize).min(i);
            idx.swap(i, j);
        }
        idx
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let order = self.order();
        for batch in order.chunks(self.cfg.batch_size) {
            self.train_step(batch)?;
        }
        self.epoch += 1;
        Ok(())
    }

    fn train_step(&mut self, batch: &[usize]) -> Result<()> {
        let step = self.step;
        let (model, data, sched, cfg) = (self.model, self.data, self.sched, &self.cfg);
        let params = &self.params;
        let features = &self.features;
        let results = par::map_range(batch.len(), |b| -> Result<(LossParts, Vec<f64>)> {
            let example = batch[b];
            let seed = rng::mix(&[cfg.seed, step as u64, b as u64]);
            let draw = Draw {
                prep: draw_sample(model, &data[example], sched, cfg.obs_noise_boost, seed)?,
                example,
            };
            sample_grad(model, params, &draw, &data[draw.example], features, cfg.lambda_loss)
        });
        let nb = batch.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut rec = LossRecord {
            step,
            mse: 0.0,
            perceptual: 0.0,
            total: 0.0,
        };
        for r in results {
            let (loss, g) = match r {
                Ok(v) => v,
                Err(Error::NumericOverflow(_)) => return Err(Error::TrainingDiverged { step }),
                Err(e) => return Err(e),
            };
            rec.mse += loss.mse / nb;
            rec.perceptual += loss.perceptual / nb;
            rec.total += loss.total / nb;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b / nb;
            }
        }
        if !rec.total.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::TrainingDiverged { step });
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let lr = cfg.lr;
        match &mut self.opt {
            OptState::Sgd { vel } => {
                for ((p, v), g) in self.params.iter_mut().zip(vel.iter_mut()).zip(&grad) {
                    *v = cfg.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let (b1, b2) = (cfg.momentum, cfg.beta2);
                let c1 = 1.0 - b1.powi(*t);
                let c2 = 1.0 - b2.powi(*t);
                for (((p, m), v), g) in self.params.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&grad) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                }
            }
        }
        if !self.params.iter().all(|p| p.is_finite()) {
            return Err(Error::TrainingDiverged { step });
        }
        self.history.0.push(rec);
        self.step += 1;
        Ok(())
    }

    pub fn finish(self) -> (Vec<f64>, LossHistory) {
        (self.params, self.history)
    }
}

/// Train from a fresh seeded initialization for `cfg.epochs` epochs.
pub fn train(
    model: &DenoiserModel,
    data: &[TrainingExample],
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, LossHistory)> {
    let init = model.init_params(cfg.seed);
    let mut trainer = Trainer::new(model, data, sched, cfg.clone(), init)?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}

pub const CHECKPOINT_FORMAT: &str = "nsadm-checkpoint";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "weights.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub architecture: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub init_seed: u64,
    pub train_seed: u64,
    pub steps: usize,
    pub n_params: usize,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: Vec<f64>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(model: &DenoiserModel, schedule: &ScheduleConfig, cfg: &TrainConfig, steps: usize, params: Vec<f64>) -> Self {
        Checkpoint {
            manifest: CheckpointManifest {
                format: CHECKPOINT_FORMAT.into(),
                version: 1,
                architecture: model.cfg.clone(),
                schedule: schedule.clone(),
                init_seed: cfg.seed,
                train_seed: cfg.seed,
                steps,
                n_params: params.len(),
                blob: CHECKPOINT_BLOB.into(),
                blob_sha256: String::new(),
                tensors: model.entries().to_vec(),
            },
            params,
        }
    }

    /// Writes the manifest and the little-endian f32 weight blob into `dir`.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let blob: Vec<u8> = self.params.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        self.manifest.blob_sha256 = sha256_hex(&blob);
        let bp = dir.join(&self.manifest.blob);
        std::fs::write(&bp, &blob).map_err(|e| io_err(&bp, e))?;
        let mp = dir.join(CHECKPOINT_MANIFEST);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&mp, json).map_err(|e| io_err(&mp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join(CHECKPOINT_MANIFEST);
        let text = std::fs::read_to_string(&mp).map_err(|e| io_err(&mp, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: mp.clone(),
            msg: e.to_string(),
        })?;
        let fmt = |msg: String| Error::Format {
            path: mp.clone(),
            msg,
        };
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != 1 {
            return Err(fmt(format!("unsupported checkpoint {} v{}", manifest.format, manifest.version)));
        }
        let bp = dir.join(&manifest.blob);
        let blob = std::fs::read(&bp).map_err(|e| io_err(&bp, e))?;
        if sha256_hex(&blob) != manifest.blob_sha256 {
            return Err(fmt("weight blob hash mismatch".into()));
        }
        if blob.len() != 4 * manifest.n_params {
            return Err(fmt(format!("blob holds {} bytes for {} parameters", blob.len(), manifest.n_params)));
        }
        let params: Vec<f64> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Checkpoint { manifest, params })
    }

    /// Rebuild the model and check the stored layout against it.
    pub fn model(&self) -> Result<DenoiserModel> {
        let model = DenoiserModel::new(self.manifest.architecture.clone())?;
        if model.entries() != self.manifest.tensors.as_slice() || model.n_params() != self.params.len() {
            return Err(Error::Format {
                path: CHECKPOINT_MANIFEST.into(),
                msg: "tensor layout does not match the architecture".into(),
            });
        }
        Ok(model)
    }

    pub fn denoiser(&self) -> Result<NsadmDenoiser> {
        Ok(NsadmDenoiser {
            model: self.model()?,
            params: self.params.clone(),
            sched: DiffusionSchedule::from_config(&self.manifest.schedule)?,
        })
    }
}
