//! Sweep conditions, method runners and metric aggregation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{mt_default, passthrough};
use crate::denoiser::{NsadmDenoiser, TrainingExample};
use crate::diffusion::{fill_invalid_variance, normalize_variance, reverse_sample, ConditioningBundle};
use crate::error::{Error, Result};
use crate::geometry::{dm_to_pointcloud, AngleGrid, DistanceMatrix};
use crate::grid::Grid;
use crate::metrics::{chamfer, rmse_report, Penalty};
use crate::sensing::{degrade, StatMaps};

use super::config::{ExperimentConfig, SeedRole};
use super::dataset::SceneData;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nsadm,
    Mt,
    Passthrough,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Nsadm, Method::Mt, Method::Passthrough];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nsadm => "nsadm",
            Method::Mt => "mt",
            Method::Passthrough => "passthrough",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected nsadm, mt or passthrough")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    PowerDbm,
    DetectionRatio,
    VarianceScale,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::PowerDbm => "power_dbm",
            Axis::DetectionRatio => "detection_ratio",
            Axis::VarianceScale => "variance_scale",
        }
    }

    /// Expected direction of the error metrics as the axis value grows.
    pub fn expected(self) -> Trend {
        match self {
            Axis::PowerDbm | Axis::DetectionRatio => Trend::NonIncreasing,
            Axis::VarianceScale => Trend::NonDecreasing,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trend {
    NonIncreasing,
    NonDecreasing,
}

impl Trend {
    pub fn holds(self, ys: &[f64]) -> bool {
        ys.windows(2).all(|w| match self {
            Trend::NonIncreasing => w[1] <= w[0],
            Trend::NonDecreasing => w[1] >= w[0],
        })
    }
}

/// One point on a sweep axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub axis: Axis,
    pub value: f64,
}

impl Condition {
    pub fn power(dbm: f64) -> Self {
        Condition {
            axis: Axis::PowerDbm,
            value: dbm,
        }
    }

    /// Directory-safe label.
    pub fn tag(&self) -> String {
        format!("{}_{:+.3}", self.axis.name(), self.value)
    }

    /// Every condition of the configured sweeps.
    pub fn all(cfg: &ExperimentConfig) -> Vec<Condition> {
        let s = &cfg.sweep;
        let mk = |axis, v: &Vec<f64>| v.iter().map(move |&value| Condition { axis, value }).collect::<Vec<_>>();
        let mut out = mk(Axis::PowerDbm, &s.power_dbm);
        out.extend(mk(Axis::DetectionRatio, &s.detection_ratio));
        out.extend(mk(Axis::VarianceScale, &s.variance_scale));
        out
    }
}

/// Scale `psi` by the factor that makes `mean(min(s * psi, 1))` equal
/// `target`.
pub fn rescale_mean(psi: &Grid<f64>, target: f64) -> Result<Grid<f64>> {
    let mean_at = |s: f64| psi.as_slice().iter().map(|p| (s * p).min(1.0)).sum::<f64>() / psi.len() as f64;
    let mut hi = 1.0;
    while mean_at(hi) < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::InvalidInput(format!("detection map cannot reach mean {target}")));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(psi.map(|p| (hi * p).min(1.0)))
}

/// Statistics and measured matrix of a scene under `cond`. The degrade
/// seed is shared across conditions, so masks nest along the detection
/// axis and noise scales along the variance axis.
pub fn realize(cfg: &ExperimentConfig, s: &SceneData, cond: Condition) -> Result<(StatMaps, DistanceMatrix)> {
    let maps = match cond.axis {
        Axis::PowerDbm => StatMaps::compute(&s.gt, &s.rcs, &cfg.sensing_for(s.id, Some(cond.value)))?,
        Axis::DetectionRatio => StatMaps {
            det_prob: rescale_mean(&s.maps.det_prob, cond.value)?,
            ..s.maps.clone()
        },
        Axis::VarianceScale => {
            let valid = s.gt.valid().as_slice();
            let (sum, n) = s
                .maps
                .var
                .as_slice()
                .iter()
                .zip(valid)
                .filter(|(_, ok)| **ok)
                .fold((0.0, 0usize), |(a, n), (v, _)| (a + v, n + 1));
            if n == 0 || sum <= 0.0 {
                return Err(Error::Degenerate(format!("scene {} has no variance to scale", s.id)));
            }
            let base = cfg.sweep.variance_base_std_m.powi(2) / (sum / n as f64);
            StatMaps {
                var: s.maps.var.map(|v| v * base * cond.value),
                ..s.maps.clone()
            }
        }
    };
    let dm = degrade(&s.gt, &maps, cfg.seed_for(SeedRole::Degrade, s.id))?.dm;
    Ok((maps, dm))
}

fn normalized_variance(maps: &StatMaps, gt_valid: &Grid<bool>) -> Result<crate::diffusion::NormalizedVarianceMap> {
    normalize_variance(&fill_invalid_variance(&maps.var, gt_valid)?)
}

/// Conditioning in normalized units for one measured scene.
pub fn conditioning(
    cfg: &ExperimentConfig,
    d_max: f64,
    id: u64,
    gt_valid: &Grid<bool>,
    maps: &StatMaps,
    observed: &DistanceMatrix,
) -> Result<ConditioningBundle> {
    let mut c = ConditioningBundle::new(
        maps.det_prob.clone(),
        normalized_variance(maps, gt_valid)?,
        observed.scaled(1.0 / d_max)?,
        maps.var.map(|v| v / (d_max * d_max)),
    )?;
    c.thin_seed = Some(cfg.seed_for(SeedRole::Thinning, id));
    Ok(c)
}

/// Training examples for every scene at every configured training power.
pub fn training_examples(cfg: &ExperimentConfig, d_max: f64, scenes: &[SceneData]) -> Result<Vec<TrainingExample>> {
    let powers = &cfg.dataset.train_power_dbm;
    let jobs: Vec<(usize, f64)> = (0..scenes.len())
        .flat_map(|k| powers.iter().map(move |p| (k, *p)))
        .collect();
    crate::par::map_range(jobs.len(), |n| {
        let (k, p) = jobs[n];
        let s = &scenes[k];
        let maps = StatMaps::compute(&s.gt, &s.rcs, &cfg.sensing_for(s.id, Some(p)))?;
        Ok(TrainingExample {
            clean: s.gt.values().map(|v| v / d_max),
            valid: s.gt.valid().clone(),
            det_prob: maps.det_prob.clone(),
            norm_var: normalized_variance(&maps, s.gt.valid())?,
            obs_var: maps.var.map(|v| v / (d_max * d_max)),
        })
    })
    .into_iter()
    .collect()
}

/// Reconstruct one scene with `method`.
pub fn run_method(
    method: Method,
    denoiser: Option<&NsadmDenoiser>,
    cfg: &ExperimentConfig,
    d_max: f64,
    s: &SceneData,
    maps: &StatMaps,
    observed: &DistanceMatrix,
) -> Result<DistanceMatrix> {
    match method {
        Method::Passthrough => Ok(passthrough(observed)),
        Method::Mt => mt_default(observed),
        Method::Nsadm => {
            let den = denoiser.ok_or_else(|| Error::Config("nsadm needs a checkpoint".into()))?;
            let cond = conditioning(cfg, d_max, s.id, s.gt.valid(), maps, observed)?;
            let out = reverse_sample(den, &cond, &den.sched, cfg.seed_for(SeedRole::Sample, s.id), &cfg.sampler)?;
            out.scaled(d_max)
        }
    }
}

/// CSV columns: the metric row followed by the sweep axis and its value.
pub const SWEEP_CSV_HEADER: &str = "scene_id,method,power,rmse_m,chamfer_m2,coverage,axis,value";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scene_id: u64,
    pub method: Method,
    /// Transmit power (dBm) the measurement was taken at.
    pub power: f64,
    pub rmse_m: f64,
    pub chamfer_m2: f64,
    pub coverage: f64,
    pub condition: Condition,
}

impl EvalRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.9e},{:.9e},{:.6},{},{}",
            self.scene_id,
            self.method,
            self.power,
            self.rmse_m,
            self.chamfer_m2,
            self.coverage,
            self.condition.axis.name(),
            self.condition.value
        )
    }
}

/// RMSE scores unreconstructed cells with the sentinel 0 so sparse
/// outputs are not rewarded; coverage is reported alongside.
pub fn score(pred: &DistanceMatrix, gt: &DistanceMatrix, grid: &AngleGrid) -> Result<(f64, f64, f64)> {
    let r = rmse_report(pred, gt, Penalty::Sentinel)?;
    let cd = chamfer(&dm_to_pointcloud(pred, grid)?, &dm_to_pointcloud(gt, grid)?)?;
    Ok((r.rmse, cd, r.coverage))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: Method,
    pub rmse_m: Vec<f64>,
    pub chamfer_m2: Vec<f64>,
    pub coverage: Vec<f64>,
    pub scenes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub method: Method,
    pub metric: String,
    pub trend: Trend,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSummary {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub curves: Vec<MethodCurve>,
    pub verdicts: Vec<Verdict>,
    /// Per axis point: NSADM strictly below every other method on mean
    /// RMSE and mean Chamfer distance. Empty when NSADM was not run.
    pub nsadm_best: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: usize,
    pub rmse_penalty: Penalty,
    pub axes: Vec<AxisSummary>,
}

impl EvalSummary {
    pub fn axis(&self, axis: Axis) -> Option<&AxisSummary> {
        self.axes.iter().find(|a| a.axis == axis)
    }
}

impl AxisSummary {
    pub fn curve(&self, m: Method) -> Option<&MethodCurve> {
        self.curves.iter().find(|c| c.method == m)
    }

    pub fn verdict(&self, m: Method, metric: &str) -> Option<bool> {
        self.verdicts.iter().find(|v| v.method == m && v.metric == metric).map(|v| v.holds)
    }
}

/// Mean metrics per (axis, value, method) with monotonicity verdicts.
pub fn summarize(rows: &[EvalRow]) -> EvalSummary {
    let mut axes_present: Vec<Axis> = rows.iter().map(|r| r.condition.axis).collect();
    axes_present.sort();
    axes_present.dedup();
    let mut axes = Vec::new();
    for axis in axes_present {
        let on_axis: Vec<&EvalRow> = rows.iter().filter(|r| r.condition.axis == axis).collect();
        let mut values: Vec<f64> = on_axis.iter().map(|r| r.condition.value).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let mut methods: Vec<Method> = on_axis.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        let mut curves = Vec::new();
        for &m in &methods {
            let mut c = MethodCurve {
                method: m,
                rmse_m: vec![],
                chamfer_m2: vec![],
                coverage: vec![],
                scenes: vec![],
            };
            for &v in &values {
                let sel: Vec<&&EvalRow> = on_axis.iter().filter(|r| r.method == m && r.condition.value == v).collect();
                let n = sel.len().max(1) as f64;
                c.rmse_m.push(sel.iter().map(|r| r.rmse_m).sum::<f64>() / n);
                c.chamfer_m2.push(sel.iter().map(|r| r.chamfer_m2).sum::<f64>() / n);
                c.coverage.push(sel.iter().map(|r| r.coverage).sum::<f64>() / n);
                c.scenes.push(sel.len());
            }
            curves.push(c);
        }
        let trend = axis.expected();
        let mut verdicts = Vec::new();
        for c in &curves {
            for (metric, ys) in [("rmse_m", &c.rmse_m), ("chamfer_m2", &c.chamfer_m2)] {
                verdicts.push(Verdict {
                    method: c.method,
                    metric: metric.into(),
                    trend,
                    holds: trend.holds(ys),
                });
            }
        }
        let nsadm_best = match curves.iter().find(|c| c.method == Method::Nsadm) {
            Some(ns) => (0..values.len())
                .map(|k| {
                    curves
                        .iter()
                        .filter(|c| c.method != Method::Nsadm)
                        .all(|c| ns.rmse_m[k] < c.rmse_m[k] && ns.chamfer_m2[k] < c.chamfer_m2[k])
                })
                .collect(),
            None => vec![],
        };
        axes.push(AxisSummary {
            axis,
            values,
            curves,
            verdicts,
            nsadm_best,
        });
    }
    EvalSummary {
        rows: rows.len(),
        rmse_penalty: Penalty::Sentinel,
        axes,
    }
}
