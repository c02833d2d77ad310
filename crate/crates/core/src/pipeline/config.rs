//! Experiment configuration: one JSON document, optionally overridden by
//! `NSADM_<SECTION>_<KEY>` environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::denoiser::{DenoiserConfig, TrainConfig};
use crate::diffusion::{SamplerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::geometry::AngleGridConfig;
use crate::rng;
use crate::scene::SceneGenConfig;
use crate::sensing::{dbm_to_watts, Fading, SensingConfig};
use crate::waveform::PulseConfig;

pub const ENV_PREFIX: &str = "NSADM_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Regeneration attempts per scene slot before giving up.
    pub max_retries: usize,
    /// Transmit powers (dBm) at which every training scene is presented.
    pub train_power_dbm: Vec<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_scenes: 100,
            split: [0.64, 0.16, 0.20],
            max_retries: 50,
            train_power_dbm: vec![-2.0, 3.0, 8.0, 13.0, 18.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub power_dbm: Vec<f64>,
    /// Target mean detection probabilities.
    pub detection_ratio: Vec<f64>,
    pub variance_scale: Vec<f64>,
    /// Measurement noise std (m, averaged over the variance map) that the
    /// variance axis starts from before scaling.
    pub variance_base_std_m: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            power_dbm: vec![-2.0, 3.0, 8.0, 13.0, 18.0],
            detection_ratio: vec![0.05, 0.2, 0.5, 0.7],
            variance_scale: vec![1.0, 2.0, 4.0],
            variance_base_std_m: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub pulse: PulseConfig,
    pub crb_snr: Vec<f64>,
    pub trials: usize,
    pub p_fa: f64,
    /// Detection test points as multiples of the threshold `lambda`.
    pub detection_snr_factor: Vec<f64>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            pulse: PulseConfig::default(),
            crb_snr: vec![1e2, 1e3, 1e4],
            trials: 10_000,
            p_fa: 1e-2,
            detection_snr_factor: vec![0.0, 1.0, 10.0],
        }
    }
}

/// Everything one experiment needs. Component seeds are derived from
/// `seed` by [`ExperimentConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scene: SceneGenConfig,
    pub sensing: SensingConfig,
    pub grid: AngleGridConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub dataset: DatasetConfig,
    pub sweep: SweepConfig,
    pub validation: ValidationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            output_dir: PathBuf::from("runs/default"),
            scene: SceneGenConfig::default(),
            sensing: SensingConfig {
                p_s: dbm_to_watts(8.0),
                fading: Fading::Rayleigh { seed: 0 },
                ..SensingConfig::default()
            },
            grid: AngleGridConfig::default(),
            schedule: ScheduleConfig {
                t: 20,
                sigma_min: 1e-4,
                sigma_max: 0.05,
                ..ScheduleConfig::default()
            },
            denoiser: DenoiserConfig {
                widths: [16, 32, 64],
                ..DenoiserConfig::default()
            },
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            dataset: DatasetConfig::default(),
            sweep: SweepConfig::default(),
            validation: ValidationConfig::default(),
        }
    }
}

/// Seed roles derived from the global seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum SeedRole {
    Scene = 1,
    Fading = 2,
    Degrade = 3,
    Train = 4,
    Sample = 5,
    Thinning = 6,
    Validation = 7,
}

impl ExperimentConfig {
    pub fn seed_for(&self, role: SeedRole, index: u64) -> u64 {
        rng::mix(&[self.seed, role as u64, index])
    }

    /// Copy with component seeds set from the global seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.scene.seed = self.seed_for(SeedRole::Scene, 0);
        c.train.seed = self.seed_for(SeedRole::Train, 0);
        c
    }

    /// Sensing parameters for one scene: fading is re-seeded per scene.
    pub fn sensing_for(&self, scene_id: u64, power_dbm: Option<f64>) -> SensingConfig {
        let mut s = match power_dbm {
            Some(p) => self.sensing.with_power_dbm(p),
            None => self.sensing.clone(),
        };
        if let Fading::Rayleigh { .. } = s.fading {
            s.fading = Fading::Rayleigh {
                seed: self.seed_for(SeedRole::Fading, scene_id),
            };
        }
        s
    }

    /// Normalization constant for distances: the longest range a beam can
    /// return inside the sensing disc.
    pub fn d_max(&self) -> f64 {
        2.0 * self.scene.sensing_radius + self.scene.bs_height[1]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.dataset.split;
        if s.iter().any(|f| !(0.0..=1.0).contains(f)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {s:?} must be in [0, 1] and sum to 1")));
        }
        if self.dataset.n_scenes == 0 {
            return Err(Error::Config("dataset needs at least one scene".into()));
        }
        let sw = &self.sweep;
        if sw.power_dbm.is_empty() || sw.detection_ratio.is_empty() || sw.variance_scale.is_empty() {
            return Err(Error::Config("sweep lists must be non-empty".into()));
        }
        if self.dataset.train_power_dbm.is_empty() {
            return Err(Error::Config("train_power_dbm must be non-empty".into()));
        }
        if sw.detection_ratio.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::Config("detection ratios must lie in (0, 1]".into()));
        }
        if sw.variance_scale.iter().any(|v| !(*v > 0.0)) || !(sw.variance_base_std_m > 0.0) {
            return Err(Error::Config("variance scales must be positive".into()));
        }
        if self.grid.w % 4 != 0 || self.grid.h % 4 != 0 {
            return Err(Error::Config("grid sides must be multiples of 4".into()));
        }
        self.sensing.validate().map_err(to_config)?;
        self.scene.validate().map_err(to_config)?;
        self.denoiser.validate()?;
        self.train.validate()?;
        self.validation.pulse.validate().map_err(to_config)?;
        crate::diffusion::DiffusionSchedule::from_config(&self.schedule).map_err(to_config)?;
        Ok(())
    }

    /// Parse a JSON document, apply environment overrides, validate.
    pub fn from_json_with_env<I>(text: &str, origin: &Path, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        if !value.is_object() {
            return Err(Error::Config(format!("{}: top level must be an object", origin.display())));
        }
        // start from the defaults so overrides can address omitted keys
        let mut full = serde_json::to_value(ExperimentConfig::default())?;
        merge(&mut full, value.take());
        apply_env(&mut full, env)?;
        let cfg: ExperimentConfig = serde_json::from_value(full).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from `path` (or the defaults when `None`) with overrides from the
    /// process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let (text, origin) = match path {
            Some(p) => (
                std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?,
                p.to_path_buf(),
            ),
            None => ("{}".to_string(), PathBuf::from("<defaults>")),
        };
        Self::from_json_with_env(&text, &origin, std::env::vars())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// `NSADM_SEED=3`, `NSADM_TRAIN_LR=0.01`, `NSADM_SWEEP_POWER_DBM=[0,10]`.
/// Values parse as JSON when possible and as strings otherwise. Unknown
/// sections or keys are config errors.
fn apply_env<I>(cfg: &mut Value, env: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let parsed = serde_json::from_str::<Value>(&raw).unwrap_or(Value::String(raw.clone()));
        let obj = cfg.as_object_mut().expect("config is an object");
        if let Some(slot) = obj.get_mut(&rest) {
            if !slot.is_object() {
                *slot = parsed;
                continue;
            }
        }
        let section = obj
            .iter()
            .filter(|(k, v)| v.is_object() && rest.starts_with(&format!("{k}_")))
            .map(|(k, _)| k.clone())
            .max_by_key(|k| k.len());
        let Some(section) = section else {
            return Err(Error::Config(format!("{name}: no such config section")));
        };
        let key = &rest[section.len() + 1..];
        let sec = obj.get_mut(&section).and_then(Value::as_object_mut).expect("section is an object");
        // serde renames such as the schedule's "T" are matched case-insensitively
        let actual = sec.keys().find(|k| k.to_ascii_lowercase() == key).cloned();
        match actual {
            Some(k) => {
                sec.insert(k, parsed);
            }
            None => return Err(Error::Config(format!("{name}: no key {key} in section {section}"))),
        }
    }
    Ok(())
}
