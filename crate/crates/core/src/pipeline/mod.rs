//! End-to-end commands behind the CLI. Every command is a pure function of
//! its configuration and inputs, and writes its artifacts under an output
//! directory.

pub mod config;
pub mod dataset;
pub mod experiment;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{train, Checkpoint, DenoiserModel, NsadmDenoiser};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::io::{encode_dm, ply_string, read_dm};
use crate::par;
use crate::sensing::{detection_threshold, watts_to_dbm};
use crate::waveform::{reports_csv, validate_crb, validate_detection, ValidationSummary};
use crate::geometry::dm_to_pointcloud;

pub use config::{ExperimentConfig, SeedRole};
pub use dataset::{generate_dataset, Dataset, DatasetManifest, SceneData, Split};
pub use experiment::{Axis, Condition, EvalRow, EvalSummary, Method};

use dataset::write_file;
use experiment::{realize, run_method, score, summarize, training_examples, SWEEP_CSV_HEADER};

pub const LOSS_CSV: &str = "loss.csv";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `cmd_generate`: write the dataset to `out`.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetManifest> {
    generate_dataset(cfg, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub examples: usize,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub n_params: usize,
}

/// `cmd_train`: fit the denoiser on the training split and write a
/// checkpoint plus loss history to `out`.
pub fn cmd_train(cfg: &ExperimentConfig, dataset_dir: &Path, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let ds = Dataset::open(dataset_dir)?;
    let scenes = ds.load_split(Split::Train)?;
    if scenes.is_empty() {
        return Err(Error::InvalidInput(format!("{} has no training scenes", dataset_dir.display())));
    }
    // scene statistics come from the dataset's own configuration
    let mut data_cfg = ds.config().clone();
    data_cfg.dataset.train_power_dbm = cfg.dataset.train_power_dbm.clone();
    let examples = training_examples(&data_cfg, ds.manifest.d_max, &scenes)?;
    let model = DenoiserModel::new(cfg.denoiser.clone())?;
    let sched = DiffusionSchedule::from_config(&cfg.schedule)?;
    log::info!(
        "training on {} examples, {} parameters, {} epochs",
        examples.len(),
        model.n_params(),
        cfg.train.epochs
    );
    let (params, history) = train(&model, &examples, &sched, &cfg.train)?;
    let steps = history.0.len();
    let mut ck = Checkpoint::new(&model, &cfg.schedule, &cfg.train, steps, params);
    ck.save(out)?;
    write_file(&out.join(LOSS_CSV), history.to_csv().as_bytes())?;
    let k = (steps / 10).max(1);
    Ok(TrainSummary {
        examples: examples.len(),
        steps,
        first_loss: history.mean_total(0..k.min(steps)),
        final_loss: history.mean_total(steps.saturating_sub(k)..steps),
        n_params: model.n_params(),
    })
}

/// Metadata stored next to each prediction set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub method: Method,
    pub condition: Condition,
    pub power_dbm: f64,
    pub scenes: Vec<u64>,
}

/// The dataset's configuration (scene statistics and seeds) with the sweep
/// and sampler settings of the current run.
fn run_config(ds: &Dataset, cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = ds.config().clone();
    c.sweep = cfg.sweep.clone();
    c.sampler = cfg.sampler;
    c
}

fn load_denoiser(method: Method, checkpoint: Option<&Path>) -> Result<Option<NsadmDenoiser>> {
    match (method, checkpoint) {
        (Method::Nsadm, Some(dir)) => Ok(Some(Checkpoint::load(dir)?.denoiser()?)),
        (Method::Nsadm, None) => Err(Error::Config("method nsadm needs --checkpoint".into())),
        _ => Ok(None),
    }
}

fn condition_power(cfg: &ExperimentConfig, c: Condition) -> f64 {
    match c.axis {
        Axis::PowerDbm => c.value,
        _ => watts_to_dbm(cfg.sensing.p_s),
    }
}

/// `cmd_infer`: reconstruct every test scene under each condition and
/// write `<out>/<method>/<condition>/<id>.dm` plus a PLY export.
pub fn cmd_infer(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    checkpoint: Option<&Path>,
    method: Method,
    conditions: &[Condition],
    out: &Path,
) -> Result<Vec<RunInfo>> {
    let ds = Dataset::open(dataset_dir)?;
    let cfg = run_config(&ds, cfg);
    let den = load_denoiser(method, checkpoint)?;
    let grid = ds.grid()?;
    let scenes = ds.load_split(Split::Test)?;
    let mut runs = Vec::new();
    for &cond in conditions {
        let dir = out.join(method.name()).join(cond.tag());
        let preds = par::map_range(scenes.len(), |k| -> Result<(Vec<u8>, String)> {
            let s = &scenes[k];
            let (maps, observed) = realize(&cfg, s, cond)?;
            let pred = run_method(method, den.as_ref(), &cfg, ds.manifest.d_max, s, &maps, &observed)?;
            Ok((encode_dm(&pred)?, ply_string(&dm_to_pointcloud(&pred, &grid)?)))
        });
        for (s, p) in scenes.iter().zip(preds) {
            let (dm, ply) = p?;
            write_file(&dir.join(format!("{:05}.dm", s.id)), &dm)?;
            write_file(&dir.join(format!("{:05}.ply", s.id)), ply.as_bytes())?;
        }
        let info = RunInfo {
            method,
            condition: cond,
            power_dbm: condition_power(&cfg, cond),
            scenes: scenes.iter().map(|s| s.id).collect(),
        };
        write_file(&dir.join(RUN_FILE), serde_json::to_string_pretty(&info)?.as_bytes())?;
        runs.push(info);
    }
    Ok(runs)
}

fn find_runs(pred_dir: &Path) -> Result<Vec<(PathBuf, RunInfo)>> {
    let mut runs = Vec::new();
    let mut stack = vec![pred_dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let rd = std::fs::read_dir(&d).map_err(|e| io_err(&d, e))?;
        let mut entries: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == RUN_FILE) {
                let text = std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
                let info: RunInfo = serde_json::from_str(&text).map_err(|e| Error::Format {
                    path: p.clone(),
                    msg: e.to_string(),
                })?;
                runs.push((d.clone(), info));
            }
        }
    }
    runs.sort_by(|a, b| a.0.cmp(&b.0));
    if runs.is_empty() {
        return Err(Error::InvalidInput(format!("no prediction runs under {}", pred_dir.display())));
    }
    Ok(runs)
}

/// `cmd_evaluate`: score every prediction run against ground truth; write
/// the metrics CSV and the summary JSON to `out`.
pub fn cmd_evaluate(pred_dir: &Path, dataset_dir: &Path, out: &Path) -> Result<EvalSummary> {
    let ds = Dataset::open(dataset_dir)?;
    let grid = ds.grid()?;
    let runs = find_runs(pred_dir)?;
    let mut rows = Vec::new();
    for (dir, info) in &runs {
        let scored = par::map_range(info.scenes.len(), |k| -> Result<EvalRow> {
            let id = info.scenes[k];
            let entry = ds
                .manifest
                .scenes
                .iter()
                .find(|e| e.id == id)
                .ok_or_else(|| Error::InvalidInput(format!("scene {id} not in dataset")))?;
            let gt = read_dm(&ds.root.join(&entry.dir).join("gt.dm"))?;
            let pred = read_dm(&dir.join(format!("{id:05}.dm")))?;
            let (rmse_m, chamfer_m2, coverage) = score(&pred, &gt, &grid)?;
            Ok(EvalRow {
                scene_id: id,
                method: info.method,
                power: info.power_dbm,
                rmse_m,
                chamfer_m2,
                coverage,
                condition: info.condition,
            })
        });
        for r in scored {
            rows.push(r?);
        }
    }
    rows.sort_by(|a, b| {
        (a.condition.axis, a.method, a.scene_id)
            .cmp(&(b.condition.axis, b.method, b.scene_id))
            .then(a.condition.value.total_cmp(&b.condition.value))
    });
    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    write_file(&out.join(METRICS_CSV), csv.as_bytes())?;
    let summary = summarize(&rows);
    write_file(&out.join(SUMMARY_JSON), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

/// `cmd_validate_stats`: Monte Carlo checks of the CRB and detection
/// models; report written to `out`.
pub fn cmd_validate_stats(cfg: &ExperimentConfig, out: &Path) -> Result<ValidationSummary> {
    cfg.validate()?;
    let v = &cfg.validation;
    let seed = cfg.seed_for(SeedRole::Validation, 0);
    let crb = validate_crb(&v.crb_snr, &v.pulse, v.trials, &cfg.sensing, seed)?;
    let lambda = detection_threshold(v.p_fa)?;
    let det_snrs: Vec<f64> = v.detection_snr_factor.iter().map(|f| f * lambda).collect();
    let detection = validate_detection(&det_snrs, v.p_fa, v.trials, &v.pulse, rng_next(seed))?;
    let pass = crb.pass && detection.pass;
    let summary = ValidationSummary { crb, detection, pass };
    write_file(&out.join("validation.csv"), reports_csv(&summary.crb, &summary.detection).as_bytes())?;
    write_file(&out.join("validation.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

fn rng_next(seed: u64) -> u64 {
    crate::rng::mix(&[seed, 1])
}

/// `sweep`: infer every method on every configured sweep condition and
/// evaluate. Predictions land in `<out>/predictions`, metrics in `<out>`.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    checkpoint: Option<&Path>,
    methods: &[Method],
    out: &Path,
) -> Result<EvalSummary> {
    cfg.validate()?;
    let conditions = Condition::all(cfg);
    let pred_dir = out.join("predictions");
    for &m in methods {
        cmd_infer(cfg, dataset_dir, checkpoint, m, &conditions, &pred_dir)?;
    }
    cmd_evaluate(&pred_dir, dataset_dir, out)
}
