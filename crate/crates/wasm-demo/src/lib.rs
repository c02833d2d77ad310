//! Browser bindings: simulate a scene at a chosen transmit power, fill the
//! degraded distance matrix with the median baseline, and plot the
//! detection-probability curve.
//!
//! Grids cross the boundary as row-major `Float64Array`s of length `w*h`
//! (azimuth-major, `i*h + j`); invalid cells are `NaN`.

use nsadm::baselines::mt_default;
use nsadm::geometry::{AngleGrid, DistanceMatrix};
use nsadm::grid::Grid;
use nsadm::pipeline::experiment::score;
use nsadm::pipeline::{ExperimentConfig, SeedRole};
use nsadm::scene::{generate_scene, raycast_ground_truth};
use nsadm::sensing::{degrade, detection_probability, detection_threshold, StatMaps};
use wasm_bindgen::prelude::*;

fn js_err(e: nsadm::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn masked(dm: &DistanceMatrix) -> Vec<f64> {
    dm.values()
        .as_slice()
        .iter()
        .zip(dm.valid().as_slice())
        .map(|(v, ok)| if *ok { *v } else { f64::NAN })
        .collect()
}

/// One simulated scene with its current measurement.
#[wasm_bindgen]
pub struct Demo {
    cfg: ExperimentConfig,
    grid: AngleGrid,
    id: u64,
    gt: DistanceMatrix,
    rcs: Grid<f64>,
    maps: StatMaps,
    degraded: DistanceMatrix,
}

#[wasm_bindgen]
impl Demo {
    /// Build scene `scene` under the default experiment with global `seed`
    /// on a `size`×`size` beam grid, measured at `power_dbm`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, scene: u32, size: usize, power_dbm: f64) -> Result<Demo, JsError> {
        let mut cfg = ExperimentConfig {
            seed: seed as u64,
            ..ExperimentConfig::default()
        };
        cfg.grid.w = size;
        cfg.grid.h = size;
        cfg.validate().map_err(js_err)?;
        let cfg = cfg.resolved();
        let grid = AngleGrid::from_config(&cfg.grid).map_err(js_err)?;
        let id = scene as u64;
        let s = generate_scene(&cfg.scene, nsadm::rng::mix(&[id, 0])).map_err(js_err)?;
        let (gt, rcs) = raycast_ground_truth(&s, &grid).map_err(js_err)?;
        let empty = DistanceMatrix::invalid(gt.w(), gt.h());
        let mut demo = Demo {
            maps: StatMaps {
                snr: Grid::filled(gt.w(), gt.h(), 0.0),
                var: Grid::filled(gt.w(), gt.h(), 0.0),
                det_prob: Grid::filled(gt.w(), gt.h(), 0.0),
            },
            cfg,
            grid,
            id,
            gt,
            rcs,
            degraded: empty,
        };
        demo.set_power(power_dbm)?;
        Ok(demo)
    }

    /// Re-measure the same scene at a new transmit power. The noise seed is
    /// fixed, so only the power changes between calls.
    pub fn set_power(&mut self, power_dbm: f64) -> Result<(), JsError> {
        let sensing = self.cfg.sensing_for(self.id, Some(power_dbm));
        self.maps = StatMaps::compute(&self.gt, &self.rcs, &sensing).map_err(js_err)?;
        let seed = self.cfg.seed_for(SeedRole::Degrade, self.id);
        self.degraded = degrade(&self.gt, &self.maps, seed).map_err(js_err)?.dm;
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.gt.w()
    }

    pub fn height(&self) -> usize {
        self.gt.h()
    }

    pub fn ground_truth(&self) -> Vec<f64> {
        masked(&self.gt)
    }

    pub fn degraded(&self) -> Vec<f64> {
        masked(&self.degraded)
    }

    pub fn detection_map(&self) -> Vec<f64> {
        self.maps.det_prob.as_slice().to_vec()
    }

    /// Range standard deviation in metres per cell.
    pub fn noise_std(&self) -> Vec<f64> {
        self.maps.var.as_slice().iter().map(|v| v.sqrt()).collect()
    }

    pub fn mean_detection(&self) -> f64 {
        self.maps.mean_det_prob()
    }

    /// Median-filter reconstruction of the current measurement.
    pub fn reconstruct(&self) -> Result<Vec<f64>, JsError> {
        Ok(masked(&mt_default(&self.degraded).map_err(js_err)?))
    }

    /// `[rmse_m, chamfer_m2, coverage]` of the raw measurement and of the
    /// reconstruction, in that order.
    pub fn scores(&self) -> Result<Vec<f64>, JsError> {
        let (a, b, c) = score(&self.degraded, &self.gt, &self.grid).map_err(js_err)?;
        let filled = mt_default(&self.degraded).map_err(js_err)?;
        let (d, e, f) = score(&filled, &self.gt, &self.grid).map_err(js_err)?;
        Ok(vec![a, b, c, d, e, f])
    }
}

/// Detection probability at each SNR (dB) for a CFAR threshold with false
/// alarm rate `p_fa`.
#[wasm_bindgen]
pub fn detection_curve(snr_db: Vec<f64>, p_fa: f64) -> Result<Vec<f64>, JsError> {
    let lambda = detection_threshold(p_fa).map_err(js_err)?;
    snr_db
        .iter()
        .map(|db| detection_probability(10f64.powf(db / 10.0), lambda).map_err(js_err))
        .collect()
}
