//! On-disk scene bundles and the dataset manifest.
//!
//! ```text
//! <dataset>/manifest.json
//! <dataset>/scenes/<id>/scene.json
//!                      /gt.dm  rcs.map  snr.map  var.map  detp.map
//!                      /degraded.dm
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::sha256_hex;
use crate::error::{Error, Result};
use crate::geometry::{AngleGrid, DistanceMatrix};
use crate::grid::Grid;
use crate::io::{encode_dm, encode_grid, read_dm, read_map, GridKind};
use crate::par;
use crate::scene::{generate_scene, raycast_ground_truth, Scene};
use crate::sensing::{degrade, scene_admissible, StatMaps};

use super::config::{ExperimentConfig, SeedRole};

pub const DATASET_FORMAT: &str = "nsadm-dataset";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: u64,
    pub dir: String,
    pub split: Split,
    /// Generation attempts consumed, including rejected ones.
    pub attempts: usize,
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub d_max: f64,
    pub rejected: usize,
    pub scenes: Vec<SceneEntry>,
    pub config: ExperimentConfig,
}

/// One scene loaded back from disk.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub id: u64,
    pub scene: Scene,
    pub gt: DistanceMatrix,
    pub rcs: Grid<f64>,
    pub maps: StatMaps,
    pub degraded: DistanceMatrix,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn split_of(index: usize, n: usize, fractions: [f64; 3]) -> Split {
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[0] + fractions[1]) * n as f64).round() as usize - n_train;
    if index < n_train {
        Split::Train
    } else if index < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Files of one admissible scene, serialized in memory.
struct Bundle {
    attempts: usize,
    files: Vec<(&'static str, Vec<u8>)>,
}

fn build_bundle(cfg: &ExperimentConfig, grid: &AngleGrid, id: u64) -> Result<Bundle> {
    let sensing = cfg.sensing_for(id, None);
    for attempt in 0..cfg.dataset.max_retries.max(1) {
        let key = crate::rng::mix(&[id, attempt as u64]);
        let scene = match generate_scene(&cfg.scene, key) {
            Ok(s) => s,
            Err(Error::Generation(msg)) => {
                log::debug!("scene {id} attempt {attempt}: {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let (gt, rcs) = raycast_ground_truth(&scene, grid)?;
        // derive everything from the stored (f32) precision so that a
        // reload reproduces the degraded matrix bit for bit
        let gt = DistanceMatrix::new(gt.values().map(|v| *v as f32 as f64), gt.valid().clone())?;
        let rcs = rcs.map(|v| *v as f32 as f64);
        let maps = match StatMaps::compute(&gt, &rcs, &sensing) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("scene {id} attempt {attempt}: {e}");
                continue;
            }
        };
        if !scene_admissible(&maps, &sensing) {
            continue;
        }
        let degraded = degrade(&gt, &maps, cfg.seed_for(SeedRole::Degrade, id))?;
        let all = Grid::filled(gt.w(), gt.h(), true);
        let files = vec![
            ("scene.json", scene.to_json()?.into_bytes()),
            ("gt.dm", encode_dm(&gt)?),
            ("rcs.map", encode_grid(GridKind::Rcs, &rcs, &all)?),
            ("snr.map", encode_grid(GridKind::Snr, &maps.snr, &all)?),
            ("var.map", encode_grid(GridKind::Var, &maps.var, &all)?),
            ("detp.map", encode_grid(GridKind::Detp, &maps.det_prob, &all)?),
            ("degraded.dm", encode_dm(&degraded.dm)?),
        ];
        return Ok(Bundle {
            attempts: attempt + 1,
            files,
        });
    }
    Err(Error::AdmissibilityExhausted {
        scene_id: id,
        attempts: cfg.dataset.max_retries.max(1),
    })
}

/// Generate every scene bundle and the manifest under `dir`.
pub fn generate_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let grid = AngleGrid::from_config(&cfg.grid)?;
    let n = cfg.dataset.n_scenes;
    let bundles = par::map_range(n, |k| build_bundle(&cfg, &grid, k as u64));
    let mut scenes = Vec::with_capacity(n);
    let mut rejected = 0;
    for (k, b) in bundles.into_iter().enumerate() {
        let b = b?;
        rejected += b.attempts - 1;
        let rel = format!("scenes/{k:05}");
        let mut files = BTreeMap::new();
        for (name, bytes) in &b.files {
            write_file(&dir.join(&rel).join(name), bytes)?;
            files.insert(name.to_string(), sha256_hex(bytes));
        }
        scenes.push(SceneEntry {
            id: k as u64,
            dir: rel,
            split: split_of(k, n, cfg.dataset.split),
            attempts: b.attempts,
            files,
        });
    }
    if rejected > 0 {
        log::info!("regenerated {rejected} inadmissible scene draws");
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        d_max: cfg.d_max(),
        rejected,
        scenes,
        config: cfg,
    };
    write_file(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// An opened dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Format {
                path,
                msg: format!("not a dataset manifest: {}", manifest.format),
            });
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.manifest.config
    }

    pub fn entries(&self, split: Split) -> Vec<&SceneEntry> {
        self.manifest.scenes.iter().filter(|s| s.split == split).collect()
    }

    pub fn grid(&self) -> Result<AngleGrid> {
        AngleGrid::from_config(&self.manifest.config.grid)
    }

    pub fn load(&self, entry: &SceneEntry) -> Result<SceneData> {
        let dir = self.root.join(&entry.dir);
        let sp = dir.join("scene.json");
        let text = std::fs::read_to_string(&sp).map_err(|e| io_err(&sp, e))?;
        Ok(SceneData {
            id: entry.id,
            scene: Scene::from_json(&text).map_err(|e| Error::Format {
                path: sp,
                msg: e.to_string(),
            })?,
            gt: read_dm(&dir.join("gt.dm"))?,
            rcs: read_map(&dir.join("rcs.map"), GridKind::Rcs)?,
            maps: StatMaps {
                snr: read_map(&dir.join("snr.map"), GridKind::Snr)?,
                var: read_map(&dir.join("var.map"), GridKind::Var)?,
                det_prob: read_map(&dir.join("detp.map"), GridKind::Detp)?,
            },
            degraded: read_dm(&dir.join("degraded.dm"))?,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SceneData>> {
        let entries = self.entries(split);
        par::map_range(entries.len(), |k| self.load(entries[k])).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_follow_fractions() {
        let count = |s| (0..100).filter(|k| split_of(*k, 100, [0.64, 0.16, 0.2]) == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (64, 16, 20));
        assert_eq!(split_of(0, 1, [0.0, 0.0, 1.0]), Split::Test);
    }
}
