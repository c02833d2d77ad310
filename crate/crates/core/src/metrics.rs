//! RMSE on distance matrices and Chamfer distance on point clouds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DistanceMatrix, Point3, PointCloud};
use crate::grid::ensure_same_shape;

/// How a ground-truth-valid cell that the prediction leaves invalid enters
/// the RMSE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    /// Skip the cell; the miss shows up in `coverage` only.
    #[default]
    Excluded,
    /// Score the cell with its sentinel value 0, as the measurement
    /// `(gt + eps) ⊙ M` itself does.
    Sentinel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub rmse: f64,
    /// Fraction of gt-valid cells that the prediction covers.
    pub coverage: f64,
    /// Number of cells that entered the mean.
    pub cells: usize,
}

pub fn rmse_report(pred: &DistanceMatrix, gt: &DistanceMatrix, mode: Penalty) -> Result<RmseReport> {
    ensure_same_shape(gt.shape(), pred.shape())?;
    let mut sum = 0.0;
    let mut cells = 0usize;
    let mut gt_valid = 0usize;
    let mut covered = 0usize;
    let pv = pred.values().as_slice();
    let pm = pred.valid().as_slice();
    for (k, (&g, &gm)) in gt
        .values()
        .as_slice()
        .iter()
        .zip(gt.valid().as_slice())
        .enumerate()
    {
        if !gm {
            continue;
        }
        gt_valid += 1;
        if pm[k] {
            covered += 1;
        } else if mode == Penalty::Excluded {
            continue;
        }
        let p = if pm[k] { pv[k] } else { 0.0 };
        sum += (p - g) * (p - g);
        cells += 1;
    }
    if gt_valid == 0 {
        return Err(Error::UndefinedMetric("ground truth has no valid cells".into()));
    }
    if cells == 0 {
        return Err(Error::UndefinedMetric(
            "prediction covers no ground-truth cell".into(),
        ));
    }
    Ok(RmseReport {
        rmse: (sum / cells as f64).sqrt(),
        coverage: covered as f64 / gt_valid as f64,
        cells,
    })
}

/// RMSE over cells valid in both matrices.
pub fn rmse(pred: &DistanceMatrix, gt: &DistanceMatrix) -> Result<f64> {
    Ok(rmse_report(pred, gt, Penalty::Excluded)?.rmse)
}

/// Static 3-d tree over a point set for exact nearest-neighbour queries.
pub struct KdTree<'a> {
    points: &'a [Point3],
    /// Point indices arranged so each subtree occupies a contiguous slice
    /// with its splitting point in the middle.
    order: Vec<usize>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Point3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build(points, &mut order, 0);
        KdTree { points, order }
    }

    /// Squared distance from `q` to its nearest point, `inf` when empty.
    pub fn nearest_dist2(&self, q: &Point3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, &self.order, 0, &mut best);
        best
    }

    fn search(&self, q: &Point3, slice: &[usize], depth: usize, best: &mut f64) {
        if slice.is_empty() {
            return;
        }
        let mid = slice.len() / 2;
        let p = &self.points[slice[mid]];
        let d = q.dist2(p);
        if d < *best {
            *best = d;
        }
        let axis = depth % 3;
        let diff = q.coord(axis) - p.coord(axis);
        let (near, far) = if diff < 0.0 {
            (&slice[..mid], &slice[mid + 1..])
        } else {
            (&slice[mid + 1..], &slice[..mid])
        };
        self.search(q, near, depth + 1, best);
        if diff * diff < *best {
            self.search(q, far, depth + 1, best);
        }
    }
}

fn build(points: &[Point3], slice: &mut [usize], depth: usize) {
    if slice.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |a, b| {
        points[*a].coord(axis).total_cmp(&points[*b].coord(axis))
    });
    let (left, right) = slice.split_at_mut(mid);
    build(points, left, depth + 1);
    build(points, &mut right[1..], depth + 1);
}

fn one_way(from: &PointCloud, to: &PointCloud) -> f64 {
    let tree = KdTree::new(&to.points);
    let d: Vec<f64> = crate::par::map_range(from.len(), |k| tree.nearest_dist2(&from.points[k]));
    d.iter().sum::<f64>() / from.len() as f64
}

/// Symmetric Chamfer distance with squared nearest-neighbour distances, m².
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("chamfer of an empty cloud".into()));
    }
    Ok(one_way(a, b) + one_way(b, a))
}

/// O(N·M) reference implementation of [`chamfer`].
pub fn chamfer_brute_force(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("chamfer of an empty cloud".into()));
    }
    let side = |x: &PointCloud, y: &PointCloud| {
        x.points
            .iter()
            .map(|p| y.points.iter().map(|q| p.dist2(q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    Ok(side(a, b) + side(b, a))
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scene_id: u64,
    pub method: String,
    pub power: f64,
    pub rmse_m: f64,
    pub chamfer_m2: f64,
    pub coverage: f64,
}

pub const METRIC_CSV_HEADER: &str = "scene_id,method,power,rmse_m,chamfer_m2,coverage";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.9e},{:.9e},{:.6}",
            self.scene_id, self.method, self.power, self.rmse_m, self.chamfer_m2, self.coverage
        )
    }
}
