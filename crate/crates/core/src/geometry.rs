//! Beam codebook geometry: angle grids, UPA steering vectors, distance
//! matrices and their point-cloud image.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ensure_same_shape, Grid};

/// Codebook angle sets. Azimuths index grid rows, elevations index columns.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleGrid {
    azimuths: Vec<f64>,
    elevations: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AngleGridConfig {
    pub w: usize,
    pub h: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
}

impl Default for AngleGridConfig {
    // Downward-looking band: every beam meets the ground inside a 30 m
    // radius for BS heights in 20..25 m.
    fn default() -> Self {
        AngleGridConfig {
            w: 64,
            h: 64,
            elevation_min_deg: -85.0,
            elevation_max_deg: -40.0,
        }
    }
}

impl AngleGrid {
    pub fn new(azimuths: Vec<f64>, elevations: Vec<f64>) -> Result<Self> {
        if azimuths.is_empty() || elevations.is_empty() {
            return Err(Error::InvalidInput("angle grid must be non-empty".into()));
        }
        let increasing = |v: &[f64]| v.windows(2).all(|p| p[0] < p[1]);
        if !increasing(&azimuths) || !increasing(&elevations) {
            return Err(Error::InvalidInput(
                "angle lists must be strictly increasing".into(),
            ));
        }
        if azimuths.iter().any(|a| !a.is_finite() || *a < -PI || *a >= PI) {
            return Err(Error::InvalidInput("azimuths must lie in [-pi, pi)".into()));
        }
        if elevations
            .iter()
            .any(|e| !e.is_finite() || *e < -PI / 2.0 || *e > PI / 2.0)
        {
            return Err(Error::InvalidInput(
                "elevations must lie in [-pi/2, pi/2]".into(),
            ));
        }
        Ok(AngleGrid {
            azimuths,
            elevations,
        })
    }

    /// `w` azimuths evenly covering `[-pi, pi)` and `h` elevations spanning
    /// `[el_min, el_max]` inclusive.
    pub fn uniform(w: usize, h: usize, el_min: f64, el_max: f64) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidInput("angle grid must be non-empty".into()));
        }
        let az = (0..w)
            .map(|i| -PI + 2.0 * PI * i as f64 / w as f64)
            .collect();
        let el = if h == 1 {
            vec![el_min]
        } else {
            (0..h)
                .map(|j| el_min + (el_max - el_min) * j as f64 / (h - 1) as f64)
                .collect()
        };
        AngleGrid::new(az, el)
    }

    pub fn from_config(cfg: &AngleGridConfig) -> Result<Self> {
        AngleGrid::uniform(
            cfg.w,
            cfg.h,
            cfg.elevation_min_deg.to_radians(),
            cfg.elevation_max_deg.to_radians(),
        )
    }

    pub fn azimuths(&self) -> &[f64] {
        &self.azimuths
    }

    pub fn elevations(&self) -> &[f64] {
        &self.elevations
    }

    pub fn w(&self) -> usize {
        self.azimuths.len()
    }

    pub fn h(&self) -> usize {
        self.elevations.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.w(), self.h())
    }

    /// Unit vector of beam `(i, j)`: `(cos el cos az, cos el sin az, sin el)`.
    pub fn direction(&self, i: usize, j: usize) -> [f64; 3] {
        unit_direction(self.azimuths[i], self.elevations[j])
    }
}

pub fn unit_direction(azimuth: f64, elevation: f64) -> [f64; 3] {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    [ce * ca, ce * sa, se]
}

/// UPA steering vector with `n_t * n_t` entries, entry `(m, n)` at offset
/// `m * n_t + n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringVector {
    n_t: usize,
    entries: Vec<Complex64>,
}

impl SteeringVector {
    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn entry(&self, m: usize, n: usize) -> Complex64 {
        self.entries[m * self.n_t + n]
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Array response `|a(az0, el0)^H a(az, el)|`, the beam gain toward
    /// `(azimuth, elevation)` when steering at this vector's direction.
    pub fn gain_toward(&self, azimuth: f64, elevation: f64) -> Result<f64> {
        let other = make_steering_vector((azimuth, elevation), self.n_t)?;
        let dot: Complex64 = self
            .entries
            .iter()
            .zip(other.entries.iter())
            .map(|(a, b)| a.conj() * b)
            .sum();
        Ok(dot.norm())
    }
}

/// Steering vector of an `n_t x n_t` half-wavelength UPA toward
/// `(azimuth, theta)`. `theta` enters through `sin(theta)` exactly as the
/// array-response formula is written.
pub fn make_steering_vector(grid_point: (f64, f64), n_t: usize) -> Result<SteeringVector> {
    let (phi, theta) = grid_point;
    if !phi.is_finite() || !theta.is_finite() {
        return Err(Error::InvalidInput("steering angles must be finite".into()));
    }
    if n_t == 0 {
        return Err(Error::InvalidInput("n_t must be positive".into()));
    }
    let scale = 1.0 / n_t as f64;
    let u = theta.sin() * phi.cos();
    let v = theta.sin() * phi.sin();
    let mut entries = Vec::with_capacity(n_t * n_t);
    for m in 0..n_t {
        for n in 0..n_t {
            let phase = PI * (m as f64 * u + n as f64 * v);
            entries.push(Complex64::from_polar(scale, phase));
        }
    }
    Ok(SteeringVector { n_t, entries })
}

/// Range per beam plus validity mask. Invalid cells hold the sentinel 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    values: Grid<f64>,
    valid: Grid<bool>,
}

impl DistanceMatrix {
    pub fn new(mut values: Grid<f64>, valid: Grid<bool>) -> Result<Self> {
        ensure_same_shape(values.shape(), valid.shape())?;
        for (v, ok) in values.as_mut_slice().iter_mut().zip(valid.as_slice()) {
            if *ok {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "valid cell carries non-finite or negative range {v}"
                    )));
                }
            } else {
                *v = 0.0;
            }
        }
        Ok(DistanceMatrix { values, valid })
    }

    /// Every cell valid.
    pub fn full(values: Grid<f64>) -> Result<Self> {
        let valid = Grid::filled(values.w(), values.h(), true);
        DistanceMatrix::new(values, valid)
    }

    pub fn invalid(w: usize, h: usize) -> Self {
        DistanceMatrix {
            values: Grid::filled(w, h, 0.0),
            valid: Grid::filled(w, h, false),
        }
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    pub fn valid(&self) -> &Grid<bool> {
        &self.valid
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn w(&self) -> usize {
        self.values.w()
    }

    pub fn h(&self) -> usize {
        self.values.h()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if *self.valid.get(i, j) {
            Some(*self.values.get(i, j))
        } else {
            None
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.as_slice().iter().filter(|v| **v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.values.len().max(1) as f64
    }

    pub fn is_fully_valid(&self) -> bool {
        self.valid.as_slice().iter().all(|v| *v)
    }

    /// Multiply every valid range by `s` (used for metric/normalized units).
    pub fn scaled(&self, s: f64) -> Result<Self> {
        DistanceMatrix::new(self.values.map(|v| v * s), self.valid.clone())
    }

    pub fn into_parts(self) -> (Grid<f64>, Grid<bool>) {
        (self.values, self.valid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    #[inline]
    pub fn dist2(&self, o: &Point3) -> f64 {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        let dz = self.z - o.z;
        dx * dx + dy * dy + dz * dz
    }

    #[inline]
    pub fn coord(&self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Map every valid cell to `d * (cos el cos az, cos el sin az, sin el)`,
/// relative to the sensor. Points come out in azimuth-major cell order.
pub fn dm_to_pointcloud(dm: &DistanceMatrix, grid: &AngleGrid) -> Result<PointCloud> {
    ensure_same_shape(grid.shape(), dm.shape())?;
    let mut points = Vec::with_capacity(dm.valid_count());
    for i in 0..dm.w() {
        for j in 0..dm.h() {
            if let Some(d) = dm.get(i, j) {
                let u = grid.direction(i, j);
                points.push(Point3::new(d * u[0], d * u[1], d * u[2]));
            }
        }
    }
    Ok(PointCloud::new(points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn boresight_steering_is_flat() {
        let a = make_steering_vector((0.0, 0.0), 4).unwrap();
        assert_eq!(a.entries().len(), 16);
        for e in a.entries() {
            assert_abs_diff_eq!(e.re, 0.25, epsilon = 1e-15);
            assert_abs_diff_eq!(e.im, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_element_steering_is_unit() {
        let a = make_steering_vector((1.3, -0.4), 1).unwrap();
        assert_eq!(a.entries().len(), 1);
        assert_abs_diff_eq!(a.entries()[0].re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.entries()[0].im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn endfire_steering_alternates_along_m() {
        // sin(theta) = 1, cos(phi) = 1, sin(phi) = 0: entry = exp(j pi m) / 2
        let a = make_steering_vector((0.0, PI / 2.0), 2).unwrap();
        for n in 0..2 {
            assert_abs_diff_eq!(a.entry(0, n).re, 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(a.entry(1, n).re, -0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(a.entry(1, n).im, 0.0, epsilon = 1e-12);
        }
        assert_eq!(a.entry(0, 0), a.entry(0, 1));
        assert_eq!(a.entry(1, 0), a.entry(1, 1));
    }

    #[test]
    fn non_finite_angles_rejected() {
        assert!(matches!(
            make_steering_vector((f64::NAN, 0.0), 4),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn steering_gain_peaks_on_its_own_direction() {
        let a = make_steering_vector((0.3, 0.7), 4).unwrap();
        assert_abs_diff_eq!(a.gain_toward(0.3, 0.7).unwrap(), 1.0, epsilon = 1e-12);
        assert!(a.gain_toward(1.3, 0.2).unwrap() < 1.0);
    }

    fn one_cell(az: f64, el: f64, d: f64) -> Point3 {
        let grid = AngleGrid::new(vec![az], vec![el]).unwrap();
        let dm = DistanceMatrix::full(Grid::filled(1, 1, d)).unwrap();
        dm_to_pointcloud(&dm, &grid).unwrap().points[0]
    }

    #[test]
    fn pointcloud_hand_examples() {
        let p = one_cell(0.0, 0.0, 1.0);
        assert_abs_diff_eq!(p.x, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.z, 0.0, epsilon = 1e-15);

        let p = one_cell(PI / 2.0, 0.0, 2.0);
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.y, 2.0, epsilon = 1e-15);

        let p = one_cell(PI / 4.0, PI / 6.0, 5.0);
        assert_abs_diff_eq!(p.x, 3.061_862_178_478_973, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 3.061_862_178_478_973, epsilon = 1e-12);
        assert_abs_diff_eq!(p.z, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn invalid_cells_emit_nothing() {
        let grid = AngleGrid::uniform(3, 2, -0.5, 0.5).unwrap();
        let mut valid = Grid::filled(3, 2, true);
        valid.set(1, 1, false);
        let dm = DistanceMatrix::new(Grid::filled(3, 2, 4.0), valid).unwrap();
        assert_eq!(dm_to_pointcloud(&dm, &grid).unwrap().len(), 5);
        assert_eq!(*dm.values().get(1, 1), 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let grid = AngleGrid::uniform(3, 2, -0.5, 0.5).unwrap();
        let dm = DistanceMatrix::full(Grid::filled(2, 3, 1.0)).unwrap();
        assert!(matches!(
            dm_to_pointcloud(&dm, &grid),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn negative_valid_range_rejected() {
        assert!(DistanceMatrix::full(Grid::filled(1, 1, -1.0)).is_err());
    }

    #[test]
    fn grid_rejects_out_of_range_angles() {
        assert!(AngleGrid::new(vec![PI], vec![0.0]).is_err());
        assert!(AngleGrid::new(vec![0.0, 0.0], vec![0.0]).is_err());
        assert!(AngleGrid::new(vec![0.0], vec![2.0]).is_err());
    }

    proptest! {
        #[test]
        fn steering_norm_is_one(phi in -PI..PI, theta in -PI / 2.0..PI / 2.0, n_t in 1usize..9) {
            let a = make_steering_vector((phi, theta), n_t).unwrap();
            prop_assert!((a.norm() - 1.0).abs() < 1e-12);
            for e in a.entries() {
                prop_assert!((e.norm() - 1.0 / n_t as f64).abs() < 1e-12);
            }
        }

        #[test]
        fn ranges_survive_the_pointcloud_round_trip(
            w in 1usize..6, h in 1usize..6, seed in 0u64..1000,
        ) {
            let grid = AngleGrid::uniform(w, h, -1.2, 1.2).unwrap();
            let values = Grid::from_fn(w, h, |i, j| {
                1.0 + ((seed as f64 + 0.37 * i as f64 + 1.91 * j as f64).sin().abs()) * 50.0
            });
            let dm = DistanceMatrix::full(values.clone()).unwrap();
            let pc = dm_to_pointcloud(&dm, &grid).unwrap();
            for (p, d) in pc.points.iter().zip(values.as_slice()) {
                prop_assert!((p.norm() - d).abs() <= 1e-9 * d);
            }
        }

        #[test]
        fn distinct_cells_give_distinct_points(w in 2usize..6, h in 2usize..6) {
            let grid = AngleGrid::uniform(w, h, -1.2, 1.2).unwrap();
            let dm = DistanceMatrix::full(Grid::filled(w, h, 3.0)).unwrap();
            let pc = dm_to_pointcloud(&dm, &grid).unwrap();
            for a in 0..pc.len() {
                for b in (a + 1)..pc.len() {
                    prop_assert!(pc.points[a].dist2(&pc.points[b]) > 1e-18);
                }
            }
        }
    }
}
