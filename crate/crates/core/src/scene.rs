//! Random outdoor-like scenes built from analytic primitives, and exact
//! ray casting of ground-truth distance matrices from the base station.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AngleGrid, DistanceMatrix};
use crate::grid::Grid;
use crate::par;
use crate::rng::{self, Domain};

/// Per-beam radar cross section of the surface each ray hits.
pub type RcsMap = Grid<f64>;

const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box with the given half extents along x, y, z.
    Box { half: [f64; 3] },
    /// Cylinder with a vertical axis through the primitive center.
    Cylinder { radius: f64, half_height: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    pub rcs: f64,
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        let sizes: Vec<f64> = match &self.shape {
            Shape::Sphere { radius } => vec![*radius],
            Shape::Box { half } => half.to_vec(),
            Shape::Cylinder {
                radius,
                half_height,
            } => vec![*radius, *half_height],
        };
        if sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidInput("primitive sizes must be positive".into()));
        }
        if !(self.rcs.is_finite() && self.rcs > 0.0) {
            return Err(Error::InvalidInput("primitive rcs must be positive".into()));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("primitive center must be finite".into()));
        }
        Ok(())
    }

    /// Radius of the smallest vertical cylinder around the center that
    /// contains the primitive.
    pub fn footprint_radius(&self) -> f64 {
        match &self.shape {
            Shape::Sphere { radius } => *radius,
            Shape::Box { half } => half[0].hypot(half[1]),
            Shape::Cylinder { radius, .. } => *radius,
        }
    }

    /// Smallest ray parameter `t > 0` at which `origin + t * dir` enters or
    /// touches the surface. `dir` must be a unit vector.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let o = [
            origin[0] - self.center[0],
            origin[1] - self.center[1],
            origin[2] - self.center[2],
        ];
        match &self.shape {
            Shape::Sphere { radius } => {
                let b = dot(o, dir);
                let c = dot(o, o) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                smallest_positive(&[-b - s, -b + s])
            }
            Shape::Box { half } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    if dir[a].abs() < 1e-300 {
                        if o[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[a];
                    let (mut lo, mut hi) = ((-half[a] - o[a]) * inv, (half[a] - o[a]) * inv);
                    if lo > hi {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    t0 = t0.max(lo);
                    t1 = t1.min(hi);
                }
                if t0 > t1 {
                    return None;
                }
                smallest_positive(&[t0, t1])
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let mut hits = Vec::with_capacity(4);
                let a = dir[0] * dir[0] + dir[1] * dir[1];
                if a > 1e-300 {
                    let b = o[0] * dir[0] + o[1] * dir[1];
                    let c = o[0] * o[0] + o[1] * o[1] - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / a, (-b + s) / a] {
                            if (o[2] + t * dir[2]).abs() <= *half_height {
                                hits.push(t);
                            }
                        }
                    }
                }
                if dir[2].abs() > 1e-300 {
                    for cap in [-*half_height, *half_height] {
                        let t = (cap - o[2]) / dir[2];
                        let x = o[0] + t * dir[0];
                        let y = o[1] + t * dir[1];
                        if x * x + y * y <= radius * radius {
                            hits.push(t);
                        }
                    }
                }
                smallest_positive(&hits)
            }
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn smallest_positive(ts: &[f64]) -> Option<f64> {
    ts.iter()
        .copied()
        .filter(|t| *t > HIT_EPS)
        .min_by(|a, b| a.total_cmp(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub bs_position: [f64; 3],
    pub ground_plane_z: f64,
    pub ground_rcs: f64,
    pub sensing_radius: f64,
}

impl Scene {
    pub fn empty(bs_height: f64, sensing_radius: f64, ground_rcs: f64) -> Self {
        Scene {
            primitives: Vec::new(),
            bs_position: [0.0, 0.0, bs_height],
            ground_plane_z: 0.0,
            ground_rcs,
            sensing_radius,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Nearest hit along one ray: `(distance, rcs)`, or `None` when the
    /// ray leaves the sensing radius without hitting anything.
    pub fn cast(&self, dir: [f64; 3]) -> Option<(f64, f64)> {
        let o = self.bs_position;
        let mut best: Option<(f64, f64)> = None;
        for p in &self.primitives {
            if let Some(t) = p.intersect(o, dir) {
                if best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, p.rcs));
                }
            }
        }
        if dir[2] < 0.0 {
            let t = (self.ground_plane_z - o[2]) / dir[2];
            if t > HIT_EPS && best.is_none_or(|(b, _)| t < b) {
                best = Some((t, self.ground_rcs));
            }
        }
        let (t, rcs) = best?;
        let horizontal = (t * dir[0]).hypot(t * dir[1]);
        (horizontal <= self.sensing_radius * (1.0 + 1e-12)).then_some((t, rcs))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenConfig {
    pub seed: u64,
    /// Inclusive object-count range.
    pub n_objects: [usize; 2],
    pub sphere_diameter: [f64; 2],
    pub box_side: [f64; 2],
    pub cylinder_diameter: [f64; 2],
    pub cylinder_height: [f64; 2],
    pub rcs: [f64; 2],
    pub ground_rcs: f64,
    pub bs_height: [f64; 2],
    pub sensing_radius: f64,
    /// Minimum horizontal gap between an object and the BS mast.
    pub mast_clearance: f64,
    pub max_placement_attempts: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            seed: 0,
            n_objects: [3, 8],
            sphere_diameter: [1.0, 6.0],
            box_side: [1.0, 6.0],
            cylinder_diameter: [1.0, 6.0],
            cylinder_height: [1.0, 6.0],
            rcs: [0.5, 2.0],
            ground_rcs: 0.5,
            bs_height: [20.0, 25.0],
            sensing_radius: 30.0,
            mast_clearance: 1.0,
            max_placement_attempts: 200,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) || (positive && r[0] <= 0.0) {
        return Err(Error::Config(format!("{name} range {r:?} is invalid")));
    }
    Ok(())
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects[0] > self.n_objects[1] {
            return Err(Error::Config("n_objects range is empty".into()));
        }
        check_range("sphere_diameter", self.sphere_diameter, true)?;
        check_range("box_side", self.box_side, true)?;
        check_range("cylinder_diameter", self.cylinder_diameter, true)?;
        check_range("cylinder_height", self.cylinder_height, true)?;
        check_range("rcs", self.rcs, true)?;
        check_range("bs_height", self.bs_height, true)?;
        if !(self.ground_rcs > 0.0 && self.sensing_radius > 0.0 && self.mast_clearance >= 0.0) {
            return Err(Error::Config(
                "ground_rcs and sensing_radius must be positive".into(),
            ));
        }
        Ok(())
    }
}

struct Draws(rand_chacha::ChaCha8Rng);

impl Draws {
    fn uniform(&mut self, r: [f64; 2]) -> f64 {
        r[0] + (r[1] - r[0]) * rng::uniform(&mut self.0)
    }

    fn int(&mut self, lo: usize, hi: usize) -> usize {
        let span = (hi - lo + 1) as f64;
        lo + ((rng::uniform(&mut self.0) * span) as usize).min(hi - lo)
    }
}

/// Scene `scene_id` of the family defined by `cfg`. Objects rest on the
/// ground, stay inside the sensing radius, clear the mast, and do not
/// overlap each other's footprints.
pub fn generate_scene(cfg: &SceneGenConfig, scene_id: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut d = Draws(rng::stream(cfg.seed, Domain::Scene, scene_id));
    let height = d.uniform(cfg.bs_height);
    let mut scene = Scene::empty(height, cfg.sensing_radius, cfg.ground_rcs);
    let k = d.int(cfg.n_objects[0], cfg.n_objects[1]);
    for n in 0..k {
        let shape = match d.int(0, 2) {
            0 => Shape::Sphere {
                radius: 0.5 * d.uniform(cfg.sphere_diameter),
            },
            1 => Shape::Box {
                half: [
                    0.5 * d.uniform(cfg.box_side),
                    0.5 * d.uniform(cfg.box_side),
                    0.5 * d.uniform(cfg.box_side),
                ],
            },
            _ => Shape::Cylinder {
                radius: 0.5 * d.uniform(cfg.cylinder_diameter),
                half_height: 0.5 * d.uniform(cfg.cylinder_height),
            },
        };
        let cz = match &shape {
            Shape::Sphere { radius } => *radius,
            Shape::Box { half } => half[2],
            Shape::Cylinder { half_height, .. } => *half_height,
        };
        let rcs = d.uniform(cfg.rcs);
        let mut placed = false;
        for _ in 0..cfg.max_placement_attempts {
            let mut p = Primitive {
                shape: shape.clone(),
                center: [0.0, 0.0, cz],
                rcs,
            };
            let fr = p.footprint_radius();
            let r_lo = cfg.mast_clearance + fr;
            let r_hi = cfg.sensing_radius - fr;
            if r_lo > r_hi {
                break;
            }
            // uniform over the annulus area
            let r = (r_lo * r_lo + (r_hi * r_hi - r_lo * r_lo) * rng::uniform(&mut d.0)).sqrt();
            let a = d.uniform([-std::f64::consts::PI, std::f64::consts::PI]);
            p.center[0] = r * a.cos();
            p.center[1] = r * a.sin();
            let clear = scene.primitives.iter().all(|q| {
                let gap = (p.center[0] - q.center[0]).hypot(p.center[1] - q.center[1]);
                gap > fr + q.footprint_radius()
            });
            if clear {
                scene.primitives.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place object {n} of scene {scene_id} after {} attempts",
                cfg.max_placement_attempts
            )));
        }
    }
    Ok(scene)
}

/// Nearest-hit distance and hit RCS for every beam of `grid`.
pub fn raycast_ground_truth(scene: &Scene, grid: &AngleGrid) -> Result<(DistanceMatrix, RcsMap)> {
    if grid.w() == 0 || grid.h() == 0 {
        return Err(Error::InvalidInput("angle grid is empty".into()));
    }
    for p in &scene.primitives {
        p.validate()?;
    }
    let (w, h) = grid.shape();
    let hits = par::map_range(w * h, |k| scene.cast(grid.direction(k / h, k % h)));
    let values = Grid::from_vec(w, h, hits.iter().map(|x| x.map_or(0.0, |v| v.0)).collect())?;
    let valid = Grid::from_vec(w, h, hits.iter().map(|x| x.is_some()).collect())?;
    let rcs = Grid::from_vec(w, h, hits.iter().map(|x| x.map_or(0.0, |v| v.1)).collect())?;
    Ok((DistanceMatrix::new(values, valid)?, rcs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{unit_direction, AngleGridConfig};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn contains(p: &Primitive, x: [f64; 3]) -> bool {
        let o = [x[0] - p.center[0], x[1] - p.center[1], x[2] - p.center[2]];
        match &p.shape {
            Shape::Sphere { radius } => dot(o, o) <= radius * radius,
            Shape::Box { half } => (0..3).all(|a| o[a].abs() <= half[a]),
            Shape::Cylinder {
                radius,
                half_height,
            } => o[0] * o[0] + o[1] * o[1] <= radius * radius && o[2].abs() <= *half_height,
        }
    }

    /// Marches the ray and bisects the first inside/outside transition,
    /// checking every primitive and the ground.
    fn march(scene: &Scene, dir: [f64; 3]) -> Option<f64> {
        let o = scene.bs_position;
        let at = |t: f64| [o[0] + t * dir[0], o[1] + t * dir[1], o[2] + t * dir[2]];
        let solid = |x: [f64; 3]| {
            x[2] <= scene.ground_plane_z || scene.primitives.iter().any(|p| contains(p, x))
        };
        let limit = 2.0 * scene.sensing_radius + o[2] + 1.0;
        let step = 1e-2;
        let mut t = 0.0;
        while t < limit {
            let next = t + step;
            if solid(at(next)) {
                let (mut lo, mut hi) = (t, next);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if solid(at(mid)) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                let hit = at(hi);
                let horizontal = (hit[0] - o[0]).hypot(hit[1] - o[1]);
                return (horizontal <= scene.sensing_radius).then_some(hi);
            }
            t = next;
        }
        None
    }

    #[test]
    fn empty_object_range_gives_ground_only() {
        let cfg = SceneGenConfig {
            n_objects: [0, 0],
            ..Default::default()
        };
        let s = generate_scene(&cfg, 4).unwrap();
        assert!(s.primitives.is_empty());
        assert!((20.0..=25.0).contains(&s.bs_position[2]));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneGenConfig {
            seed: 7,
            ..Default::default()
        };
        let a = generate_scene(&cfg, 3).unwrap();
        let b = generate_scene(&cfg, 3).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_ne!(a, generate_scene(&cfg, 4).unwrap());
    }

    #[test]
    fn object_count_in_range() {
        let cfg = SceneGenConfig {
            seed: 1,
            ..Default::default()
        };
        let s = generate_scene(&cfg, 0).unwrap();
        assert!((3..=8).contains(&s.primitives.len()));
        for id in 0..50 {
            let s = generate_scene(&cfg, id).unwrap();
            assert!((3..=8).contains(&s.primitives.len()));
            for p in &s.primitives {
                let r = p.center[0].hypot(p.center[1]);
                assert!(r - p.footprint_radius() >= cfg.mast_clearance - 1e-9);
                assert!(r + p.footprint_radius() <= cfg.sensing_radius + 1e-9);
                p.validate().unwrap();
            }
        }
    }

    #[test]
    fn infeasible_placement_errors() {
        let cfg = SceneGenConfig {
            sensing_radius: 3.0,
            sphere_diameter: [5.0, 6.0],
            box_side: [5.0, 6.0],
            cylinder_diameter: [5.0, 6.0],
            n_objects: [1, 1],
            ..Default::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn scene_json_round_trip() {
        let s = generate_scene(&SceneGenConfig::default(), 11).unwrap();
        assert_eq!(Scene::from_json(&s.to_json().unwrap()).unwrap(), s);
        assert!(s.to_json().unwrap().contains("\"shape\""));
    }

    #[test]
    fn sphere_straight_ahead() {
        let mut s = Scene::empty(20.0, 30.0, 1.0);
        s.primitives.push(Primitive {
            shape: Shape::Sphere { radius: 1.0 },
            center: [10.0, 0.0, 20.0],
            rcs: 3.0,
        });
        let grid = AngleGrid::new(vec![0.0], vec![0.0]).unwrap();
        let (dm, rcs) = raycast_ground_truth(&s, &grid).unwrap();
        assert!((dm.get(0, 0).unwrap() - 9.0).abs() < 1e-12);
        assert_eq!(*rcs.get(0, 0), 3.0);
    }

    #[test]
    fn straight_up_misses_and_straight_down_hits_ground() {
        let s = Scene::empty(20.0, 30.0, 0.7);
        let grid = AngleGrid::new(vec![0.0], vec![-PI / 2.0, PI / 2.0]).unwrap();
        let (dm, rcs) = raycast_ground_truth(&s, &grid).unwrap();
        assert!((dm.get(0, 0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(*rcs.get(0, 0), 0.7);
        assert_eq!(dm.get(0, 1), None);
    }

    #[test]
    fn ground_hit_beyond_radius_is_invalid() {
        let s = Scene::empty(20.0, 30.0, 1.0);
        // tan(10°) * 30 < 20: horizontal reach of a -10° beam is ~113 m
        assert!(s.cast(unit_direction(0.0, -10f64.to_radians())).is_none());
        assert!(s.cast(unit_direction(0.0, -60f64.to_radians())).is_some());
    }

    #[test]
    fn default_grid_is_fully_valid_for_every_height() {
        let grid = AngleGrid::from_config(&AngleGridConfig::default()).unwrap();
        for h in [20.0, 22.5, 25.0] {
            let (dm, _) = raycast_ground_truth(&Scene::empty(h, 30.0, 1.0), &grid).unwrap();
            assert!(dm.is_fully_valid());
        }
    }

    #[test]
    fn matches_marching_oracle() {
        let cfg = SceneGenConfig {
            seed: 5,
            ..Default::default()
        };
        let grid = AngleGrid::uniform(12, 9, -80f64.to_radians(), 10f64.to_radians()).unwrap();
        for id in 0..4 {
            let scene = generate_scene(&cfg, id).unwrap();
            let (dm, _) = raycast_ground_truth(&scene, &grid).unwrap();
            for i in 0..grid.w() {
                for j in 0..grid.h() {
                    let want = march(&scene, grid.direction(i, j));
                    match (dm.get(i, j), want) {
                        (Some(a), Some(b)) => assert!((a - b).abs() < 1e-6, "{a} vs {b}"),
                        (None, None) => {}
                        other => panic!("cell ({i},{j}) scene {id}: {other:?}"),
                    }
                }
            }
        }
    }

    #[test]
    fn distances_are_bounded() {
        let cfg = SceneGenConfig::default();
        let grid = AngleGrid::uniform(32, 16, -PI / 2.0, PI / 4.0).unwrap();
        for id in 0..5 {
            let scene = generate_scene(&cfg, id).unwrap();
            let (dm, _) = raycast_ground_truth(&scene, &grid).unwrap();
            let bound = 2.0 * scene.sensing_radius + scene.bs_position[2];
            for (d, v) in dm.values().as_slice().iter().zip(dm.valid().as_slice()) {
                if *v {
                    assert!(*d > 0.0 && *d <= bound);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn adding_a_primitive_never_increases_distance(
            x in -25.0f64..25.0, y in -25.0f64..25.0, r in 0.5f64..4.0, kind in 0usize..3
        ) {
            let base = generate_scene(&SceneGenConfig::default(), 2).unwrap();
            let grid = AngleGrid::uniform(16, 8, -PI / 2.0, 0.0).unwrap();
            let (before, _) = raycast_ground_truth(&base, &grid).unwrap();
            let shape = match kind {
                0 => Shape::Sphere { radius: r },
                1 => Shape::Box { half: [r, 0.5 * r, r] },
                _ => Shape::Cylinder { radius: r, half_height: 2.0 * r },
            };
            let mut more = base.clone();
            more.primitives.push(Primitive { shape, center: [x, y, r], rcs: 1.0 });
            let (after, _) = raycast_ground_truth(&more, &grid).unwrap();
            for i in 0..grid.w() {
                for j in 0..grid.h() {
                    if let Some(b) = before.get(i, j) {
                        let a = after.get(i, j);
                        prop_assert!(a.is_some_and(|a| a <= b + 1e-12));
                    }
                }
            }
        }
    }
}
