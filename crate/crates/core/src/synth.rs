//! Seeded synthetic forests and submap scans with known poses.
//!
//! A scene is a low-frequency terrain with trees (trunk cylinder plus a
//! canopy blob). The scene is turned into a fixed world point set; a submap
//! keeps the world points within the scan radius of its pose, thinned with
//! a range-dependent probability that is decided per world point, so two
//! visits of the same place see largely the same points.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::cloud::{PlanarIndex, Point3, PointCloud, Pose};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    /// Side of the square scene, centered on the origin.
    pub size: f64,
    /// Expected trees per square meter.
    pub tree_density: f64,
    pub trunk_radius: [f64; 2],
    pub tree_height: [f64; 2],
    /// Range of the canopy base height; always at least 5 m.
    pub canopy_base: [f64; 2],
    pub canopy_radius: [f64; 2],
    /// Number of terrain sinusoids, at most 5.
    pub terrain_waves: usize,
    /// Bound on the summed sinusoid amplitudes, at most 2 m.
    pub terrain_amplitude: f64,
    /// Understory points per square meter, below 1 m above terrain.
    pub understory_density: f64,
    pub ground_spacing: f64,
    pub trunk_spacing: f64,
    /// Canopy points per cubic meter of blob volume.
    pub canopy_density: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams::dense()
    }
}

impl SceneParams {
    /// Tall, dense stand.
    pub fn dense() -> Self {
        SceneParams {
            size: 200.0,
            tree_density: 0.03,
            trunk_radius: [0.1, 0.4],
            tree_height: [8.0, 20.0],
            canopy_base: [5.0, 7.0],
            canopy_radius: [1.5, 3.0],
            terrain_waves: 4,
            terrain_amplitude: 2.0,
            understory_density: 0.3,
            ground_spacing: 0.5,
            trunk_spacing: 0.15,
            canopy_density: 0.6,
        }
    }

    /// Short, sparse stand.
    pub fn sparse() -> Self {
        SceneParams {
            tree_density: 0.008,
            tree_height: [8.0, 12.0],
            ..SceneParams::dense()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, "must be positive"))
            }
        };
        pos("synth.scene.size", self.size)?;
        pos("synth.scene.ground_spacing", self.ground_spacing)?;
        pos("synth.scene.trunk_spacing", self.trunk_spacing)?;
        for (key, v) in [
            ("synth.scene.tree_density", self.tree_density),
            ("synth.scene.understory_density", self.understory_density),
            ("synth.scene.canopy_density", self.canopy_density),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be non-negative"));
            }
        }
        for (key, r) in [
            ("synth.scene.trunk_radius", self.trunk_radius),
            ("synth.scene.tree_height", self.tree_height),
            ("synth.scene.canopy_base", self.canopy_base),
            ("synth.scene.canopy_radius", self.canopy_radius),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return Err(Error::config(key, "need 0 < min <= max"));
            }
        }
        if self.canopy_base[0] < 5.0 {
            return Err(Error::config(
                "synth.scene.canopy_base",
                "canopy must start at 5 m or higher",
            ));
        }
        if self.canopy_base[1] >= self.tree_height[0] {
            return Err(Error::config(
                "synth.scene.canopy_base",
                "must stay below the shortest tree",
            ));
        }
        if self.terrain_waves > 5 {
            return Err(Error::config("synth.scene.terrain_waves", "at most 5"));
        }
        if !(0.0..=2.0).contains(&self.terrain_amplitude) {
            return Err(Error::config(
                "synth.scene.terrain_amplitude",
                "must be in [0, 2]",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Wave {
    pub amplitude: f64,
    pub kx: f64,
    pub ky: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub height: f64,
    pub canopy_base: f64,
    pub canopy_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestScene {
    pub seed: u64,
    pub params: SceneParams,
    pub waves: Vec<Wave>,
    pub trees: Vec<Tree>,
}

/// Minimum clearance between neighboring trunks.
const TRUNK_GAP: f64 = 0.1;
const MAX_PLACEMENT_TRIES: usize = 10_000;

impl ForestScene {
    pub fn terrain(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|w| w.amplitude * (w.kx * x + w.ky * y + w.phase).sin())
            .sum()
    }

    pub fn half_size(&self) -> f64 {
        self.params.size / 2.0
    }
}

pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<ForestScene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waves = Vec::with_capacity(params.terrain_waves);
    if params.terrain_waves > 0 {
        let raw: Vec<f64> = (0..params.terrain_waves)
            .map(|_| rng.random_range(0.2..1.0))
            .collect();
        let total: f64 = raw.iter().sum();
        for a in raw {
            let wavelength = rng.random_range(60.0..200.0);
            let dir = rng.random_range(0.0..TAU);
            let k = TAU / wavelength;
            waves.push(Wave {
                amplitude: a / total * params.terrain_amplitude,
                kx: k * dir.cos(),
                ky: k * dir.sin(),
                phase: rng.random_range(0.0..TAU),
            });
        }
    }
    let half = params.size / 2.0;
    let mean = params.tree_density * params.size * params.size;
    let count = if mean > 0.0 {
        Poisson::new(mean)
            .map_err(|e| Error::config("synth.scene.tree_density", e.to_string()))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    let max_r = params.trunk_radius[1];
    let cell = 2.0 * max_r + TRUNK_GAP;
    let dims = (params.size / cell).ceil() as usize + 1;
    let mut grid: Vec<Vec<usize>> = vec![Vec::new(); dims * dims];
    let cell_of = |v: f64| (((v + half) / cell) as usize).min(dims - 1);
    let mut trees: Vec<Tree> = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = rng.random_range(params.trunk_radius[0]..=params.trunk_radius[1]);
        let height = rng.random_range(params.tree_height[0]..=params.tree_height[1]);
        let canopy_base = rng.random_range(params.canopy_base[0]..=params.canopy_base[1]);
        let canopy_radius = rng.random_range(params.canopy_radius[0]..=params.canopy_radius[1]);
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let x = rng.random_range(-half..half);
            let y = rng.random_range(-half..half);
            let (ci, cj) = (cell_of(x), cell_of(y));
            let clear = (ci.saturating_sub(1)..=(ci + 1).min(dims - 1)).all(|i| {
                (cj.saturating_sub(1)..=(cj + 1).min(dims - 1)).all(|j| {
                    grid[i * dims + j].iter().all(|&t| {
                        let o = &trees[t];
                        (o.x - x).hypot(o.y - y) >= o.radius + radius + TRUNK_GAP
                    })
                })
            });
            if clear {
                grid[ci * dims + cj].push(trees.len());
                trees.push(Tree {
                    x,
                    y,
                    radius,
                    height,
                    canopy_base,
                    canopy_radius,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::DegenerateInput(
                "tree density too high to place trunks".into(),
            ));
        }
    }
    Ok(ForestScene {
        seed,
        params: params.clone(),
        waves,
        trees,
    })
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit_hash(seed: u64, a: u64, b: u64) -> f64 {
    (mix(seed, a, b) >> 11) as f64 / (1u64 << 53) as f64
}

/// Terrain, understory and trunk points. These never change between visits.
pub fn static_points(scene: &ForestScene) -> Vec<Point3> {
    let p = &scene.params;
    let half = scene.half_size();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(scene.seed, 1, 0));
    let mut pts = Vec::new();
    let n = (p.size / p.ground_spacing).round() as usize;
    for i in 0..n {
        for j in 0..n {
            let x = -half + (i as f64 + rng.random_range(0.0..1.0)) * p.ground_spacing;
            let y = -half + (j as f64 + rng.random_range(0.0..1.0)) * p.ground_spacing;
            pts.push(Point3::new(x, y, scene.terrain(x, y)));
        }
    }
    let under = (p.understory_density * p.size * p.size).round() as usize;
    for _ in 0..under {
        let x = rng.random_range(-half..half);
        let y = rng.random_range(-half..half);
        let h = rng.random_range(0.05..1.0);
        pts.push(Point3::new(x, y, scene.terrain(x, y) + h));
    }
    for t in &scene.trees {
        let ground = scene.terrain(t.x, t.y);
        let around = ((TAU * t.radius / p.trunk_spacing).ceil() as usize).max(6);
        let up = ((t.canopy_base + 1.0) / p.trunk_spacing).ceil() as usize;
        for k in 0..up {
            let z = ground + k as f64 * p.trunk_spacing;
            let offset = rng.random_range(0.0..TAU);
            for a in 0..around {
                let ang = offset + a as f64 * TAU / around as f64;
                pts.push(Point3::new(
                    t.x + t.radius * ang.cos(),
                    t.y + t.radius * ang.sin(),
                    z,
                ));
            }
        }
    }
    pts
}

/// Canopy points for one foliage state. `variant` 0 is the base state;
/// other variants re-randomize each blob's extent, offset and fill.
pub fn canopy_points(scene: &ForestScene, variant: u64) -> Vec<Point3> {
    (0..scene.trees.len())
        .flat_map(|ti| tree_canopy(scene, ti, variant))
        .collect()
}

/// Foliage of tree `ti`: points inside an ellipsoid resting on the canopy
/// base.
pub fn tree_canopy(scene: &ForestScene, ti: usize, variant: u64) -> Vec<Point3> {
    let t = &scene.trees[ti];
    let mut rng = ChaCha8Rng::seed_from_u64(mix(scene.seed, 2 + ti as u64, variant));
    let ground = scene.terrain(t.x, t.y);
    let (rx, cx, cy, fill) = if variant == 0 {
        (t.canopy_radius, t.x, t.y, 1.0)
    } else {
        (
            t.canopy_radius * rng.random_range(0.6..1.4),
            t.x + rng.random_range(-1.0..1.0),
            t.y + rng.random_range(-1.0..1.0),
            rng.random_range(0.3..1.5),
        )
    };
    let rz = (t.height - t.canopy_base) / 2.0;
    let cz = t.canopy_base + rz;
    let volume = 4.0 / 3.0 * PI * rx * rx * rz;
    let n = (volume * scene.params.canopy_density * fill).round() as usize;
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let (u, v, w): (f64, f64, f64) = (
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if u * u + v * v + w * w <= 1.0 {
            pts.push(Point3::new(cx + u * rx, cy + v * rx, ground + cz + w * rz));
        }
    }
    pts
}

/// Which traversal produced a submap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visit {
    First,
    Revisit,
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanParams {
    pub radius: f64,
    /// Keep probability at the scan center and at the scan radius; linear
    /// in between.
    pub keep_near: f64,
    pub keep_far: f64,
    /// Per-visit coordinate noise (standard deviation, meters).
    pub noise: f64,
    /// Re-randomize canopy foliage on every pass after the first.
    pub seasonal: bool,
    /// Optional blind wedge `[start, width]` in degrees, measured
    /// counter-clockwise from the direction of travel.
    pub blind_sector: Option<[f64; 2]>,
}

impl Default for ScanParams {
    fn default() -> Self {
        ScanParams {
            radius: 30.0,
            keep_near: 0.9,
            keep_far: 0.3,
            noise: 0.02,
            seasonal: false,
            blind_sector: None,
        }
    }
}

impl ScanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::config("synth.scan.radius", "must be positive"));
        }
        for (k, v) in [
            ("synth.scan.keep_near", self.keep_near),
            ("synth.scan.keep_far", self.keep_far),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(k, "must be in [0, 1]"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("synth.scan.noise", "must be non-negative"));
        }
        if let Some([_, w]) = self.blind_sector {
            if !(0.0..=360.0).contains(&w) {
                return Err(Error::config(
                    "synth.scan.blind_sector",
                    "width must be in [0, 360]",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryParams {
    pub center: [f64; 2],
    pub loop_radius: f64,
    /// Distance between consecutive submaps.
    pub spacing: f64,
    pub speed: f64,
    /// Largest lateral offset of the second pass.
    pub revisit_offset: f64,
    /// Standard deviation of the yaw perturbation, radians.
    pub yaw_jitter: f64,
    /// Fraction of the loop driven backwards after the two passes.
    pub reverse_fraction: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        TrajectoryParams {
            center: [0.0, 0.0],
            loop_radius: 25.0,
            spacing: 5.0,
            speed: 1.0,
            revisit_offset: 1.0,
            yaw_jitter: 0.05,
            reverse_fraction: 0.5,
        }
    }
}

/// One submap-producing pose along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub timestamp: f64,
    pub pose: Pose,
    /// Direction of travel in the world frame.
    pub heading: f64,
    pub visit: Visit,
    /// Zero for the first pass, then one per later traversal.
    pub pass: u64,
}

/// Closed loop driven twice, then a partial reverse pass.
pub fn loop_trajectory(
    scene: &ForestScene,
    tp: &TrajectoryParams,
    seed: u64,
) -> Result<Vec<TrajectoryPoint>> {
    if !(tp.loop_radius > 0.0 && tp.spacing > 0.0 && tp.speed > 0.0) {
        return Err(Error::config(
            "synth.trajectory",
            "radius, spacing and speed must be positive",
        ));
    }
    if !(0.0..=1.0).contains(&tp.reverse_fraction) {
        return Err(Error::config(
            "synth.trajectory.reverse_fraction",
            "must be in [0, 1]",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 3, 0));
    let yaw = Normal::new(0.0, tp.yaw_jitter.max(0.0))
        .map_err(|e| Error::config("synth.trajectory.yaw_jitter", e.to_string()))?;
    let circumference = TAU * tp.loop_radius;
    let n = (circumference / tp.spacing).floor().max(1.0) as usize;
    let step = TAU / n as f64;
    let dt = circumference / n as f64 / tp.speed;
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut push = |theta: f64,
                    radial: f64,
                    forward: bool,
                    visit: Visit,
                    pass: u64,
                    t: f64,
                    rng: &mut ChaCha8Rng| {
        let r = tp.loop_radius + radial;
        let x = tp.center[0] + r * theta.cos();
        let y = tp.center[1] + r * theta.sin();
        let heading = theta + if forward { PI / 2.0 } else { -PI / 2.0 };
        let pose = Pose::from_xyz_yaw([x, y, scene.terrain(x, y)], yaw.sample(rng));
        out.push(TrajectoryPoint {
            timestamp: t,
            pose,
            heading,
            visit,
            pass,
        });
    };
    for k in 0..n {
        push(k as f64 * step, 0.0, true, Visit::First, 0, t, &mut rng);
        t += dt;
    }
    for k in 0..n {
        let off = rng.random_range(-tp.revisit_offset..=tp.revisit_offset);
        push(k as f64 * step, off, true, Visit::Revisit, 1, t, &mut rng);
        t += dt;
    }
    let nrev = (tp.reverse_fraction * n as f64).round() as usize;
    for k in 0..nrev {
        let off = rng.random_range(-tp.revisit_offset..=tp.revisit_offset);
        let theta = -(k as f64) * step;
        push(theta, off, false, Visit::Reverse, 2, t, &mut rng);
        t += dt;
    }
    Ok(out)
}

/// World point set for one foliage state, with an index for range queries.
pub struct WorldMap {
    pub points: Vec<Point3>,
    index: PlanarIndex,
    variant: u64,
}

impl WorldMap {
    pub fn build(scene: &ForestScene, variant: u64) -> Self {
        let mut points = static_points(scene);
        points.extend(canopy_points(scene, variant));
        let index = PlanarIndex::from_xy(points.iter().map(|p| [p.x, p.y]).collect(), 2.0);
        WorldMap {
            points,
            index,
            variant,
        }
    }

    pub fn variant(&self) -> u64 {
        self.variant
    }
}

fn angle_in_wedge(angle: f64, start: f64, width: f64) -> bool {
    let rel = (angle - start).rem_euclid(TAU);
    rel < width
}

/// Scans `map` from `at`, returning the cloud in the submap's local frame.
/// `visit_seed` drives the per-visit noise only.
pub fn scan(
    map: &WorldMap,
    scene_seed: u64,
    at: &TrajectoryPoint,
    sp: &ScanParams,
    visit_seed: u64,
) -> PointCloud {
    let [px, py, _] = at.pose.translation;
    let inv = at.pose.inverse();
    let mut rng = ChaCha8Rng::seed_from_u64(visit_seed);
    let noise = Normal::new(0.0, sp.noise).expect("noise validated");
    let wedge = sp
        .blind_sector
        .map(|[s, w]| (s.to_radians(), w.to_radians()));
    let mut out = Vec::new();
    for (i, d) in map.index.within(px, py, sp.radius) {
        let p = map.points[i];
        let keep = sp.keep_near + (sp.keep_far - sp.keep_near) * d / sp.radius;
        if unit_hash(scene_seed ^ 0x5eed, i as u64, map.variant) >= keep {
            continue;
        }
        if let Some((s, w)) = wedge {
            let az = (p.y - py).atan2(p.x - px) - at.heading;
            if angle_in_wedge(az, s, w) {
                continue;
            }
        }
        let mut q = p;
        if sp.noise > 0.0 {
            q.x += noise.sample(&mut rng);
            q.y += noise.sample(&mut rng);
            q.z += noise.sample(&mut rng);
        }
        out.push(inv.apply(&q));
    }
    PointCloud::new(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSubmap {
    pub id: String,
    pub sequence: String,
    pub timestamp: f64,
    pub pose: Pose,
    pub visit: Visit,
    pub cloud: PointCloud,
}

/// Scans every trajectory point; submaps are generated in parallel and
/// seeded per index.
pub fn sample_submaps(
    scene: &ForestScene,
    sequence: &str,
    trajectory: &[TrajectoryPoint],
    sp: &ScanParams,
) -> Result<Vec<SyntheticSubmap>> {
    sp.validate()?;
    let mut variants: Vec<u64> = trajectory
        .iter()
        .map(|t| if sp.seasonal { t.pass } else { 0 })
        .collect();
    variants.sort_unstable();
    variants.dedup();
    let maps: Vec<WorldMap> = par::map(&variants, |&v| WorldMap::build(scene, v));
    let seq_hash = sequence.bytes().fold(0u64, |h, b| mix(h, b as u64, 7));
    let idx: Vec<usize> = (0..trajectory.len()).collect();
    Ok(par::map(&idx, |&k| {
        let at = &trajectory[k];
        let v = if sp.seasonal { at.pass } else { 0 };
        let map = maps
            .iter()
            .find(|m| m.variant == v)
            .expect("map for variant");
        let cloud = scan(map, scene.seed, at, sp, mix(scene.seed, seq_hash, k as u64));
        SyntheticSubmap {
            id: format!("{sequence}_{k:04}"),
            sequence: sequence.to_string(),
            timestamp: at.timestamp,
            pose: at.pose,
            visit: at.visit,
            cloud,
        }
    }))
}

/// Full synthetic dataset description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub scene: SceneParams,
    pub scan: ScanParams,
    /// One entry per sequence, all in the same scene.
    pub sequences: Vec<SequenceSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub name: String,
    pub trajectory: TrajectoryParams,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            scene: SceneParams::dense(),
            scan: ScanParams::default(),
            sequences: vec![
                SequenceSpec {
                    name: "train".into(),
                    trajectory: TrajectoryParams {
                        center: [-45.0, 0.0],
                        ..TrajectoryParams::default()
                    },
                },
                SequenceSpec {
                    name: "test".into(),
                    trajectory: TrajectoryParams {
                        center: [45.0, 0.0],
                        ..TrajectoryParams::default()
                    },
                },
            ],
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.scan.validate()?;
        if self.sequences.is_empty() {
            return Err(Error::config(
                "synth.sequences",
                "need at least one sequence",
            ));
        }
        let mut names: Vec<&str> = self.sequences.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config(
                "synth.sequences",
                "sequence names must be unique",
            ));
        }
        Ok(())
    }
}

/// Scene plus all sequences for `seed`.
pub fn synthesize(seed: u64, params: &SynthParams) -> Result<(ForestScene, Vec<SyntheticSubmap>)> {
    params.validate()?;
    let scene = generate_scene(seed, &params.scene)?;
    let mut out = Vec::new();
    for (i, s) in params.sequences.iter().enumerate() {
        let traj = loop_trajectory(&scene, &s.trajectory, mix(seed, 11, i as u64))?;
        out.extend(sample_submaps(&scene, &s.name, &traj, &params.scan)?);
    }
    Ok((scene, out))
}
