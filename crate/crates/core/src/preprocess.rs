//! Ground segmentation, terrain height removal and height-band cropping.

use serde::{Deserialize, Serialize};

use crate::cloud::{PlanarIndex, Point3, PointCloud};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Cell size of the ground-surface grid (m).
    pub ground_cell: f64,
    /// Max vertical distance to the surface for a ground label (m).
    pub ground_tolerance: f64,
    /// Initial ground-neighbor search radius (m).
    pub radius: f64,
    /// Radius increment when no ground neighbor is found (m).
    pub radius_step: f64,
    /// Largest search radius before a point is dropped (m).
    pub radius_max: f64,
    /// Kept height band `[band_lo, band_hi)` after normalization (m).
    pub band_lo: f64,
    pub band_hi: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            ground_cell: 0.3,
            ground_tolerance: 0.2,
            radius: 3.0,
            radius_step: 1.0,
            radius_max: 10.0,
            band_lo: 1.0,
            band_hi: 6.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(
                    format!("preprocess.{key}"),
                    "must be a positive number",
                ))
            }
        };
        pos("ground_cell", self.ground_cell)?;
        pos("ground_tolerance", self.ground_tolerance)?;
        pos("radius", self.radius)?;
        pos("radius_step", self.radius_step)?;
        pos("radius_max", self.radius_max)?;
        if self.radius > self.radius_max {
            return Err(Error::config(
                "preprocess.radius",
                "must not exceed radius_max",
            ));
        }
        if !(self.band_lo < self.band_hi) || !self.band_lo.is_finite() || !self.band_hi.is_finite()
        {
            return Err(Error::config("preprocess.band_lo", "must be below band_hi"));
        }
        Ok(())
    }
}

/// Partition of cloud indices into ground and non-ground, both ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundLabeling {
    pub ground: Vec<usize>,
    pub non_ground: Vec<usize>,
}

/// Regular grid of terrain heights sampled at cell centers.
#[derive(Debug, Clone)]
pub struct HeightGrid {
    origin: [f64; 2],
    cell: f64,
    nx: usize,
    ny: usize,
    heights: Vec<f64>,
}

impl HeightGrid {
    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn at_cell(&self, i: usize, j: usize) -> f64 {
        self.heights[i * self.ny + j]
    }

    /// Bilinear interpolation between cell centers, clamped at the border.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let axis = |v: f64, o: f64, n: usize| -> (usize, usize, f64) {
            let f = (v - o) / self.cell - 0.5;
            if f <= 0.0 || n == 1 {
                return (0, 0, 0.0);
            }
            let i0 = (f.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, if i0 == i1 { 0.0 } else { f - i0 as f64 })
        };
        let (i0, i1, tx) = axis(x, self.origin[0], self.nx);
        let (j0, j1, ty) = axis(y, self.origin[1], self.ny);
        let h00 = self.at_cell(i0, j0);
        let h01 = self.at_cell(i0, j1);
        let h10 = self.at_cell(i1, j0);
        let h11 = self.at_cell(i1, j1);
        let a = h00 + (h01 - h00) * ty;
        let b = h10 + (h11 - h10) * ty;
        a + (b - a) * tx
    }
}

/// Source of a terrain-height surface for ground labeling.
pub trait GroundEstimator {
    fn estimate(&self, cloud: &PointCloud, cell: f64) -> Result<HeightGrid>;
}

/// Per-cell minimum height, holes filled from the nearest populated cell,
/// then a 3×3 median.
#[derive(Debug, Clone, Copy, Default)]
pub struct GridMinimum;

impl GroundEstimator for GridMinimum {
    fn estimate(&self, cloud: &PointCloud, cell: f64) -> Result<HeightGrid> {
        if cloud.is_empty() {
            return Err(Error::DegenerateInput("empty cloud".into()));
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in cloud.iter() {
            lo = [lo[0].min(p.x), lo[1].min(p.y)];
            hi = [hi[0].max(p.x), hi[1].max(p.y)];
        }
        let nx = ((hi[0] - lo[0]) / cell) as usize + 1;
        let ny = ((hi[1] - lo[1]) / cell) as usize + 1;
        if nx.saturating_mul(ny) > 64_000_000 {
            return Err(Error::DegenerateInput(format!(
                "ground grid of {nx}x{ny} cells is too large; check for outliers"
            )));
        }
        let mut mins = vec![f64::INFINITY; nx * ny];
        for p in cloud.iter() {
            let i = (((p.x - lo[0]) / cell) as usize).min(nx - 1);
            let j = (((p.y - lo[1]) / cell) as usize).min(ny - 1);
            let m = &mut mins[i * ny + j];
            *m = m.min(p.z);
        }
        let filled = fill_from_nearest(&mins, nx, ny);
        let heights = median3x3(&filled, nx, ny);
        Ok(HeightGrid {
            origin: lo,
            cell,
            nx,
            ny,
            heights,
        })
    }
}

/// Replaces every empty (infinite) cell with the value of the nearest
/// populated cell in Euclidean index distance; ties go to the smallest
/// `(i, j)`.
fn fill_from_nearest(vals: &[f64], nx: usize, ny: usize) -> Vec<f64> {
    let populated = |i: isize, j: isize| -> Option<f64> {
        if i < 0 || j < 0 || i >= nx as isize || j >= ny as isize {
            return None;
        }
        let v = vals[i as usize * ny + j as usize];
        v.is_finite().then_some(v)
    };
    let max_ring = nx.max(ny) as isize;
    let solve = |idx: usize| -> f64 {
        let v = vals[idx];
        if v.is_finite() {
            return v;
        }
        let (ci, cj) = ((idx / ny) as isize, (idx % ny) as isize);
        let mut best: Option<(isize, isize, isize, f64)> = None;
        for r in 1..=max_ring {
            if let Some((d2, ..)) = best {
                if r * r > d2 {
                    break;
                }
            }
            let mut consider = |i: isize, j: isize| {
                if let Some(v) = populated(i, j) {
                    let d2 = (i - ci).pow(2) + (j - cj).pow(2);
                    let cand = (d2, i, j, v);
                    match best {
                        Some(b) if (b.0, b.1, b.2) <= (d2, i, j) => {}
                        _ => best = Some(cand),
                    }
                }
            };
            for d in -r..=r {
                consider(ci - r, cj + d);
                consider(ci + r, cj + d);
            }
            for d in (-r + 1)..r {
                consider(ci + d, cj - r);
                consider(ci + d, cj + r);
            }
        }
        best.map_or(0.0, |b| b.3)
    };
    par::map_range(nx * ny, solve)
}

fn median3x3(vals: &[f64], nx: usize, ny: usize) -> Vec<f64> {
    par::map_range(nx * ny, |idx| {
        let (i, j) = (idx / ny, idx % ny);
        let mut window = [0.0f64; 9];
        let mut n = 0;
        for a in i.saturating_sub(1)..=(i + 1).min(nx - 1) {
            for b in j.saturating_sub(1)..=(j + 1).min(ny - 1) {
                window[n] = vals[a * ny + b];
                n += 1;
            }
        }
        let w = &mut window[..n];
        w.sort_unstable_by(f64::total_cmp);
        w[n / 2]
    })
}

pub fn segment_ground(cloud: &PointCloud, cfg: &PreprocessConfig) -> Result<GroundLabeling> {
    segment_ground_with(&GridMinimum, cloud, cfg)
}

/// Labels points within `ground_tolerance` of the estimated surface as ground.
pub fn segment_ground_with(
    estimator: &dyn GroundEstimator,
    cloud: &PointCloud,
    cfg: &PreprocessConfig,
) -> Result<GroundLabeling> {
    if cloud.len() < 4 {
        return Err(Error::DegenerateInput(format!(
            "ground segmentation needs at least 4 points, got {}",
            cloud.len()
        )));
    }
    let grid = estimator.estimate(cloud, cfg.ground_cell)?;
    let is_ground = par::map(&cloud.points, |p| {
        (p.z - grid.height_at(p.x, p.y)).abs() <= cfg.ground_tolerance
    });
    let mut out = GroundLabeling::default();
    for (i, g) in is_ground.into_iter().enumerate() {
        if g {
            out.ground.push(i);
        } else {
            out.non_ground.push(i);
        }
    }
    Ok(out)
}

/// Height above the terrain for one point, or `None` when no ground point
/// lies within `radius_max`.
fn height_above_ground(
    p: &Point3,
    ground: &[Point3],
    index: &PlanarIndex,
    cfg: &PreprocessConfig,
) -> Option<f64> {
    let mut r = cfg.radius;
    loop {
        let mut wsum = 0.0;
        let mut zsum = 0.0;
        let mut exact_sum = 0.0;
        let mut exact_n = 0usize;
        let mut any = false;
        // Sorted by index so the floating-point sums are order-stable.
        for (gi, d) in index.within(p.x, p.y, r) {
            any = true;
            let zg = ground[gi].z;
            if d == 0.0 {
                exact_sum += zg;
                exact_n += 1;
            } else {
                let w = 1.0 / (d * d);
                wsum += w;
                zsum += w * zg;
            }
        }
        if any {
            let terrain = if exact_n > 0 {
                exact_sum / exact_n as f64
            } else {
                zsum / wsum
            };
            return Some(p.z - terrain);
        }
        if r >= cfg.radius_max {
            return None;
        }
        r = (r + cfg.radius_step).min(cfg.radius_max);
    }
}

/// Replaces the z of each non-ground point with its inverse-square-distance
/// weighted height above nearby ground points. Points with no ground within
/// `radius_max` are dropped; ground points are not part of the output.
pub fn normalize_height(
    cloud: &PointCloud,
    labeling: &GroundLabeling,
    cfg: &PreprocessConfig,
) -> Result<PointCloud> {
    let n = cloud.len();
    if labeling
        .ground
        .iter()
        .chain(&labeling.non_ground)
        .any(|&i| i >= n)
        || labeling.ground.len() + labeling.non_ground.len() > n
    {
        return Err(Error::Usage("labeling does not partition the cloud".into()));
    }
    let ground: Vec<Point3> = labeling.ground.iter().map(|&i| cloud.points[i]).collect();
    let index = PlanarIndex::from_xy(ground.iter().map(|p| [p.x, p.y]).collect(), cfg.radius);
    let heights = par::map(&labeling.non_ground, |&i| {
        let p = cloud.points[i];
        height_above_ground(&p, &ground, &index, cfg).map(|h| Point3::new(p.x, p.y, h))
    });
    Ok(heights.into_iter().flatten().collect())
}

/// Keeps points with `z_lo <= z < z_hi`.
pub fn crop_band(cloud: &PointCloud, z_lo: f64, z_hi: f64) -> PointCloud {
    cloud
        .iter()
        .filter(|p| p.z >= z_lo && p.z < z_hi)
        .copied()
        .collect()
}

/// Ground segmentation, height normalization and band cropping.
pub fn preprocess(cloud: &PointCloud, cfg: &PreprocessConfig) -> Result<PointCloud> {
    cfg.validate()?;
    let labeling = segment_ground(cloud, cfg)?;
    let normalized = normalize_height(cloud, &labeling, cfg)?;
    Ok(crop_band(&normalized, cfg.band_lo, cfg.band_hi))
}
