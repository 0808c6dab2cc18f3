//! Bird's-eye-view rasterization of height slices.

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BevMode {
    /// Log point count per cell.
    #[default]
    Density,
    /// Maximum height per cell.
    Elevation,
}

impl std::str::FromStr for BevMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "density" => Ok(BevMode::Density),
            "elevation" => Ok(BevMode::Elevation),
            other => Err(Error::config("bev.mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevConfig {
    /// Number of height slices S.
    pub slices: usize,
    /// Height of each slice (m).
    pub slice_height: f64,
    /// Bottom of the first slice (m above terrain).
    pub z_lo: f64,
    /// Cell size (m).
    pub resolution: f64,
    /// Half-width of the square grid (m); the grid spans [-extent, extent).
    pub extent: f64,
    pub mode: BevMode,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            slices: 5,
            slice_height: 1.0,
            z_lo: 1.0,
            resolution: 0.5,
            extent: 30.0,
            mode: BevMode::Density,
        }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 {
            return Err(Error::config("bev.slices", "must be at least 1"));
        }
        if !(self.slice_height > 0.0) || !self.slice_height.is_finite() {
            return Err(Error::config("bev.slice_height", "must be positive"));
        }
        if !self.z_lo.is_finite() {
            return Err(Error::config("bev.z_lo", "must be finite"));
        }
        if !(self.resolution > 0.0) || !(self.extent > 0.0) {
            return Err(Error::config(
                "bev.resolution",
                "resolution and extent must be positive",
            ));
        }
        self.grid_size().map(|_| ())
    }

    /// Cells per side, `2E / res`, which must be an integer.
    pub fn grid_size(&self) -> Result<usize> {
        grid_size(self.resolution, self.extent)
    }

    /// One slice spanning the whole band of this configuration.
    pub fn single(&self) -> BevConfig {
        BevConfig {
            slices: 1,
            slice_height: self.slice_height * self.slices as f64,
            ..self.clone()
        }
    }

    pub fn bands(&self) -> Vec<(f64, f64)> {
        (0..self.slices)
            .map(|j| {
                (
                    self.z_lo + j as f64 * self.slice_height,
                    self.z_lo + (j + 1) as f64 * self.slice_height,
                )
            })
            .collect()
    }
}

fn grid_size(res: f64, extent: f64) -> Result<usize> {
    let n = 2.0 * extent / res;
    let r = n.round();
    if !(r >= 1.0) || (n - r).abs() > 1e-9 * r.max(1.0) {
        return Err(Error::config(
            "bev.resolution",
            format!("2 * extent / resolution = {n} is not an integer"),
        ));
    }
    Ok(r as usize)
}

/// Single-channel image with values in [0, 1], row-major. Row index follows
/// x and column index follows y.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityImage {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Meters per pixel at rasterization time.
    pub resolution: f64,
    pub extent: f64,
}

impl DensityImage {
    pub fn zeros(rows: usize, cols: usize, resolution: f64, extent: f64) -> Self {
        DensityImage {
            rows,
            cols,
            values: vec![0.0; rows * cols],
            resolution,
            extent,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Rotates the pixel grid by `k` quarter turns, matching a counter-
    /// clockwise rotation of the underlying cloud about z.
    pub fn rot90(&self, k: i32) -> DensityImage {
        let mut img = self.clone();
        for _ in 0..k.rem_euclid(4) {
            let (r, c) = (img.rows, img.cols);
            let mut out = vec![0.0; r * c];
            // (x, y) -> (-y, x): new row = n - 1 - old col, new col = old row.
            for i in 0..r {
                for j in 0..c {
                    out[(c - 1 - j) * r + i] = img.values[i * c + j];
                }
            }
            img = DensityImage {
                rows: c,
                cols: r,
                values: out,
                ..img
            };
        }
        img
    }

    /// Binary PGM (P5), 16-bit big-endian, value = round(I * 65535).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.cols, self.rows).into_bytes();
        for v in &self.values {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
        out
    }

    /// `u32 width, u32 height` little-endian, then f32 little-endian values.
    pub fn to_raw_f32(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.values.len());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_raw_f32(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("raw image shorter than its header".into()));
        }
        let cols = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != rows * cols * 4 {
            return Err(Error::Format(format!(
                "raw image {cols}x{rows} needs {} bytes, found {}",
                rows * cols * 4,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        Ok(DensityImage {
            rows,
            cols,
            values,
            resolution: 0.0,
            extent: 0.0,
        })
    }
}

/// Images of all slices plus the height band of each.
#[derive(Debug, Clone, PartialEq)]
pub struct BevStack {
    pub images: Vec<DensityImage>,
    pub bands: Vec<(f64, f64)>,
}

impl BevStack {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Splits a height-normalized cloud into `slices` bands of `dh` meters from
/// `z_lo`; points outside all bands are dropped.
pub fn slice_cloud(cloud: &PointCloud, z_lo: f64, dh: f64, slices: usize) -> Vec<PointCloud> {
    assert!(dh > 0.0 && slices >= 1);
    let mut out = vec![PointCloud::default(); slices];
    for p in cloud.iter() {
        let j = ((p.z - z_lo) / dh).floor();
        if j >= 0.0 && j < slices as f64 {
            out[j as usize].points.push(*p);
        }
    }
    out
}

fn cell_of(v: f64, extent: f64, res: f64, n: usize) -> Option<usize> {
    let f = ((v + extent) / res).floor();
    (f >= 0.0 && f < n as f64).then_some(f as usize)
}

fn min_max_normalize(vals: &mut [f64]) {
    let (lo, hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        vals.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let span = hi - lo;
    vals.iter_mut().for_each(|v| *v = (*v - lo) / span);
}

/// Per-cell point counts of the grid (points outside the extent dropped).
pub fn cell_counts(slice: &PointCloud, res: f64, extent: f64) -> Result<(usize, Vec<u32>)> {
    let n = grid_size(res, extent)?;
    let mut counts = vec![0u32; n * n];
    for p in slice.iter() {
        if let (Some(u), Some(v)) = (cell_of(p.x, extent, res, n), cell_of(p.y, extent, res, n)) {
            counts[u * n + v] += 1;
        }
    }
    Ok((n, counts))
}

/// `I = (V - Vmin) / (Vmax - Vmin)` with `V = ln(count + 1)`; a constant
/// image becomes all zeros.
pub fn rasterize_density(slice: &PointCloud, res: f64, extent: f64) -> Result<DensityImage> {
    let (n, counts) = cell_counts(slice, res, extent)?;
    let mut values: Vec<f64> = counts.iter().map(|&c| (f64::from(c) + 1.0).ln()).collect();
    min_max_normalize(&mut values);
    Ok(DensityImage {
        rows: n,
        cols: n,
        values,
        resolution: res,
        extent,
    })
}

/// Max height per cell (empty cells take `band_min`), then min-max
/// normalized.
pub fn rasterize_elevation(
    slice: &PointCloud,
    res: f64,
    extent: f64,
    band_min: f64,
) -> Result<DensityImage> {
    let n = grid_size(res, extent)?;
    let mut values = vec![f64::NEG_INFINITY; n * n];
    for p in slice.iter() {
        if let (Some(u), Some(v)) = (cell_of(p.x, extent, res, n), cell_of(p.y, extent, res, n)) {
            let c = &mut values[u * n + v];
            *c = c.max(p.z);
        }
    }
    for v in values.iter_mut() {
        if *v == f64::NEG_INFINITY {
            *v = band_min;
        }
    }
    min_max_normalize(&mut values);
    Ok(DensityImage {
        rows: n,
        cols: n,
        values,
        resolution: res,
        extent,
    })
}

/// Align-corners bilinear resampling.
pub fn resize_bilinear(image: &DensityImage, rows: usize, cols: usize) -> DensityImage {
    assert!(rows >= 1 && cols >= 1);
    if image.rows == rows && image.cols == cols {
        return image.clone();
    }
    let src = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let lerp = |a: f64, b: f64, t: f64| (a + (b - a) * t).clamp(a.min(b), a.max(b));
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (r0, r1, tr) = src(r, rows, image.rows);
        for c in 0..cols {
            let (c0, c1, tc) = src(c, cols, image.cols);
            let top = lerp(image.get(r0, c0), image.get(r0, c1), tc);
            let bot = lerp(image.get(r1, c0), image.get(r1, c1), tc);
            values.push(lerp(top, bot, tr));
        }
    }
    DensityImage {
        rows,
        cols,
        values,
        resolution: image.resolution * image.rows as f64 / rows as f64,
        extent: image.extent,
    }
}

/// Slices, rasterizes and resizes a pre-processed cloud to `size` pixels.
pub fn make_bev_stack(
    cloud: &PointCloud,
    cfg: &BevConfig,
    size: (usize, usize),
) -> Result<BevStack> {
    cfg.validate()?;
    let slices = slice_cloud(cloud, cfg.z_lo, cfg.slice_height, cfg.slices);
    let bands = cfg.bands();
    let work: Vec<(PointCloud, f64)> = slices.into_iter().zip(bands.iter().map(|b| b.0)).collect();
    let images = par::try_map(&work, |(slice, band_min)| {
        let raw = match cfg.mode {
            BevMode::Density => rasterize_density(slice, cfg.resolution, cfg.extent)?,
            BevMode::Elevation => {
                rasterize_elevation(slice, cfg.resolution, cfg.extent, *band_min)?
            }
        };
        Ok::<_, Error>(resize_bilinear(&raw, size.0, size.1))
    })?;
    Ok(BevStack { images, bands })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{rotate_z, Point3};
    use proptest::prelude::*;

    #[test]
    fn slice_index_uses_floor() {
        let c = PointCloud::new(vec![Point3::new(0.0, 0.0, 2.4)]);
        let s = slice_cloud(&c, 1.0, 1.0, 5);
        assert_eq!(s[1].len(), 1);
        assert_eq!(s.iter().map(PointCloud::len).sum::<usize>(), 1);
    }

    #[test]
    fn single_slice_is_band_crop() {
        let c: PointCloud = (0..40)
            .map(|i| Point3::new(0.0, 0.0, i as f64 * 0.2))
            .collect();
        let s = slice_cloud(&c, 1.0, 1.0, 1);
        assert_eq!(s[0], crate::preprocess::crop_band(&c, 1.0, 2.0));
    }

    #[test]
    fn slices_partition_the_band() {
        let c: PointCloud = (0..200)
            .map(|i| Point3::new(i as f64, 0.0, i as f64 * 0.037))
            .collect();
        let s = slice_cloud(&c, 1.0, 1.0, 5);
        let band = crate::preprocess::crop_band(&c, 1.0, 6.0);
        let mut union: Vec<Point3> = s.iter().flat_map(|c| c.points.clone()).collect();
        union.sort_by(|a, b| a.x.total_cmp(&b.x));
        assert_eq!(union, band.points);
    }

    #[test]
    fn single_occupied_cell_is_one() {
        let c = PointCloud::new(vec![Point3::new(0.1, 0.1, 2.0); 7]);
        let img = rasterize_density(&c, 0.5, 30.0).unwrap();
        assert_eq!((img.rows, img.cols), (120, 120));
        assert_eq!(img.get(60, 60), 1.0);
        assert_eq!(img.values.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn empty_slice_gives_zero_image() {
        let img = rasterize_density(&PointCloud::default(), 0.5, 30.0).unwrap();
        assert!(img.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_integer_grid_is_config_error() {
        assert!(matches!(
            rasterize_density(&PointCloud::default(), 0.7, 30.0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn positive_extent_boundary_is_dropped() {
        let c = PointCloud::new(vec![
            Point3::new(30.0, 0.0, 0.0),
            Point3::new(-30.0, 0.0, 0.0),
        ]);
        let (_, counts) = cell_counts(&c, 0.5, 30.0).unwrap();
        assert_eq!(counts.iter().sum::<u32>(), 1);
        assert_eq!(counts[60], 1);
    }

    #[test]
    fn elevation_uses_max_height() {
        let c = PointCloud::new(vec![
            Point3::new(0.1, 0.1, 3.0),
            Point3::new(0.2, 0.2, 5.0),
            Point3::new(-5.0, 0.0, 4.0),
        ]);
        let img = rasterize_elevation(&c, 0.5, 30.0, 1.0).unwrap();
        assert_eq!(img.get(60, 60), 1.0);
        assert!((img.get(50, 60) - 0.75).abs() < 1e-15);
        assert_eq!(img.get(0, 0), 0.0);
    }

    #[test]
    fn elevation_constant_height_full_grid_is_zero() {
        let c: PointCloud = (0..4)
            .flat_map(|i| (0..4).map(move |j| Point3::new(i as f64 - 1.5, j as f64 - 1.5, 2.5)))
            .collect();
        let img = rasterize_elevation(&c, 1.0, 2.0, 1.0).unwrap();
        assert!(img.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_align_corners() {
        let img = DensityImage {
            rows: 1,
            cols: 2,
            values: vec![0.0, 1.0],
            resolution: 1.0,
            extent: 1.0,
        };
        assert_eq!(resize_bilinear(&img, 1, 3).values, vec![0.0, 0.5, 1.0]);
        assert_eq!(resize_bilinear(&img, 1, 2), img);
        let flat = DensityImage {
            values: vec![0.3; 12],
            rows: 3,
            cols: 4,
            resolution: 1.0,
            extent: 1.0,
        };
        assert!(resize_bilinear(&flat, 7, 5)
            .values
            .iter()
            .all(|&v| v == 0.3));
    }

    #[test]
    fn default_stack_shapes() {
        let cfg = BevConfig::default();
        let c = PointCloud::new(vec![
            Point3::new(1.0, 2.0, 2.5),
            Point3::new(-3.0, 4.0, 4.2),
        ]);
        let stack = make_bev_stack(&c, &cfg, (480, 480)).unwrap();
        assert_eq!(stack.len(), 5);
        assert_eq!(cfg.grid_size().unwrap(), 120);
        assert!(stack
            .images
            .iter()
            .all(|im| im.rows == 480 && im.cols == 480));
        assert_eq!(stack.bands[4], (5.0, 6.0));
        let empty = make_bev_stack(&PointCloud::default(), &cfg, (480, 480)).unwrap();
        assert!(empty
            .images
            .iter()
            .all(|im| im.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn raw_dump_round_trip_and_pgm_header() {
        let img = DensityImage {
            rows: 2,
            cols: 3,
            values: vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125],
            resolution: 1.0,
            extent: 1.0,
        };
        let back = DensityImage::from_raw_f32(&img.to_raw_f32()).unwrap();
        assert_eq!(back.values, img.values);
        let pgm = img.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(pgm.len(), b"P5\n3 2\n65535\n".len() + 12);
        assert_eq!(&pgm[pgm.len() - 4..pgm.len() - 2], &65535u16.to_be_bytes());
        assert!(DensityImage::from_raw_f32(&img.to_raw_f32()[..10]).is_err());
    }

    fn interior_cloud() -> impl Strategy<Value = PointCloud> {
        // Cell index plus an offset kept away from cell edges.
        prop::collection::vec(
            (0usize..120, 0usize..120, 0.05..0.45f64, 0.05..0.45f64),
            0..200,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(u, w, fx, fy)| {
                    Point3::new(
                        -30.0 + 0.5 * u as f64 + fx,
                        -30.0 + 0.5 * w as f64 + fy,
                        2.0,
                    )
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn quarter_turn_equivariance(cloud in interior_cloud(), k in 0i32..4) {
            let angle = k as f64 * std::f64::consts::FRAC_PI_2;
            let a = rasterize_density(&rotate_z(&cloud, angle), 0.5, 30.0).unwrap();
            let b = rasterize_density(&cloud, 0.5, 30.0).unwrap().rot90(k);
            prop_assert_eq!(a.values, b.values);
        }

        #[test]
        fn density_is_order_invariant_and_counts_all(cloud in interior_cloud()) {
            let mut rev = cloud.points.clone();
            rev.reverse();
            let a = rasterize_density(&cloud, 0.5, 30.0).unwrap();
            let b = rasterize_density(&PointCloud::new(rev), 0.5, 30.0).unwrap();
            prop_assert_eq!(&a, &b);
            let (_, counts) = cell_counts(&cloud, 0.5, 30.0).unwrap();
            prop_assert_eq!(counts.iter().map(|&c| c as usize).sum::<usize>(), cloud.len());
            prop_assert!(a.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn resize_stays_in_input_range(
            vals in prop::collection::vec(0.0..1.0f64, 12),
            r in 1usize..20, c in 1usize..20,
        ) {
            let img = DensityImage { rows: 3, cols: 4, values: vals.clone(), resolution: 1.0, extent: 1.0 };
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = resize_bilinear(&img, r, c);
            prop_assert!(out.values.iter().all(|&v| v >= lo && v <= hi));
        }
    }
}
