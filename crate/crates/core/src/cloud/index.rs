use super::{Point3, PointCloud};

/// Uniform 2D grid of buckets over the x-y coordinates of a cloud.
///
/// Queries are exact: every returned point satisfies `d < radius` and no
/// such point is missed, whatever the bucket size.
#[derive(Debug, Clone)]
pub struct PlanarIndex {
    xy: Vec<[f64; 2]>,
    origin: [f64; 2],
    cell: f64,
    dims: [usize; 2],
    /// CSR layout: bucket `b` holds `items[starts[b]..starts[b + 1]]`.
    starts: Vec<u32>,
    items: Vec<u32>,
}

const MAX_BUCKETS_PER_AXIS: usize = 2048;

impl PlanarIndex {
    /// Builds the index with buckets of roughly `cell` meters. The bucket
    /// size grows if the cloud would otherwise need an oversized grid.
    pub fn build(cloud: &PointCloud, cell: f64) -> Self {
        Self::from_xy(cloud.points.iter().map(|p| [p.x, p.y]).collect(), cell)
    }

    pub fn from_xy(xy: Vec<[f64; 2]>, cell: f64) -> Self {
        assert!(
            cell > 0.0 && cell.is_finite(),
            "bucket size must be positive"
        );
        assert!(xy.len() < u32::MAX as usize);
        if xy.is_empty() {
            return PlanarIndex {
                xy,
                origin: [0.0; 2],
                cell,
                dims: [0, 0],
                starts: vec![0],
                items: Vec::new(),
            };
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &xy {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let cell = cell.max(span / (MAX_BUCKETS_PER_AXIS - 1) as f64);
        let dims = [
            ((hi[0] - lo[0]) / cell) as usize + 1,
            ((hi[1] - lo[1]) / cell) as usize + 1,
        ];
        let bucket_of = |p: &[f64; 2]| -> usize {
            let i = (((p[0] - lo[0]) / cell) as usize).min(dims[0] - 1);
            let j = (((p[1] - lo[1]) / cell) as usize).min(dims[1] - 1);
            i * dims[1] + j
        };
        let nb = dims[0] * dims[1];
        let mut counts = vec![0u32; nb + 1];
        for p in &xy {
            counts[bucket_of(p) + 1] += 1;
        }
        for b in 0..nb {
            counts[b + 1] += counts[b];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut items = vec![0u32; xy.len()];
        for (idx, p) in xy.iter().enumerate() {
            let b = bucket_of(p);
            items[fill[b] as usize] = idx as u32;
            fill[b] += 1;
        }
        PlanarIndex {
            xy,
            origin: lo,
            cell,
            dims,
            starts,
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.xy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xy.is_empty()
    }

    /// All `(index, distance)` with planar distance strictly below `radius`,
    /// sorted by index.
    pub fn within(&self, qx: f64, qy: f64, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        self.for_each_within(qx, qy, radius, |i, d| out.push((i, d)));
        out.sort_unstable_by_key(|&(i, _)| i);
        out
    }

    /// Visits neighbors in bucket order (not sorted).
    pub fn for_each_within(&self, qx: f64, qy: f64, radius: f64, mut f: impl FnMut(usize, f64)) {
        if self.xy.is_empty() || !(radius > 0.0) {
            return;
        }
        let range = |q: f64, axis: usize| -> Option<(usize, usize)> {
            let lo = ((q - radius - self.origin[axis]) / self.cell).floor();
            let hi = ((q + radius - self.origin[axis]) / self.cell).floor();
            let max = (self.dims[axis] - 1) as f64;
            if hi < 0.0 || lo > max {
                return None;
            }
            Some((lo.max(0.0) as usize, hi.min(max) as usize))
        };
        let (Some((i0, i1)), Some((j0, j1))) = (range(qx, 0), range(qy, 1)) else {
            return;
        };
        for i in i0..=i1 {
            for j in j0..=j1 {
                let b = i * self.dims[1] + j;
                for &idx in &self.items[self.starts[b] as usize..self.starts[b + 1] as usize] {
                    let p = self.xy[idx as usize];
                    let d = (p[0] - qx).hypot(p[1] - qy);
                    if d < radius {
                        f(idx as usize, d);
                    }
                }
            }
        }
    }
}

/// Planar neighbors of `query` in an indexed cloud; z is ignored.
pub fn radius_neighbors_2d(index: &PlanarIndex, query: &Point3, radius: f64) -> Vec<(usize, f64)> {
    index.within(query.x, query.y, radius)
}
