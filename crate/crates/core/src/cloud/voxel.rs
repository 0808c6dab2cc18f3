//! Occupied-voxel sets stored as a linear octree: cells are kept as sorted,
//! deduplicated Morton keys, so every octree node is a contiguous key range
//! and set intersection is a pruned descent over matching nodes.

use super::PointCloud;

/// Depth of the implicit octree (one level per coordinate bit).
const DEPTH: u32 = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelSet {
    edge_bits: u64,
    keys: Vec<u128>,
}

fn spread(v: u32) -> u128 {
    let mut out = 0u128;
    for bit in 0..32 {
        out |= (((v >> bit) & 1) as u128) << (3 * bit);
    }
    out
}

fn compact(k: u128) -> u32 {
    let mut out = 0u32;
    for bit in 0..32 {
        out |= (((k >> (3 * bit)) & 1) as u32) << bit;
    }
    out
}

fn bias(c: i32) -> u32 {
    (c as u32) ^ 0x8000_0000
}

fn unbias(v: u32) -> i32 {
    (v ^ 0x8000_0000) as i32
}

/// Morton key of an integer cell.
pub(crate) fn morton(cell: [i32; 3]) -> u128 {
    spread(bias(cell[0])) | (spread(bias(cell[1])) << 1) | (spread(bias(cell[2])) << 2)
}

fn demorton(k: u128) -> [i32; 3] {
    [
        unbias(compact(k)),
        unbias(compact(k >> 1)),
        unbias(compact(k >> 2)),
    ]
}

impl VoxelSet {
    pub fn from_cells(edge: f64, cells: impl IntoIterator<Item = [i32; 3]>) -> Self {
        let mut keys: Vec<u128> = cells.into_iter().map(morton).collect();
        keys.sort_unstable();
        keys.dedup();
        VoxelSet {
            edge_bits: edge.to_bits(),
            keys,
        }
    }

    pub fn edge(&self) -> f64 {
        f64::from_bits(self.edge_bits)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, cell: [i32; 3]) -> bool {
        self.keys.binary_search(&morton(cell)).is_ok()
    }

    /// Occupied cells in Morton order.
    pub fn cells(&self) -> impl Iterator<Item = [i32; 3]> + '_ {
        self.keys.iter().map(|&k| demorton(k))
    }

    /// Set of occupied nodes `levels` above the leaves (edge × 2^levels).
    pub fn coarsen(&self, levels: u32) -> VoxelSet {
        assert!(levels < DEPTH);
        let shift = 3 * levels;
        let mut keys: Vec<u128> = self.keys.iter().map(|k| (k >> shift) << shift).collect();
        keys.dedup();
        VoxelSet {
            edge_bits: (self.edge() * f64::from(1u32 << levels)).to_bits(),
            keys,
        }
    }

    /// `|self ∩ other|` by simultaneous octree descent.
    pub fn intersection_len(&self, other: &VoxelSet) -> usize {
        intersect(&self.keys, &other.keys, DEPTH)
    }

    pub fn union_len(&self, other: &VoxelSet) -> usize {
        self.len() + other.len() - self.intersection_len(other)
    }
}

/// Counts equal keys in two sorted slices that share an octree node whose
/// children are selected by key bits below `3 * level`.
fn intersect(a: &[u128], b: &[u128], level: u32) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    if a.len() == 1 || b.len() == 1 || level == 0 {
        let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        return small
            .iter()
            .filter(|k| large.binary_search(k).is_ok())
            .count();
    }
    let shift = 3 * (level - 1);
    let child = |k: u128| ((k >> shift) & 7) as u8;
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut total = 0;
    for c in 0..8u8 {
        let ea = ia + a[ia..].partition_point(|&k| child(k) <= c);
        let eb = ib + b[ib..].partition_point(|&k| child(k) <= c);
        total += intersect(&a[ia..ea], &b[ib..eb], level - 1);
        ia = ea;
        ib = eb;
    }
    total
}

/// Cells `(⌊x/edge⌋, ⌊y/edge⌋, ⌊z/edge⌋)` occupied by the cloud.
pub fn voxelize(cloud: &PointCloud, edge: f64) -> VoxelSet {
    assert!(
        edge > 0.0 && edge.is_finite(),
        "voxel edge must be positive"
    );
    let cell = |v: f64| (v / edge).floor() as i32;
    VoxelSet::from_cells(
        edge,
        cloud.iter().map(|p| [cell(p.x), cell(p.y), cell(p.z)]),
    )
}
