//! Point clouds, rigid poses and the spatial structures built over them.

mod index;
pub mod pcd;
mod pose;
mod voxel;

pub use index::{radius_neighbors_2d, PlanarIndex};
pub use pcd::{load_pcd, read_pcd, save_pcd, write_pcd, PcdEncoding, PcdStats};
pub use pose::{load_pose_file, parse_pose_file, Pose, StampedPose};
pub use voxel::{voxelize, VoxelSet};

/// A point in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Euclidean distance in the x-y plane.
    pub fn dist_2d(&self, other: &Point3) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Ordered set of finite points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        debug_assert!(points.iter().all(Point3::is_finite));
        PointCloud { points }
    }

    /// Builds a cloud, dropping non-finite points. Returns the drop count.
    pub fn from_points_lossy(points: Vec<Point3>) -> (Self, usize) {
        let before = points.len();
        let points: Vec<Point3> = points.into_iter().filter(Point3::is_finite).collect();
        let dropped = before - points.len();
        (PointCloud { points }, dropped)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3> {
        self.points.iter()
    }

    /// Rotates every point about the z axis by `angle` radians.
    pub fn rotate_z(&self, angle: f64) -> PointCloud {
        rotate_z(self, angle)
    }

    pub fn transform(&self, pose: &Pose) -> PointCloud {
        transform(self, pose)
    }
}

impl FromIterator<Point3> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point3>>(iter: I) -> Self {
        PointCloud::new(iter.into_iter().collect())
    }
}

/// `(x, y, z) -> (x cos a - y sin a, x sin a + y cos a, z)`.
pub fn rotate_z(cloud: &PointCloud, angle: f64) -> PointCloud {
    let (s, c) = angle.sin_cos();
    cloud
        .points
        .iter()
        .map(|p| Point3::new(p.x * c - p.y * s, p.x * s + p.y * c, p.z))
        .collect()
}

/// Applies `p -> R p + t`.
pub fn transform(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    cloud.points.iter().map(|p| pose.apply(p)).collect()
}
