use std::path::Path;

use super::Point3;
use crate::error::{Error, Result};

/// Rigid transform with a unit quaternion stored as (w, x, y, z).
///
/// Right-handed, active rotation: `apply(p) = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub translation: [f64; 3],
    pub rotation: [f64; 4],
}

impl Default for Pose {
    fn default() -> Self {
        Pose::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        translation: [0.0; 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
    };

    /// Builds a pose, normalizing the quaternion. Fails if the quaternion is
    /// zero or non-finite.
    pub fn new(translation: [f64; 3], rotation_wxyz: [f64; 4]) -> Result<Self> {
        let n = rotation_wxyz.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !n.is_finite() || n < 1e-12 || translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "invalid pose: t={translation:?} q={rotation_wxyz:?}"
            )));
        }
        let q = rotation_wxyz.map(|v| v / n);
        Ok(Pose {
            translation,
            rotation: q,
        })
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Pose {
            translation: t,
            rotation: [1.0, 0.0, 0.0, 0.0],
        }
    }

    /// Rotation about +z by `yaw` radians followed by translation.
    pub fn from_xyz_yaw(t: [f64; 3], yaw: f64) -> Self {
        let (s, c) = (yaw * 0.5).sin_cos();
        Pose {
            translation: t,
            rotation: [c, 0.0, 0.0, s],
        }
    }

    pub fn yaw(&self) -> f64 {
        let [w, x, y, z] = self.rotation;
        (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [w, x, y, z] = self.rotation;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let r = self.rotation_matrix();
        let t = self.translation;
        Point3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z + t[0],
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z + t[1],
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z + t[2],
        )
    }

    pub fn inverse(&self) -> Pose {
        let [w, x, y, z] = self.rotation;
        let conj = Pose {
            translation: [0.0; 3],
            rotation: [w, -x, -y, -z],
        };
        let t = conj.apply(&Point3::new(
            self.translation[0],
            self.translation[1],
            self.translation[2],
        ));
        Pose {
            translation: [-t.x, -t.y, -t.z],
            rotation: conj.rotation,
        }
    }

    /// Planar distance between the translations of two poses.
    pub fn dist_2d(&self, other: &Pose) -> f64 {
        (self.translation[0] - other.translation[0])
            .hypot(self.translation[1] - other.translation[1])
    }
}

/// One line of a pose file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

/// Parses `timestamp tx ty tz qx qy qz qw` lines. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_pose_file(text: &str) -> Result<Vec<StampedPose>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("{e} in pose line {line:?}"),
        })?;
        if vals.len() != 8 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 8 values, found {} in {line:?}", vals.len()),
            });
        }
        let pose = Pose::new(
            [vals[1], vals[2], vals[3]],
            [vals[7], vals[4], vals[5], vals[6]],
        )
        .map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(StampedPose {
            timestamp: vals[0],
            pose,
        });
    }
    Ok(out)
}

pub fn load_pose_file(path: &Path) -> Result<Vec<StampedPose>> {
    parse_pose_file(&crate::fsutil::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Point3, b: &Point3, tol: f64) -> bool {
        (a.x - b.x).abs() < tol && (a.y - b.y).abs() < tol && (a.z - b.z).abs() < tol
    }

    #[test]
    fn identity_pose_is_noop() {
        let p = Point3::new(1.0, -2.0, 3.5);
        assert_eq!(Pose::IDENTITY.apply(&p), p);
    }

    #[test]
    fn pure_translation() {
        let pose = Pose::from_translation([1.0, 0.0, 0.0]);
        assert_eq!(pose.apply(&Point3::default()), Point3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn yaw_quaternion_matches_rotate_z() {
        let pose = Pose::from_xyz_yaw([0.0; 3], 0.7);
        let p = Point3::new(2.0, -1.0, 4.0);
        let cloud = super::super::PointCloud::new(vec![p]);
        let r = super::super::rotate_z(&cloud, 0.7);
        assert!(close(&pose.apply(&p), &r.points[0], 1e-12));
        assert!((pose.yaw() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn pose_file_parses_xyzw_order() {
        let text = "# t tx ty tz qx qy qz qw\n10.5 1 2 3 0 0 0 1\n\n11 0 0 0 0 0 0.7071067811865476 0.7071067811865476\n";
        let poses = parse_pose_file(text).unwrap();
        assert_eq!(poses.len(), 2);
        assert_eq!(poses[0].timestamp, 10.5);
        assert_eq!(poses[0].pose.translation, [1.0, 2.0, 3.0]);
        assert!((poses[1].pose.yaw() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn pose_file_rejects_short_lines() {
        let err = parse_pose_file("1 2 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-50.0..50.0f64),
            prop::array::uniform4(-1.0..1.0f64),
        )
            .prop_filter_map("zero quaternion", |(t, q)| {
                let n: f64 = q.iter().map(|v| v * v).sum();
                (n > 1e-3).then(|| Pose::new(t, q).unwrap())
            })
    }

    proptest! {
        #[test]
        fn quaternion_is_unit(pose in arb_pose()) {
            let n: f64 = pose.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pose_then_inverse_restores(pose in arb_pose(), p in prop::array::uniform3(-30.0..30.0f64)) {
            let p = Point3::new(p[0], p[1], p[2]);
            let back = pose.inverse().apply(&pose.apply(&p));
            prop_assert!(close(&back, &p, 1e-9));
        }
    }
}
