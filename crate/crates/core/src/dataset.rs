//! Submap manifests and descriptor files.
//!
//! A manifest is JSON lines, one object per submap:
//! `{"id", "sequence", "timestamp", "pcd", "pose": [tx, ty, tz, qx, qy, qz, qw]}`.
//! Relative `pcd` paths resolve against the manifest's directory; `pose`
//! may be omitted for data without ground truth. Records written by the
//! preprocessing stage carry `"preprocessed": true`.
//!
//! A descriptor file is `FLPR-D`, u32 version, u32 count, u32 dimension,
//! then count × dimension f32 values, all little-endian. The sidecar
//! `<file>.manifest.jsonl` maps each row to its submap id.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cloud::{load_pcd, PointCloud, Pose};
use crate::error::{Error, Result};
use crate::eval::EntryMeta;
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub sequence: String,
    pub timestamp: f64,
    pub pcd: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<[f64; 7]>,
    /// Set on clouds that are already terrain-normalized and band-cropped.
    #[serde(default, skip_serializing_if = "is_false")]
    pub preprocessed: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl ManifestRecord {
    pub fn pose(&self) -> Result<Pose> {
        let p = self
            .pose
            .ok_or_else(|| Error::Dataset(format!("submap {} has no pose", self.id)))?;
        Pose::new([p[0], p[1], p[2]], [p[6], p[3], p[4], p[5]])
            .map_err(|e| Error::Dataset(format!("submap {}: {e}", self.id)))
    }
}

pub fn pose_to_array(pose: &Pose) -> [f64; 7] {
    let [tx, ty, tz] = pose.translation;
    let [w, x, y, z] = pose.rotation;
    [tx, ty, tz, x, y, z, w]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Base directory for relative cloud paths.
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(dir: PathBuf, records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate submap id {:?}", r.id)));
            }
            if !r.timestamp.is_finite() {
                return Err(Error::Dataset(format!(
                    "submap {} has a non-finite timestamp",
                    r.id
                )));
            }
        }
        Ok(Manifest { dir, records })
    }

    pub fn parse(text: &str, dir: PathBuf) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("manifest: {e}"),
            })?;
            records.push(r);
        }
        Manifest::new(dir, records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(&fsutil::read_to_string(path)?, dir)
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    pub fn cloud_path(&self, i: usize) -> PathBuf {
        let p = Path::new(&self.records[i].pcd);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn load_cloud(&self, i: usize) -> Result<PointCloud> {
        load_pcd(&self.cloud_path(i))
    }

    pub fn sequences(&self) -> Vec<String> {
        let mut s: Vec<String> = self.records.iter().map(|r| r.sequence.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Evaluation metadata; every record needs a pose.
    pub fn entry_meta(&self) -> Result<Vec<EntryMeta>> {
        self.records
            .iter()
            .map(|r| {
                let pose = r.pose()?;
                Ok(EntryMeta {
                    id: r.id.clone(),
                    sequence: r.sequence.clone(),
                    timestamp: r.timestamp,
                    position: [pose.translation[0], pose.translation[1]],
                })
            })
            .collect()
    }
}

pub const DESCRIPTOR_MAGIC: &[u8; 6] = b"FLPR-D";
pub const DESCRIPTOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarRow {
    row: usize,
    id: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.jsonl");
    PathBuf::from(s)
}

impl DescriptorSet {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim = self.dim();
        if self.rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Usage("descriptors have mixed dimensions".into()));
        }
        let mut out = Vec::with_capacity(18 + 4 * dim * self.rows.len());
        out.extend_from_slice(DESCRIPTOR_MAGIC);
        out.extend_from_slice(&DESCRIPTOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for v in self.rows.iter().flatten() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Ok(out)
    }

    /// Rows only; ids come from the sidecar.
    pub fn rows_from_bytes(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
        let head = 6 + 12;
        if bytes.len() < head || &bytes[..6] != DESCRIPTOR_MAGIC {
            return Err(Error::Format("not a descriptor file (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let version = u32_at(6) as u32;
        if version != DESCRIPTOR_VERSION {
            return Err(Error::Format(format!(
                "unsupported descriptor file version {version} (expected version {DESCRIPTOR_VERSION})"
            )));
        }
        let (count, dim) = (u32_at(10), u32_at(14));
        let body = &bytes[head..];
        if body.len() != count * dim * 4 {
            return Err(Error::Format(format!(
                "descriptor file declares {count}x{dim} values but holds {} bytes",
                body.len()
            )));
        }
        let vals: Vec<f64> = body
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        Ok(if dim == 0 {
            vec![Vec::new(); count]
        } else {
            vals.chunks(dim).map(<[f64]>::to_vec).collect()
        })
    }

    pub fn sidecar(&self) -> String {
        self.ids
            .iter()
            .enumerate()
            .map(|(row, id)| {
                serde_json::to_string(&SidecarRow {
                    row,
                    id: id.clone(),
                })
                .unwrap()
                    + "\n"
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes()?)?;
        fsutil::write_atomic(&sidecar_path(path), self.sidecar().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rows = Self::rows_from_bytes(&fsutil::read(path)?)?;
        let side = sidecar_path(path);
        let mut ids = vec![None; rows.len()];
        for (i, line) in fsutil::read_to_string(&side)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: SidecarRow = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("descriptor sidecar: {e}"),
            })?;
            let slot = ids
                .get_mut(r.row)
                .ok_or_else(|| Error::Format(format!("sidecar row {} out of range", r.row)))?;
            if slot.replace(r.id).is_some() {
                return Err(Error::Format(format!("sidecar lists row {} twice", r.row)));
            }
        }
        let ids = ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| {
                id.ok_or_else(|| Error::Format(format!("sidecar has no id for row {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DescriptorSet { ids, rows })
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.ids
            .iter()
            .position(|x| x == id)
            .map(|i| self.rows[i].as_slice())
    }
}
