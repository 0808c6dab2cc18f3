//! Ground-truth pair mining by volumetric overlap or pose distance.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cloud::{voxelize, PointCloud, Pose, VoxelSet};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    #[default]
    Overlap,
    Distance,
}

impl FromStr for MiningMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(MiningMode::Overlap),
            "distance" => Ok(MiningMode::Distance),
            _ => Err(Error::config("mining.mode", format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub voxel: f64,
    pub pos_overlap: f64,
    pub neg_overlap: f64,
    pub pos_distance: f64,
    pub neg_distance: f64,
    pub mode: MiningMode,
    /// Same-sequence pairs closer than this in time are skipped (seconds).
    pub exclusion: f64,
    /// Pairs farther apart than this (2D, meters) cannot overlap.
    pub gate: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            voxel: 0.5,
            pos_overlap: 0.9,
            neg_overlap: 0.5,
            pos_distance: 12.5,
            neg_distance: 50.0,
            mode: MiningMode::Overlap,
            exclusion: 600.0,
            gate: 60.0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel > 0.0 && self.voxel.is_finite()) {
            return Err(Error::config("mining.voxel", "must be positive"));
        }
        if !(0.0 <= self.neg_overlap
            && self.neg_overlap < self.pos_overlap
            && self.pos_overlap <= 1.0)
        {
            return Err(Error::config(
                "mining.pos_overlap",
                "need 0 <= neg_overlap < pos_overlap <= 1",
            ));
        }
        if !(0.0 < self.pos_distance && self.pos_distance < self.neg_distance) {
            return Err(Error::config(
                "mining.pos_distance",
                "need 0 < pos_distance < neg_distance",
            ));
        }
        if !(self.exclusion >= 0.0) {
            return Err(Error::config("mining.exclusion", "must be non-negative"));
        }
        if !(self.gate > 0.0) {
            return Err(Error::config("mining.gate", "must be positive"));
        }
        Ok(())
    }
}

/// `|A ∩ B| / |A ∪ B|`.
pub fn overlap(a: &VoxelSet, b: &VoxelSet) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::UndefinedOverlap);
    }
    let inter = a.intersection_len(b);
    Ok(inter as f64 / (a.len() + b.len() - inter) as f64)
}

/// `|A ∩ B| / min(|A|, |B|)`, which tolerates one side missing a region.
pub fn overlap_min(a: &VoxelSet, b: &VoxelSet) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::UndefinedOverlap);
    }
    let m = a.len().min(b.len());
    if m == 0 {
        return Ok(0.0);
    }
    Ok(a.intersection_len(b) as f64 / m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Positive,
    Negative,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "pos",
            Label::Negative => "neg",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub query: String,
    pub other: String,
    pub label: Label,
    /// Overlap or planar distance, depending on the mode.
    pub score: f64,
}

/// What mining needs to know about a submap.
#[derive(Debug, Clone)]
pub struct MiningItem<'a> {
    pub id: &'a str,
    pub sequence: &'a str,
    pub timestamp: f64,
    pub pose: Option<Pose>,
    /// Local-frame cloud; only read in overlap mode.
    pub cloud: Option<&'a PointCloud>,
}

/// Labels every unordered pair once, with the smaller id as the query.
/// Output is sorted by `(query, other)` so it does not depend on input
/// order.
pub fn mine_pairs(items: &[MiningItem<'_>], cfg: &MiningConfig) -> Result<Vec<Pair>> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].id.cmp(items[b].id));
    if order.windows(2).any(|w| items[w[0]].id == items[w[1]].id) {
        return Err(Error::Dataset("duplicate submap id".into()));
    }
    let sorted: Vec<&MiningItem> = order.iter().map(|&i| &items[i]).collect();
    let mut poses = Vec::with_capacity(sorted.len());
    for it in &sorted {
        poses.push(
            it.pose
                .ok_or_else(|| Error::Dataset(format!("submap {} has no pose", it.id)))?,
        );
    }
    let voxels: Vec<VoxelSet> = match cfg.mode {
        MiningMode::Distance => Vec::new(),
        MiningMode::Overlap => {
            let idx: Vec<usize> = (0..sorted.len()).collect();
            par::try_map(&idx, |&i| {
                let cloud = sorted[i].cloud.ok_or_else(|| {
                    Error::Dataset(format!("submap {} has no cloud", sorted[i].id))
                })?;
                Ok::<_, Error>(voxelize(&cloud.transform(&poses[i]), cfg.voxel))
            })?
        }
    };
    let n = sorted.len();
    let rows: Vec<Result<Vec<Pair>>> = par::map_range(n, |i| {
        let mut out = Vec::new();
        for j in i + 1..n {
            let (a, b) = (sorted[i], sorted[j]);
            if a.sequence == b.sequence && (a.timestamp - b.timestamp).abs() < cfg.exclusion {
                continue;
            }
            let d = poses[i].dist_2d(&poses[j]);
            let (label, score) = match cfg.mode {
                MiningMode::Distance => {
                    let l = if d < cfg.pos_distance {
                        Some(Label::Positive)
                    } else if d > cfg.neg_distance {
                        Some(Label::Negative)
                    } else {
                        None
                    };
                    (l, d)
                }
                MiningMode::Overlap => {
                    let o = if d > cfg.gate {
                        0.0
                    } else {
                        overlap(&voxels[i], &voxels[j])?
                    };
                    let l = if o > cfg.pos_overlap {
                        Some(Label::Positive)
                    } else if o < cfg.neg_overlap {
                        Some(Label::Negative)
                    } else {
                        None
                    };
                    (l, o)
                }
            };
            if let Some(label) = label {
                out.push(Pair {
                    query: a.id.to_string(),
                    other: b.id.to_string(),
                    label,
                    score,
                });
            }
        }
        Ok(out)
    });
    let mut pairs = Vec::new();
    for r in rows {
        pairs.extend(r?);
    }
    Ok(pairs)
}

pub fn pairs_to_csv(pairs: &[Pair]) -> String {
    let mut s = String::from("query_id,other_id,label,score\n");
    for p in pairs {
        s.push_str(&format!(
            "{},{},{},{}\n",
            p.query, p.other, p.label, p.score
        ));
    }
    s
}

pub fn pairs_from_csv(text: &str) -> Result<Vec<Pair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "query_id,other_id,label,score" {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("unexpected pairs header {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |m: &str| Error::Parse {
            line: i + 1,
            message: format!("{m}: {line:?}"),
        };
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let label = match f[2] {
            "pos" => Label::Positive,
            "neg" => Label::Negative,
            _ => return Err(bad("label must be pos or neg")),
        };
        let score = f[3].parse::<f64>().map_err(|_| bad("bad score"))?;
        out.push(Pair {
            query: f[0].to_string(),
            other: f[1].to_string(),
            label,
            score,
        });
    }
    Ok(out)
}

/// Symmetric positive and negative neighbor sets per id.
#[derive(Debug, Default, Clone)]
pub struct PairIndex {
    pub positives: std::collections::BTreeMap<String, Vec<String>>,
    pub negatives: std::collections::BTreeMap<String, Vec<String>>,
}

impl PairIndex {
    pub fn new(pairs: &[Pair]) -> Self {
        let mut idx = PairIndex::default();
        let mut seen = HashSet::new();
        for p in pairs {
            if !seen.insert((p.query.clone(), p.other.clone())) {
                continue;
            }
            let map = match p.label {
                Label::Positive => &mut idx.positives,
                Label::Negative => &mut idx.negatives,
            };
            map.entry(p.query.clone())
                .or_default()
                .push(p.other.clone());
            map.entry(p.other.clone())
                .or_default()
                .push(p.query.clone());
        }
        for v in idx.positives.values_mut().chain(idx.negatives.values_mut()) {
            v.sort();
            v.dedup();
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point3;
    use proptest::prelude::*;

    fn set(cells: &[[i32; 3]]) -> VoxelSet {
        VoxelSet::from_cells(0.5, cells.iter().copied())
    }

    #[test]
    fn overlap_examples() {
        let (a, b, c, d) = ([0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]);
        assert_eq!(overlap(&set(&[a, b]), &set(&[a, b])).unwrap(), 1.0);
        assert_eq!(overlap(&set(&[a]), &set(&[b])).unwrap(), 0.0);
        assert_eq!(overlap(&set(&[a, b, c]), &set(&[b, c, d])).unwrap(), 0.5);
        assert!(matches!(
            overlap(&set(&[]), &set(&[])),
            Err(Error::UndefinedOverlap)
        ));
        assert_eq!(overlap(&set(&[a]), &set(&[])).unwrap(), 0.0);
    }

    #[test]
    fn subset_union_versus_min_denominator() {
        let big: Vec<[i32; 3]> = (0..40).map(|i| [i, -i, i % 3]).collect();
        let (a, b) = (set(&big[..20]), set(&big));
        assert_eq!(overlap(&a, &b).unwrap(), 0.5);
        assert_eq!(overlap_min(&a, &b).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn overlap_symmetric_and_monotone(
            a in prop::collection::vec((-5i32..5, -5i32..5, -2i32..2), 1..60),
            b in prop::collection::vec((-5i32..5, -5i32..5, -2i32..2), 1..60),
            extra in prop::collection::vec((10i32..15, 0i32..3, 0i32..2), 1..10),
        ) {
            let to = |v: &[(i32, i32, i32)]| v.iter().map(|&(x, y, z)| [x, y, z]).collect::<Vec<_>>();
            let (ca, cb) = (to(&a), to(&b));
            let (sa, sb) = (set(&ca), set(&cb));
            let o = overlap(&sa, &sb).unwrap();
            prop_assert_eq!(o, overlap(&sb, &sa).unwrap());
            prop_assert_eq!(overlap(&sa, &sa).unwrap(), 1.0);
            let shared = to(&extra);
            let sa2 = set(&[ca.clone(), shared.clone()].concat());
            let sb2 = set(&[cb.clone(), shared].concat());
            prop_assert!(overlap(&sa2, &sb2).unwrap() >= o - 1e-12);
        }
    }

    fn cloud(seed: u64) -> PointCloud {
        (0..400)
            .map(|i| {
                let t = (i as f64 + seed as f64 * 0.37) * 0.61;
                Point3::new(
                    (t * 1.3).sin() * 8.0,
                    (t * 0.7).cos() * 8.0,
                    (t * 0.3).sin() * 2.0,
                )
            })
            .collect()
    }

    #[test]
    fn pose_aligned_copy_is_positive() {
        let local = cloud(1);
        let pose_a = Pose::from_xyz_yaw([10.0, 5.0, 0.0], 0.0);
        let pose_b = Pose::from_xyz_yaw([12.0, 4.0, 0.5], 0.7);
        // the same world points seen from another pose
        let world = local.transform(&pose_a);
        let local_b = world.transform(&pose_b.inverse());
        let items = vec![
            MiningItem {
                id: "a",
                sequence: "s",
                timestamp: 0.0,
                pose: Some(pose_a),
                cloud: Some(&local),
            },
            MiningItem {
                id: "b",
                sequence: "s",
                timestamp: 1000.0,
                pose: Some(pose_b),
                cloud: Some(&local_b),
            },
        ];
        let pairs = mine_pairs(&items, &MiningConfig::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].label, Label::Positive);
        assert!(pairs[0].score > 0.99);
    }

    fn dist_items(xs: &[(f64, f64)]) -> (Vec<String>, Vec<Pose>) {
        let ids = (0..xs.len()).map(|i| format!("m{i:02}")).collect();
        let poses = xs
            .iter()
            .map(|&(x, t)| Pose::from_xyz_yaw([x, 0.0, 0.0], t))
            .collect();
        (ids, poses)
    }

    #[test]
    fn distance_mode_thresholds() {
        let (ids, poses) = dist_items(&[(0.0, 0.0), (100.0, 0.0), (5.0, 0.0), (30.0, 0.0)]);
        let items: Vec<MiningItem> = ids
            .iter()
            .zip(&poses)
            .map(|(id, p)| MiningItem {
                id,
                sequence: id,
                timestamp: 0.0,
                pose: Some(*p),
                cloud: None,
            })
            .collect();
        let cfg = MiningConfig {
            mode: MiningMode::Distance,
            ..MiningConfig::default()
        };
        let pairs = mine_pairs(&items, &cfg).unwrap();
        let find = |a: &str, b: &str| {
            pairs
                .iter()
                .find(|p| p.query == a && p.other == b)
                .map(|p| p.label)
        };
        assert_eq!(find("m00", "m01"), Some(Label::Negative));
        assert_eq!(find("m00", "m02"), Some(Label::Positive));
        assert_eq!(find("m00", "m03"), None);
        let mut rev = items.clone();
        rev.reverse();
        assert_eq!(mine_pairs(&rev, &cfg).unwrap(), pairs);
        let pos: HashSet<_> = pairs
            .iter()
            .filter(|p| p.label == Label::Positive)
            .map(|p| (&p.query, &p.other))
            .collect();
        assert!(pairs
            .iter()
            .filter(|p| p.label == Label::Negative)
            .all(|p| !pos.contains(&(&p.query, &p.other))));
    }

    #[test]
    fn temporal_neighbors_are_skipped() {
        let c = cloud(2);
        let mk = |id: &'static str, t: f64| MiningItem {
            id,
            sequence: "s",
            timestamp: t,
            pose: Some(Pose::IDENTITY),
            cloud: Some(&c),
        };
        let items = vec![mk("a", 0.0), mk("b", 50.0), mk("c", 700.0)];
        let pairs = mine_pairs(&items, &MiningConfig::default()).unwrap();
        let keys: Vec<_> = pairs
            .iter()
            .map(|p| (p.query.as_str(), p.other.as_str()))
            .collect();
        assert_eq!(keys, vec![("a", "c"), ("b", "c")]);
    }

    #[test]
    fn missing_pose_is_dataset_error() {
        let items = vec![
            MiningItem {
                id: "a",
                sequence: "s",
                timestamp: 0.0,
                pose: None,
                cloud: None,
            },
            MiningItem {
                id: "b",
                sequence: "t",
                timestamp: 0.0,
                pose: Some(Pose::IDENTITY),
                cloud: None,
            },
        ];
        let cfg = MiningConfig {
            mode: MiningMode::Distance,
            ..MiningConfig::default()
        };
        assert!(matches!(mine_pairs(&items, &cfg), Err(Error::Dataset(_))));
    }

    #[test]
    fn far_pairs_skip_voxelization() {
        let c = cloud(3);
        let items = vec![
            MiningItem {
                id: "a",
                sequence: "s",
                timestamp: 0.0,
                pose: Some(Pose::IDENTITY),
                cloud: Some(&c),
            },
            MiningItem {
                id: "b",
                sequence: "t",
                timestamp: 0.0,
                pose: Some(Pose::from_translation([61.0, 0.0, 0.0])),
                cloud: Some(&c),
            },
        ];
        let pairs = mine_pairs(&items, &MiningConfig::default()).unwrap();
        assert_eq!(pairs[0].score, 0.0);
        assert_eq!(pairs[0].label, Label::Negative);
    }

    #[test]
    fn csv_round_trip_and_index() {
        let pairs = vec![
            Pair {
                query: "a".into(),
                other: "b".into(),
                label: Label::Positive,
                score: 0.95,
            },
            Pair {
                query: "a".into(),
                other: "c".into(),
                label: Label::Negative,
                score: 0.125,
            },
        ];
        let back = pairs_from_csv(&pairs_to_csv(&pairs)).unwrap();
        assert_eq!(back, pairs);
        let idx = PairIndex::new(&pairs);
        assert_eq!(idx.positives["b"], vec!["a".to_string()]);
        assert_eq!(idx.negatives["a"], vec!["c".to_string()]);
        assert!(pairs_from_csv("bad header\n").is_err());
        assert!(pairs_from_csv("query_id,other_id,label,score\na,b,maybe,1\n").is_err());
    }
}
