//! File-level stages behind the command-line tool. Each stage reads its
//! inputs, writes its outputs atomically into an output directory and
//! echoes the effective configuration there as `config.json`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::bev::{make_bev_stack, BevConfig, BevStack};
use crate::cloud::{save_pcd, PcdEncoding, PointCloud};
use crate::config::RunConfig;
use crate::dataset::{pose_to_array, DescriptorSet, Manifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::eval::{self, RetrievalIndex};
use crate::fsutil::write_atomic;
use crate::head::weight_table_csv;
use crate::mining::{mine_pairs, pairs_from_csv, pairs_to_csv, MiningItem, PairIndex};
use crate::model::Model;
use crate::par;
use crate::preprocess::preprocess;
use crate::synth::synthesize;
use crate::trainer::{loss_csv, train, LossRecord, TrainSet};

pub const MANIFEST: &str = "manifest.jsonl";
pub const CONFIG_ECHO: &str = "config.json";
pub const PAIRS: &str = "pairs.csv";
pub const MODEL: &str = "model.flpr";
pub const LOSS: &str = "loss.csv";
pub const DESCRIPTORS: &str = "descriptors.bin";
pub const REPORT: &str = "report.csv";
pub const RADIUS: &str = "recall_radius.csv";

/// Wall-clock per stage plus free-form measurements.
#[derive(Debug, Default, Clone)]
pub struct Timing {
    pub stages: Vec<(String, Duration)>,
    pub notes: Vec<(String, String)>,
}

impl Timing {
    pub fn time<R>(&mut self, stage: &str, f: impl FnOnce() -> R) -> R {
        let t = Instant::now();
        let r = f();
        self.stages.push((stage.to_string(), t.elapsed()));
        r
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, d) in &self.stages {
            s.push_str(&format!("timing {k}: {:.3} s\n", d.as_secs_f64()));
        }
        for (k, v) in &self.notes {
            s.push_str(&format!("timing {k}: {v}\n"));
        }
        s
    }
}

/// Options shared by every stage.
#[derive(Debug, Clone)]
pub struct Stage {
    pub config: RunConfig,
    pub overwrite: bool,
}

impl Stage {
    pub fn new(config: RunConfig) -> Self {
        Stage {
            config,
            overwrite: false,
        }
    }

    /// Refuses to write into a non-empty directory unless overwriting.
    fn open_output(&self, dir: &Path) -> Result<()> {
        if !self.overwrite {
            if let Ok(mut entries) = std::fs::read_dir(dir) {
                if entries.next().is_some() {
                    return Err(Error::Usage(format!(
                        "output directory {} is not empty; pass --overwrite to replace its files",
                        dir.display()
                    )));
                }
            }
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(CONFIG_ECHO), self.config.to_json().as_bytes())
    }
}

/// Cloud ready for rasterization: normalized unless the record says it
/// already is.
pub fn prepared_cloud(manifest: &Manifest, i: usize, cfg: &RunConfig) -> Result<PointCloud> {
    let cloud = manifest.load_cloud(i)?;
    if manifest.records[i].preprocessed {
        Ok(cloud)
    } else {
        preprocess(&cloud, &cfg.preprocess)
    }
}

fn select(manifest: &Manifest, sequences: &[String]) -> Result<Vec<usize>> {
    for s in sequences {
        if !manifest.records.iter().any(|r| &r.sequence == s) {
            return Err(Error::Dataset(format!("manifest has no sequence {s:?}")));
        }
    }
    Ok((0..manifest.len())
        .filter(|&i| sequences.is_empty() || sequences.contains(&manifest.records[i].sequence))
        .collect())
}

/// Synthetic forest dataset: binary PCD clouds in the sensor frame, one
/// pose file per sequence and a manifest.
pub fn cmd_synth(stage: &Stage, seed: u64, out: &Path) -> Result<Manifest> {
    stage.open_output(out)?;
    let (_, submaps) = synthesize(seed, &stage.config.synth)?;
    let records: Vec<ManifestRecord> = submaps
        .iter()
        .map(|s| ManifestRecord {
            id: s.id.clone(),
            sequence: s.sequence.clone(),
            timestamp: s.timestamp,
            pcd: format!("clouds/{}.pcd", s.id),
            pose: Some(pose_to_array(&s.pose)),
            preprocessed: false,
        })
        .collect();
    par::try_map(&submaps, |s| {
        save_pcd(
            &out.join("clouds").join(format!("{}.pcd", s.id)),
            &s.cloud,
            PcdEncoding::Binary,
        )
    })?;
    let manifest = Manifest::new(out.to_path_buf(), records)?;
    for seq in manifest.sequences() {
        let mut text = String::from("# timestamp tx ty tz qx qy qz qw\n");
        for r in manifest.records.iter().filter(|r| r.sequence == seq) {
            let p = r.pose.expect("synthetic poses");
            text.push_str(&format!(
                "{} {} {} {} {} {} {} {}\n",
                r.timestamp, p[0], p[1], p[2], p[3], p[4], p[5], p[6]
            ));
        }
        write_atomic(&out.join(format!("poses_{seq}.txt")), text.as_bytes())?;
    }
    manifest.save(&out.join(MANIFEST))?;
    Ok(manifest)
}

/// Terrain-normalized, band-cropped clouds plus a manifest pointing at them.
pub fn cmd_preprocess(stage: &Stage, manifest: &Manifest, out: &Path) -> Result<Manifest> {
    stage.open_output(out)?;
    let idx: Vec<usize> = (0..manifest.len()).collect();
    let records = par::try_map(&idx, |&i| {
        let cloud = prepared_cloud(manifest, i, &stage.config)?;
        let r = &manifest.records[i];
        let rel = format!("clouds/{}.pcd", r.id);
        save_pcd(&out.join(&rel), &cloud, PcdEncoding::Binary)?;
        Ok::<_, Error>(ManifestRecord {
            pcd: rel,
            preprocessed: true,
            ..r.clone()
        })
    })?;
    let m = Manifest::new(out.to_path_buf(), records)?;
    m.save(&out.join(MANIFEST))?;
    Ok(m)
}

fn bev_size(cfg: &RunConfig) -> (usize, usize) {
    (cfg.backbone.height, cfg.backbone.width)
}

fn stack_for(manifest: &Manifest, i: usize, cfg: &RunConfig, bev: &BevConfig) -> Result<BevStack> {
    make_bev_stack(&prepared_cloud(manifest, i, cfg)?, bev, bev_size(cfg))
}

/// Per submap and slice: `bev/<id>_s<j>.f32` (raw float image) and a 16-bit
/// PGM preview.
pub fn cmd_rasterize(stage: &Stage, manifest: &Manifest, out: &Path) -> Result<usize> {
    stage.open_output(out)?;
    let cfg = &stage.config;
    let idx: Vec<usize> = (0..manifest.len()).collect();
    let counts = par::try_map(&idx, |&i| {
        let stack = stack_for(manifest, i, cfg, &cfg.bev)?;
        let id = &manifest.records[i].id;
        for (j, img) in stack.images.iter().enumerate() {
            write_atomic(
                &out.join("bev").join(format!("{id}_s{j}.f32")),
                &img.to_raw_f32(),
            )?;
            write_atomic(
                &out.join("bev").join(format!("{id}_s{j}.pgm")),
                &img.to_pgm(),
            )?;
        }
        Ok::<_, Error>(stack.len())
    })?;
    Ok(counts.iter().sum())
}

/// Training pairs over the selected sequences (all when empty).
pub fn cmd_mine(
    stage: &Stage,
    manifest: &Manifest,
    sequences: &[String],
    out: &Path,
) -> Result<usize> {
    stage.config.mining.validate()?;
    let idx = select(manifest, sequences)?;
    let poses = idx
        .iter()
        .map(|&i| manifest.records[i].pose())
        .collect::<Result<Vec<_>>>()?;
    let clouds: Vec<PointCloud> = match stage.config.mining.mode {
        crate::mining::MiningMode::Overlap => par::try_map(&idx, |&i| manifest.load_cloud(i))?,
        crate::mining::MiningMode::Distance => Vec::new(),
    };
    let items: Vec<MiningItem> = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let r = &manifest.records[i];
            MiningItem {
                id: &r.id,
                sequence: &r.sequence,
                timestamp: r.timestamp,
                pose: Some(poses[k]),
                cloud: clouds.get(k),
            }
        })
        .collect();
    let pairs = mine_pairs(&items, &stage.config.mining)?;
    stage.open_output(out)?;
    write_atomic(&out.join(PAIRS), pairs_to_csv(&pairs).as_bytes())?;
    Ok(pairs.len())
}

/// Two-stage training; writes the model and the loss curve.
pub fn cmd_train(
    stage: &Stage,
    manifest: &Manifest,
    pairs_csv: &Path,
    out: &Path,
) -> Result<(Model, Vec<LossRecord>)> {
    let cfg = &stage.config;
    cfg.validate()?;
    let pairs = pairs_from_csv(&crate::fsutil::read_to_string(pairs_csv)?)?;
    let index = PairIndex::new(&pairs);
    let idx: Vec<usize> = (0..manifest.len())
        .filter(|&i| {
            let id = &manifest.records[i].id;
            index.positives.contains_key(id) || index.negatives.contains_key(id)
        })
        .collect();
    let set = TrainSet {
        ids: idx
            .iter()
            .map(|&i| manifest.records[i].id.clone())
            .collect(),
        clouds: par::try_map(&idx, |&i| prepared_cloud(manifest, i, cfg))?,
    };
    let mut model = Model::init(cfg.backbone.clone(), cfg.head.clone(), cfg.train.seed)?;
    let curve = train(&mut model, &set, &index, &cfg.bev, &cfg.train)?;
    stage.open_output(out)?;
    model.save(&out.join(MODEL))?;
    write_atomic(&out.join(LOSS), loss_csv(&curve).as_bytes())?;
    Ok((model, curve))
}

/// Rejects models whose input size differs from the configured raster.
fn check_model(model: &Model, cfg: &RunConfig) -> Result<()> {
    if model.backbone_cfg.height != cfg.backbone.height
        || model.backbone_cfg.width != cfg.backbone.width
    {
        return Err(Error::config(
            "backbone.height",
            format!(
                "model expects {}x{} images but the configuration has {}x{}",
                model.backbone_cfg.height,
                model.backbone_cfg.width,
                cfg.backbone.height,
                cfg.backbone.width
            ),
        ));
    }
    Ok(())
}

/// Global descriptors for every submap of the manifest.
pub fn extract_descriptors(
    cfg: &RunConfig,
    manifest: &Manifest,
    model: &Model,
    timing: &mut Timing,
) -> Result<DescriptorSet> {
    check_model(model, cfg)?;
    let idx: Vec<usize> = (0..manifest.len()).collect();
    let stacks = timing.time("rasterize", || {
        par::try_map(&idx, |&i| stack_for(manifest, i, cfg, &cfg.bev))
    })?;
    let t = Instant::now();
    let rows = par::try_map(&stacks, |s| model.describe(s))?;
    if !rows.is_empty() {
        let per = t.elapsed().as_secs_f64() / rows.len() as f64;
        timing.stages.push(("describe".into(), t.elapsed()));
        timing.note("describe_ms_per_submap", format!("{:.3}", per * 1e3));
    }
    Ok(DescriptorSet {
        ids: manifest.ids(),
        rows,
    })
}

pub fn cmd_extract(
    stage: &Stage,
    manifest: &Manifest,
    model_path: &Path,
    out: &Path,
    timing: &mut Timing,
) -> Result<DescriptorSet> {
    let model = Model::load(model_path)?;
    let set = extract_descriptors(&stage.config, manifest, &model, timing)?;
    stage.open_output(out)?;
    set.save(&out.join(DESCRIPTORS))?;
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalProtocol {
    Intra,
    Inter,
}

impl std::str::FromStr for EvalProtocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(EvalProtocol::Intra),
            "inter" => Ok(EvalProtocol::Inter),
            other => Err(Error::Usage(format!(
                "unknown protocol {other:?} (intra or inter)"
            ))),
        }
    }
}

/// Index over the descriptors of the selected sequences.
pub fn build_index(
    set: &DescriptorSet,
    manifest: &Manifest,
    sequences: &[String],
) -> Result<RetrievalIndex> {
    let meta = manifest.entry_meta()?;
    let keep = select(manifest, sequences)?;
    let mut rows = Vec::new();
    let mut metas = Vec::new();
    for i in keep {
        let m = &meta[i];
        let d = set
            .get(&m.id)
            .ok_or_else(|| Error::Dataset(format!("no descriptor for submap {}", m.id)))?;
        rows.push(d.to_vec());
        metas.push(m.clone());
    }
    RetrievalIndex::new(rows, metas)
}

/// Report text files: `(report.csv, Some(recall_radius.csv))` for intra.
pub fn evaluate(
    cfg: &RunConfig,
    index: &RetrievalIndex,
    protocol: EvalProtocol,
) -> Result<(String, Option<String>)> {
    let mut seqs: Vec<String> = index.meta().iter().map(|m| m.sequence.clone()).collect();
    seqs.sort();
    seqs.dedup();
    match protocol {
        EvalProtocol::Intra => {
            let mut reports = Vec::new();
            for s in &seqs {
                match eval::evaluate_intra(index, s, &cfg.eval) {
                    Ok(r) => reports.push(r),
                    Err(Error::UndefinedMetric(msg)) => {
                        log::warn!("sequence {s}: {msg}; left out of the report")
                    }
                    Err(e) => return Err(e),
                }
            }
            if reports.is_empty() {
                return Err(Error::UndefinedMetric(
                    "no sequence has a query with a revisit".into(),
                ));
            }
            Ok((
                eval::intra_report_csv(&reports),
                Some(eval::radius_curve_csv(&reports)),
            ))
        }
        EvalProtocol::Inter => Ok((
            eval::inter_report_csv(&eval::evaluate_inter(index, &seqs, &cfg.eval)?),
            None,
        )),
    }
}

pub fn cmd_eval(
    stage: &Stage,
    descriptors: &Path,
    manifest: &Manifest,
    sequences: &[String],
    protocol: EvalProtocol,
    out: &Path,
) -> Result<String> {
    stage.config.eval.validate()?;
    let set = DescriptorSet::load(descriptors)?;
    let index = build_index(&set, manifest, sequences)?;
    let (report, radius) = evaluate(&stage.config, &index, protocol)?;
    stage.open_output(out)?;
    write_atomic(&out.join(REPORT), report.as_bytes())?;
    if let Some(r) = radius {
        write_atomic(&out.join(RADIUS), r.as_bytes())?;
    }
    Ok(report)
}

/// Per-patch slice weights of one submap as CSV.
pub fn cmd_export_weights(
    stage: &Stage,
    manifest: &Manifest,
    id: &str,
    model_path: &Path,
    out: &Path,
) -> Result<PathBuf> {
    let cfg = &stage.config;
    let model = Model::load(model_path)?;
    check_model(&model, cfg)?;
    let i = manifest
        .position(id)
        .ok_or_else(|| Error::Dataset(format!("manifest has no submap {id:?}")))?;
    let described = model.describe_with_weights(&stack_for(manifest, i, cfg, &cfg.bev)?)?;
    stage.open_output(out)?;
    let path = out.join(format!("weights_{id}.csv"));
    let grid_cols = model.backbone_cfg.grid().1;
    write_atomic(
        &path,
        weight_table_csv(&described.weights, grid_cols).as_bytes(),
    )?;
    Ok(path)
}
