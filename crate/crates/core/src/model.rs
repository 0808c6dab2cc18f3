//! Complete descriptor model (backbone plus head) and its file format.
//!
//! Layout: `FLPR-M`, u32 version, u32 config length, JSON config block,
//! u32 tensor count, then per tensor u32 rows, u32 cols and the values as
//! f32 little-endian in declaration order. All integers are little-endian.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, BackboneParams};
use crate::bev::{BevStack, DensityImage};
use crate::error::{Error, Result};
use crate::graph::{Eval, Graph, Tensor};
use crate::head::{self, Head, HeadConfig, HeadParams};
use crate::par;

pub const MODEL_MAGIC: &[u8; 6] = b"FLPR-M";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    backbone: BackboneConfig,
    head: Option<HeadConfig>,
}

pub(crate) fn encode_model(
    bcfg: &BackboneConfig,
    hcfg: Option<&HeadConfig>,
    backbone: &BackboneParams,
    head: Option<&HeadParams>,
) -> Result<Vec<u8>> {
    let block = serde_json::to_vec(&ConfigBlock {
        backbone: bcfg.clone(),
        head: hcfg.cloned(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    let mut tensors = backbone.tensors();
    if let Some(h) = head {
        tensors.extend(h.tensors());
    }
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(&block);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "model file truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub(crate) fn decode_model(
    bytes: &[u8],
) -> Result<(
    BackboneConfig,
    Option<HeadConfig>,
    BackboneParams,
    Option<HeadParams>,
)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(6)
        .map_err(|_| Error::Format("not a model file".into()))?
        != MODEL_MAGIC
    {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model file version {version}, this build reads version {MODEL_VERSION}"
        )));
    }
    let len = r.u32()? as usize;
    let block: ConfigBlock = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Format(format!("bad config block: {e}")))?;
    block.backbone.validate()?;
    let mut shapes = backbone::param_shapes(&block.backbone);
    let nb = shapes.len();
    if let Some(h) = &block.head {
        h.validate()?;
        shapes.extend(head::param_shapes(block.backbone.token_dim(), h));
    }
    let count = r.u32()? as usize;
    if count != shapes.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {count}",
            shapes.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (i, &(rows, cols)) in shapes.iter().enumerate() {
        let (fr, fc) = (r.u32()? as usize, r.u32()? as usize);
        if (fr, fc) != (rows, cols) {
            return Err(Error::Format(format!(
                "tensor {i} has shape ({fr}, {fc}), expected ({rows}, {cols})"
            )));
        }
        let raw = r.take(rows * cols * 4)?;
        let vals = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push(Array2::from_shape_vec((rows, cols), vals).unwrap());
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensors",
            bytes.len() - r.pos
        )));
    }
    let head_tensors = tensors.split_off(nb);
    let bb = BackboneParams::from_vec(block.backbone.layers, tensors);
    let hp = block.head.as_ref().map(|_| Head::from_vec(head_tensors));
    Ok((block.backbone, block.head, bb, hp))
}

/// Backbone, head and their configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone_cfg: BackboneConfig,
    pub head_cfg: HeadConfig,
    pub backbone: BackboneParams,
    pub head: HeadParams,
}

/// Descriptor together with the per-token slice weights used to build it.
#[derive(Debug, Clone)]
pub struct Described {
    pub descriptor: Vec<f64>,
    pub weights: Tensor,
}

impl Model {
    pub fn init(backbone_cfg: BackboneConfig, head_cfg: HeadConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = BackboneParams::init(&backbone_cfg, &mut rng)?;
        let head = HeadParams::init(backbone_cfg.token_dim(), &head_cfg, &mut rng)?;
        Ok(Model {
            backbone_cfg,
            head_cfg,
            backbone,
            head,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.backbone.tensors();
        t.extend(self.head.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.backbone.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_model(
            &self.backbone_cfg,
            Some(&self.head_cfg),
            &self.backbone,
            Some(&self.head),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match decode_model(bytes)? {
            (backbone_cfg, Some(head_cfg), backbone, Some(head)) => Ok(Model {
                backbone_cfg,
                head_cfg,
                backbone,
                head,
            }),
            _ => Err(Error::Format("model file has no head section".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_bytes(&crate::fsutil::read(path)?)
    }

    /// Per-slice token sets; slices run in parallel.
    pub fn token_sets(&self, images: &[DensityImage]) -> Result<Vec<Tensor>> {
        par::try_map(images, |img| {
            backbone::token_set(&self.backbone, &self.backbone_cfg, img)
        })
    }

    pub fn describe_with_weights(&self, stack: &BevStack) -> Result<Described> {
        let sets = self.token_sets(&stack.images)?;
        let mut g = Eval;
        let vars: Vec<_> = sets.into_iter().map(|t| g.constant(t)).collect();
        let hw = head::bind(&mut g, &self.head, 0);
        let (d, w) = head::head_forward(&mut g, &vars, &hw, &self.head_cfg)?;
        let rows = g.value(&vars[0]).nrows();
        let weights = match w {
            Some(w) => (*w).clone(),
            None => head::uniform_weights(rows, vars.len()),
        };
        Ok(Described {
            descriptor: d.iter().copied().collect(),
            weights,
        })
    }

    pub fn describe(&self, stack: &BevStack) -> Result<Vec<f64>> {
        Ok(self.describe_with_weights(stack)?.descriptor)
    }

    /// Single-image path: the token set goes straight to aggregation.
    pub fn describe_single(&self, image: &DensityImage) -> Result<Vec<f64>> {
        let p = backbone::token_set(&self.backbone, &self.backbone_cfg, image)?;
        let mut g = Eval;
        let pv = g.constant(p);
        let w_g = g.param(1, &self.head.w_g);
        let d = head::aggregate_global(&mut g, &pv, &w_g, self.head_cfg.gem_p)?;
        Ok(d.iter().copied().collect())
    }
}

/// Full differentiable pipeline for one submap. With `single` set, the
/// one-image token set bypasses fusion.
pub fn describe_graph<'p, G: Graph<'p>>(
    g: &mut G,
    images: &[DensityImage],
    bw: &backbone::Backbone<G::Var>,
    hw: &Head<G::Var>,
    bcfg: &BackboneConfig,
    hcfg: &HeadConfig,
    single: bool,
) -> Result<G::Var> {
    let mut sets = Vec::with_capacity(images.len());
    for img in images {
        sets.push(backbone::forward(g, img, bw, bcfg)?);
    }
    if single {
        if sets.len() != 1 {
            return Err(Error::Usage(
                "single-image path needs exactly one image".into(),
            ));
        }
        return head::aggregate_global(g, &sets[0], &hw.w_g, hcfg.gem_p);
    }
    Ok(head::head_forward(g, &sets, hw, hcfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tape;
    use rand::Rng;

    fn micro_model(seed: u64) -> Model {
        let b = BackboneConfig {
            patch: 4,
            channels: 8,
            layers: 3,
            heads: 2,
            levels: [1, 2, 3],
            height: 8,
            width: 8,
        };
        Model::init(
            b,
            HeadConfig {
                dim: 12,
                ..HeadConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn random_stack(rng: &mut ChaCha8Rng, s: usize, n: usize) -> BevStack {
        BevStack {
            images: (0..s)
                .map(|_| {
                    let mut im = DensityImage::zeros(n, n, 0.5, 30.0);
                    im.values
                        .iter_mut()
                        .for_each(|v| *v = rng.random_range(0.0..1.0));
                    im
                })
                .collect(),
            bands: (0..s).map(|i| (1.0 + i as f64, 2.0 + i as f64)).collect(),
        }
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let m = micro_model(0);
        let m2 = Model::from_bytes(&m.to_bytes().unwrap()).unwrap();
        assert_eq!(m, m2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.flpr");
        m.save(&path).unwrap();
        assert_eq!(Model::load(&path).unwrap(), m);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let m = micro_model(1);
        let bytes = m.to_bytes().unwrap();
        let trunc = &bytes[..bytes.len() - 3];
        assert!(matches!(Model::from_bytes(trunc), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::from_bytes(&bad), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[6..10].copy_from_slice(&2u32.to_le_bytes());
        match Model::from_bytes(&v2) {
            Err(Error::Format(msg)) => assert!(msg.contains("version 2")),
            other => panic!("{other:?}"),
        }
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Model::from_bytes(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn backbone_only_file_is_not_a_model() {
        let m = micro_model(2);
        let bytes = encode_model(&m.backbone_cfg, None, &m.backbone, None).unwrap();
        assert!(matches!(Model::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_slices_equal_single_image_descriptor() {
        let m = micro_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = random_stack(&mut rng, 1, 8);
        let dup = BevStack {
            images: vec![one.images[0].clone(); 5],
            bands: vec![(1.0, 2.0); 5],
        };
        let a = m.describe(&dup).unwrap();
        let b = m.describe_single(&one.images[0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_slice_is_bitwise_single_path() {
        let m = micro_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_stack(&mut rng, 1, 8);
        assert_eq!(
            m.describe(&s).unwrap(),
            m.describe_single(&s.images[0]).unwrap()
        );
    }

    #[test]
    fn descriptor_is_unit_and_deterministic() {
        let m = micro_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_stack(&mut rng, 5, 8);
        let d = m.describe_with_weights(&s).unwrap();
        assert_eq!(d.descriptor.len(), 12);
        let n: f64 = d.descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(d.weights.dim(), (6, 5));
        assert_eq!(m.describe(&s).unwrap(), d.descriptor);
    }

    #[test]
    fn graph_and_eval_descriptors_agree() {
        let m = micro_model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_stack(&mut rng, 3, 8);
        let mut t = Tape::new();
        let bw = backbone::bind(&mut t, &m.backbone, 0);
        let hw = head::bind(&mut t, &m.head, m.backbone.count());
        let d = describe_graph(
            &mut t,
            &s.images,
            &bw,
            &hw,
            &m.backbone_cfg,
            &m.head_cfg,
            false,
        )
        .unwrap();
        let e = m.describe(&s).unwrap();
        assert_eq!(t.value(&d).iter().copied().collect::<Vec<_>>(), e);
    }
}
