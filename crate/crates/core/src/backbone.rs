//! Patchifying transformer encoder.
//!
//! Each BEV image is cut into `p×p` patches, linearly embedded to `C`
//! channels, prefixed with class and distillation tokens and passed through
//! `L` pre-norm encoder layers. The outputs of three chosen layers are
//! concatenated along channels into a token set of `(N+2)×3C`.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bev::DensityImage;
use crate::error::{Error, Result};
use crate::graph::{Eval, Graph, Tensor};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch: usize,
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    /// One-based indices of the low, mid and high layers.
    pub levels: [usize; 3],
    pub height: usize,
    pub width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            patch: 16,
            channels: 384,
            layers: 12,
            heads: 6,
            levels: [2, 7, 12],
            height: 480,
            width: 480,
        }
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        BackboneConfig {
            patch: 8,
            channels: 32,
            layers: 4,
            heads: 2,
            levels: [2, 3, 4],
            height: 64,
            width: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("backbone.patch", self.patch),
            ("backbone.channels", self.channels),
            ("backbone.layers", self.layers),
            ("backbone.heads", self.heads),
            ("backbone.height", self.height),
            ("backbone.width", self.width),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config(
                "backbone.patch",
                format!(
                    "input {}x{} is not divisible by patch size {}",
                    self.height, self.width, self.patch
                ),
            ));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::config(
                "backbone.heads",
                format!(
                    "channels {} not divisible by heads {}",
                    self.channels, self.heads
                ),
            ));
        }
        let [lo, mid, hi] = self.levels;
        if !(1 <= lo && lo < mid && mid < hi && hi <= self.layers) {
            return Err(Error::config(
                "backbone.levels",
                format!(
                    "need 1 <= low < mid < high <= layers ({}), got {:?}",
                    self.layers, self.levels
                ),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 2
    }

    /// Width of the multi-level token set, `3C`.
    pub fn token_dim(&self) -> usize {
        3 * self.channels
    }
}

/// Parameters of one encoder layer. Projections are stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

const LAYER_TENSORS: usize = 16;

impl<T> Layer<T> {
    fn fields(&self) -> [&T; LAYER_TENSORS] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; LAYER_TENSORS] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Self {
        let mut next = || it.next().expect("too few tensors for layer");
        Layer {
            ln1_g: next(),
            ln1_b: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_g: next(),
            ln2_b: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        }
    }
}

/// Backbone weights, generic over the storage so the same layout can hold
/// tensors, graph variables or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    /// `p² × C` patch adapter.
    pub adapter_w: T,
    pub adapter_b: T,
    pub cls: T,
    pub dist: T,
    /// `(N+2) × C`.
    pub pos: T,
    pub layers: Vec<Layer<T>>,
}

pub type BackboneParams = Backbone<Tensor>;

impl<T> Backbone<T> {
    /// All tensors in declaration order.
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = vec![
            &self.adapter_w,
            &self.adapter_b,
            &self.cls,
            &self.dist,
            &self.pos,
        ];
        for l in &self.layers {
            out.extend(l.fields());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.adapter_w,
            &mut self.adapter_b,
            &mut self.cls,
            &mut self.dist,
            &mut self.pos,
        ];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out
    }

    pub fn count(&self) -> usize {
        5 + LAYER_TENSORS * self.layers.len()
    }

    /// Rebuilds a layout for `layers` encoder layers from tensors in
    /// declaration order.
    pub fn from_vec(layers: usize, items: Vec<T>) -> Self {
        assert_eq!(
            items.len(),
            5 + LAYER_TENSORS * layers,
            "tensor count mismatch"
        );
        let mut it = items.into_iter();
        let mut next = || it.next().unwrap();
        let (adapter_w, adapter_b, cls, dist, pos) = (next(), next(), next(), next(), next());
        let layers = (0..layers).map(|_| Layer::from_iter(&mut it)).collect();
        Backbone {
            adapter_w,
            adapter_b,
            cls,
            dist,
            pos,
            layers,
        }
    }

    pub fn map<'a, U>(&'a self, f: impl FnMut(&'a T) -> U) -> Backbone<U> {
        Backbone::from_vec(
            self.layers.len(),
            self.tensors().into_iter().map(f).collect(),
        )
    }
}

/// Shapes of every tensor in declaration order.
pub fn param_shapes(cfg: &BackboneConfig) -> Vec<(usize, usize)> {
    let c = cfg.channels;
    let mut shapes = vec![
        (cfg.patch * cfg.patch, c),
        (1, c),
        (1, c),
        (1, c),
        (cfg.num_tokens(), c),
    ];
    for _ in 0..cfg.layers {
        shapes.extend([
            (1, c),
            (1, c),
            (c, c),
            (1, c),
            (c, c),
            (1, c),
            (c, c),
            (1, c),
            (c, c),
            (1, c),
            (1, c),
            (1, c),
            (c, 4 * c),
            (1, 4 * c),
            (4 * c, c),
            (1, c),
        ]);
    }
    shapes
}

/// Truncated normal at ±2σ, rounded to f32-representable values.
pub(crate) fn trunc_normal<R: Rng>(rng: &mut R, shape: (usize, usize), std: f64) -> Tensor {
    Array2::from_shape_simple_fn(shape, || loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return (z * std) as f32 as f64;
        }
    })
}

impl BackboneParams {
    /// Random initialization: truncated normal for weights and learned
    /// tokens, ones for layer-norm scales, zeros for biases.
    pub fn init<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let shapes = param_shapes(cfg);
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(i, &shape)| {
                let kind = if i < 5 {
                    i
                } else {
                    5 + (i - 5) % LAYER_TENSORS
                };
                match kind {
                    1 => Array2::zeros(shape),
                    0 | 2 | 3 | 4 => trunc_normal(rng, shape, INIT_STD),
                    k => match k - 5 {
                        0 | 10 => Array2::ones(shape),
                        2 | 4 | 6 | 8 | 12 | 14 => trunc_normal(rng, shape, INIT_STD),
                        _ => Array2::zeros(shape),
                    },
                }
            })
            .collect();
        Ok(Backbone::from_vec(cfg.layers, tensors))
    }

    pub fn check_shapes(&self, cfg: &BackboneConfig) -> Result<()> {
        if self.layers.len() != cfg.layers {
            return Err(Error::Format(format!(
                "expected {} layers, found {}",
                cfg.layers,
                self.layers.len()
            )));
        }
        for (i, (t, s)) in self
            .tensors()
            .into_iter()
            .zip(param_shapes(cfg))
            .enumerate()
        {
            if t.dim() != s {
                return Err(Error::Format(format!(
                    "tensor {i} has shape {:?}, expected {s:?}",
                    t.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Binds every tensor as a graph parameter with ids `base, base+1, ...`.
pub fn bind<'p, G: Graph<'p>>(
    g: &mut G,
    params: &'p BackboneParams,
    base: usize,
) -> Backbone<G::Var> {
    let mut id = base;
    params.map(|t| {
        let v = g.param(id, t);
        id += 1;
        v
    })
}

/// Flattens an image into an `N × p²` matrix, patches in row-major grid
/// order and pixels row-major within a patch.
pub fn patch_matrix(image: &DensityImage, cfg: &BackboneConfig) -> Result<Tensor> {
    if image.rows != cfg.height || image.cols != cfg.width {
        return Err(Error::config(
            "backbone.height",
            format!(
                "image is {}x{}, model expects {}x{}",
                image.rows, image.cols, cfg.height, cfg.width
            ),
        ));
    }
    let p = cfg.patch;
    let (gr, gc) = cfg.grid();
    let mut m = Array2::zeros((gr * gc, p * p));
    for pr in 0..gr {
        for pc in 0..gc {
            let mut row = m.row_mut(pr * gc + pc);
            for i in 0..p {
                for j in 0..p {
                    row[i * p + j] = image.get(pr * p + i, pc * p + j);
                }
            }
        }
    }
    Ok(m)
}

/// Token matrix `(N+2) × C`: adapted patches behind the class and
/// distillation tokens, plus positional embeddings.
pub fn patch_embed<'p, G: Graph<'p>>(
    g: &mut G,
    image: &DensityImage,
    w: &Backbone<G::Var>,
    cfg: &BackboneConfig,
) -> Result<G::Var> {
    let patches = g.constant(patch_matrix(image, cfg)?);
    let x = g.matmul(&patches, &w.adapter_w);
    let x = g.add_row(&x, &w.adapter_b);
    let x = g.concat_rows(&[w.cls.clone(), w.dist.clone(), x]);
    Ok(g.add(&x, &w.pos))
}

/// Multi-head self-attention on an already normalized input. Returns the
/// projected output and the per-head attention probabilities.
pub fn self_attention<'p, G: Graph<'p>>(
    g: &mut G,
    x: &G::Var,
    layer: &Layer<G::Var>,
    heads: usize,
) -> (G::Var, Vec<G::Var>) {
    let c = g.value(x).ncols();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = g.matmul(x, &layer.wq);
    let q = g.add_row(&q, &layer.bq);
    let k = g.matmul(x, &layer.wk);
    let k = g.add_row(&k, &layer.bk);
    let v = g.matmul(x, &layer.wv);
    let v = g.add_row(&v, &layer.bv);
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(&q, a, b);
        let kh = g.slice_cols(&k, a, b);
        let vh = g.slice_cols(&v, a, b);
        let scores = g.matmul_nt(&qh, &kh);
        let scores = g.affine(&scores, scale, 0.0);
        let p = g.softmax_rows(&scores);
        outs.push(g.matmul(&p, &vh));
        probs.push(p);
    }
    let cat = if heads == 1 {
        outs.pop().unwrap()
    } else {
        g.concat_cols(&outs)
    };
    let o = g.matmul(&cat, &layer.wo);
    (g.add_row(&o, &layer.bo), probs)
}

/// One pre-norm encoder layer.
pub fn layer_forward<'p, G: Graph<'p>>(
    g: &mut G,
    x: &G::Var,
    layer: &Layer<G::Var>,
    heads: usize,
) -> G::Var {
    let n = g.layer_norm(x, LN_EPS);
    let n = g.mul_row(&n, &layer.ln1_g);
    let n = g.add_row(&n, &layer.ln1_b);
    let (att, _) = self_attention(g, &n, layer, heads);
    let x = g.add(x, &att);
    let n = g.layer_norm(&x, LN_EPS);
    let n = g.mul_row(&n, &layer.ln2_g);
    let n = g.add_row(&n, &layer.ln2_b);
    let h = g.matmul(&n, &layer.w1);
    let h = g.add_row(&h, &layer.b1);
    let h = g.gelu(&h);
    let h = g.matmul(&h, &layer.w2);
    let h = g.add_row(&h, &layer.b2);
    g.add(&x, &h)
}

/// Runs all layers and returns every layer's output.
pub fn encoder_forward<'p, G: Graph<'p>>(
    g: &mut G,
    tokens: &G::Var,
    w: &Backbone<G::Var>,
    cfg: &BackboneConfig,
) -> Result<Vec<G::Var>> {
    let c = g.value(tokens).ncols();
    if c != cfg.channels {
        return Err(Error::config(
            "backbone.channels",
            format!("tokens have {c} channels, expected {}", cfg.channels),
        ));
    }
    let mut outs = Vec::with_capacity(w.layers.len());
    let mut x = tokens.clone();
    for (i, layer) in w.layers.iter().enumerate() {
        x = layer_forward(g, &x, layer, cfg.heads);
        if !g.value(&x).iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite activation in encoder layer {}",
                i + 1
            )));
        }
        outs.push(x.clone());
    }
    Ok(outs)
}

/// `[P_low | P_mid | P_high]` from one-based layer indices.
pub fn multi_level_concat<'p, G: Graph<'p>>(
    g: &mut G,
    outputs: &[G::Var],
    levels: [usize; 3],
) -> G::Var {
    let parts: Vec<G::Var> = levels.iter().map(|&l| outputs[l - 1].clone()).collect();
    g.concat_cols(&parts)
}

/// Token set `(N+2) × 3C` for one image.
pub fn forward<'p, G: Graph<'p>>(
    g: &mut G,
    image: &DensityImage,
    w: &Backbone<G::Var>,
    cfg: &BackboneConfig,
) -> Result<G::Var> {
    let tokens = patch_embed(g, image, w, cfg)?;
    let outs = encoder_forward(g, &tokens, w, cfg)?;
    Ok(multi_level_concat(g, &outs, cfg.levels))
}

/// Inference-only token set.
pub fn token_set(
    params: &BackboneParams,
    cfg: &BackboneConfig,
    image: &DensityImage,
) -> Result<Tensor> {
    let mut g = Eval;
    let w = bind(&mut g, params, 0);
    let p = forward(&mut g, image, &w, cfg)?;
    Ok((*p).clone())
}

pub fn save_params(path: &Path, cfg: &BackboneConfig, params: &BackboneParams) -> Result<()> {
    let bytes = crate::model::encode_model(cfg, None, params, None)?;
    crate::fsutil::write_atomic(path, &bytes)
}

pub fn load_params(path: &Path) -> Result<(BackboneConfig, BackboneParams)> {
    let bytes = crate::fsutil::read(path)?;
    let (cfg, _, params, _) = crate::model::decode_model(&bytes)?;
    Ok((cfg, params))
}
