//! Multi-BEV interaction and global descriptor aggregation.
//!
//! Per-slice token sets are centered across slices, scored against `W_a`
//! to give per-token slice weights, fused into one token set, pooled into
//! `[cls | dist | GeM(patches)]` and projected to a unit-norm descriptor.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{trunc_normal, INIT_STD};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor};

pub const GEM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Weighted,
    Max,
    /// Weights from raw slice features instead of centered ones.
    NoInteraction,
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Fusion::Weighted),
            "max" => Ok(Fusion::Max),
            "no_interaction" => Ok(Fusion::NoInteraction),
            _ => Err(Error::config(
                "head.fusion",
                format!("unknown fusion mode {s:?}"),
            )),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Weighted => "weighted",
            Fusion::Max => "max",
            Fusion::NoInteraction => "no_interaction",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Descriptor dimension D.
    pub dim: usize,
    pub gem_p: f64,
    pub fusion: Fusion,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            dim: 1024,
            gem_p: 3.0,
            fusion: Fusion::Weighted,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("head.dim", "must be at least 1"));
        }
        if !(self.gem_p.is_finite() && self.gem_p > 0.0) {
            return Err(Error::config("head.gem_p", "must be finite and positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    /// `3C × 1` slice scoring vector.
    pub w_a: T,
    /// `9C × D` projection, no bias.
    pub w_g: T,
}

pub type HeadParams = Head<Tensor>;

impl<T> Head<T> {
    pub fn tensors(&self) -> Vec<&T> {
        vec![&self.w_a, &self.w_g]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        vec![&mut self.w_a, &mut self.w_g]
    }

    pub fn from_vec(items: Vec<T>) -> Self {
        assert_eq!(items.len(), 2, "head has two tensors");
        let mut it = items.into_iter();
        Head {
            w_a: it.next().unwrap(),
            w_g: it.next().unwrap(),
        }
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&'a T) -> U) -> Head<U> {
        let w_a = f(&self.w_a);
        Head {
            w_a,
            w_g: f(&self.w_g),
        }
    }
}

pub fn param_shapes(token_dim: usize, cfg: &HeadConfig) -> Vec<(usize, usize)> {
    vec![(token_dim, 1), (3 * token_dim, cfg.dim)]
}

impl HeadParams {
    pub fn init<R: Rng>(token_dim: usize, cfg: &HeadConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let s = param_shapes(token_dim, cfg);
        Ok(Head {
            w_a: trunc_normal(rng, s[0], INIT_STD),
            w_g: trunc_normal(rng, s[1], INIT_STD),
        })
    }

    pub fn check_shapes(&self, token_dim: usize, cfg: &HeadConfig) -> Result<()> {
        for (t, s) in self.tensors().into_iter().zip(param_shapes(token_dim, cfg)) {
            if t.dim() != s {
                return Err(Error::Format(format!(
                    "head tensor has shape {:?}, expected {s:?}",
                    t.dim()
                )));
            }
        }
        Ok(())
    }
}

pub fn bind<'p, G: Graph<'p>>(g: &mut G, params: &'p HeadParams, base: usize) -> Head<G::Var> {
    let mut id = base;
    params.map(|t| {
        let v = g.param(id, t);
        id += 1;
        v
    })
}

fn slice_mean<'p, G: Graph<'p>>(g: &mut G, slices: &[G::Var]) -> G::Var {
    let mut acc = slices[0].clone();
    for s in &slices[1..] {
        acc = g.add(&acc, s);
    }
    g.affine(&acc, 1.0 / slices.len() as f64, 0.0)
}

/// `ΔP_s = P_s - mean_s P_s` per token and channel.
pub fn relative_features<'p, G: Graph<'p>>(g: &mut G, slices: &[G::Var]) -> Vec<G::Var> {
    assert!(!slices.is_empty(), "at least one slice");
    let mean = slice_mean(g, slices);
    slices.iter().map(|s| g.sub(s, &mean)).collect()
}

/// Per-token softmax over slices of `feature_s · W_a`, as `(N+2) × S`.
pub fn softmax_weights<'p, G: Graph<'p>>(g: &mut G, features: &[G::Var], w_a: &G::Var) -> G::Var {
    let logits: Vec<G::Var> = features.iter().map(|f| g.matmul(f, w_a)).collect();
    let logits = if logits.len() == 1 {
        logits[0].clone()
    } else {
        g.concat_cols(&logits)
    };
    g.softmax_rows(&logits)
}

pub fn slice_weights<'p, G: Graph<'p>>(g: &mut G, slices: &[G::Var], w_a: &G::Var) -> G::Var {
    let rel = relative_features(g, slices);
    softmax_weights(g, &rel, w_a)
}

/// Same scoring applied to the raw slice features. Softmax is invariant to
/// the per-token shift this removes, so the result equals
/// [`slice_weights`] up to rounding.
pub fn no_interaction_weights<'p, G: Graph<'p>>(
    g: &mut G,
    slices: &[G::Var],
    w_a: &G::Var,
) -> G::Var {
    softmax_weights(g, slices, w_a)
}

/// `P^w_i = Σ_s w_{i,s} P_{s,i}`.
pub fn weighted_fuse<'p, G: Graph<'p>>(g: &mut G, weights: &G::Var, slices: &[G::Var]) -> G::Var {
    let mut acc: Option<G::Var> = None;
    for (s, p) in slices.iter().enumerate() {
        let w = g.slice_cols(weights, s, s + 1);
        let term = g.mul_col(p, &w);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(&a, &term),
        });
    }
    acc.expect("at least one slice")
}

pub fn max_fuse<'p, G: Graph<'p>>(g: &mut G, slices: &[G::Var]) -> G::Var {
    let mut acc = slices[0].clone();
    for s in &slices[1..] {
        acc = g.max(&acc, s);
    }
    acc
}

/// Channel-wise generalized mean over rows, `1 × K`.
pub fn gem_pool<'p, G: Graph<'p>>(g: &mut G, tokens: &G::Var, p: f64) -> G::Var {
    let x = g.clamp_min(tokens, GEM_EPS);
    let x = g.powf(&x, p);
    let m = g.mean_rows(&x);
    g.powf(&m, 1.0 / p)
}

fn row_norm(t: &Tensor) -> f64 {
    t.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `G = L2(L2([row0 | row1 | GeM(rows 2..)]) · W_g)` as a `1 × D` row.
pub fn aggregate_global<'p, G: Graph<'p>>(
    g: &mut G,
    fused: &G::Var,
    w_g: &G::Var,
    gem_p: f64,
) -> Result<G::Var> {
    let n = g.value(fused).nrows();
    if n < 3 {
        return Err(Error::config(
            "backbone.patch",
            format!("need at least 3 tokens, got {n}"),
        ));
    }
    let cls = g.slice_rows(fused, 0, 1);
    let dist = g.slice_rows(fused, 1, 2);
    let patches = g.slice_rows(fused, 2, n);
    let pooled = gem_pool(g, &patches, gem_p);
    let star = g.concat_cols(&[cls, dist, pooled]);
    let norm = row_norm(g.value(&star));
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Numeric(format!("pooled feature has norm {norm}")));
    }
    let star = g.l2_normalize_rows(&star);
    let proj = g.matmul(&star, w_g);
    let norm = row_norm(g.value(&proj));
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Numeric(format!(
            "projected descriptor has norm {norm}"
        )));
    }
    Ok(g.l2_normalize_rows(&proj))
}

/// Fuses per-slice token sets with the configured mode. Returns the fused
/// set and, for softmax modes, the `(N+2) × S` weights.
pub fn fuse<'p, G: Graph<'p>>(
    g: &mut G,
    slices: &[G::Var],
    w_a: &G::Var,
    mode: Fusion,
) -> (G::Var, Option<G::Var>) {
    match mode {
        Fusion::Weighted => {
            let w = slice_weights(g, slices, w_a);
            (weighted_fuse(g, &w, slices), Some(w))
        }
        Fusion::NoInteraction => {
            let w = no_interaction_weights(g, slices, w_a);
            (weighted_fuse(g, &w, slices), Some(w))
        }
        Fusion::Max => (max_fuse(g, slices), None),
    }
}

/// Head forward from per-slice token sets to a `1 × D` descriptor.
pub fn head_forward<'p, G: Graph<'p>>(
    g: &mut G,
    slices: &[G::Var],
    w: &Head<G::Var>,
    cfg: &HeadConfig,
) -> Result<(G::Var, Option<G::Var>)> {
    if slices.is_empty() {
        return Err(Error::config("bev.slices", "need at least one slice"));
    }
    let (fused, weights) = fuse(g, slices, &w.w_a, cfg.fusion);
    Ok((aggregate_global(g, &fused, &w.w_g, cfg.gem_p)?, weights))
}

/// Weight table rows for patch tokens: `(patch_row, patch_col, w_1..w_S)`.
pub fn weight_table(weights: &Tensor, grid_cols: usize) -> Vec<(usize, usize, Vec<f64>)> {
    (2..weights.nrows())
        .map(|r| {
            let k = r - 2;
            (k / grid_cols, k % grid_cols, weights.row(r).to_vec())
        })
        .collect()
}

pub fn weight_table_csv(weights: &Tensor, grid_cols: usize) -> String {
    let s = weights.ncols();
    let mut out = String::from("patch_row,patch_col");
    for i in 1..=s {
        out.push_str(&format!(",w_{i}"));
    }
    out.push('\n');
    for (r, c, w) in weight_table(weights, grid_cols) {
        out.push_str(&format!("{r},{c}"));
        for v in w {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Uniform `(N+2) × S` weights, used when a fusion mode has none.
pub fn uniform_weights(rows: usize, slices: usize) -> Tensor {
    Array2::from_elem((rows, slices), 1.0 / slices as f64)
}
