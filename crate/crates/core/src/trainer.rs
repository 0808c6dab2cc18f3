//! Triplet training of the full descriptor pipeline with plain SGD.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone;
use crate::bev::{make_bev_stack, BevConfig, DensityImage};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::graph::{Eval, Graph, Tape, Tensor};
use crate::head;
use crate::mining::PairIndex;
use crate::model::{describe_graph, Model};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub lr: f64,
    /// Single-image epochs, then multi-slice epochs.
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Triplets per SGD step.
    pub batch_size: usize,
    pub seed: u64,
    /// Random yaw rotation of every training cloud.
    pub augment: bool,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.3,
            lr: 1e-3,
            stage1_epochs: 20,
            stage2_epochs: 20,
            batch_size: 8,
            seed: 0,
            augment: true,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config("train.margin", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// `1 - <a, b> / (|a| |b|)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Usage("descriptor dimensions differ".into()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine distance of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

/// `max(d_qp - d_qn + m, 0)`.
pub fn triplet_loss(d_qp: f64, d_qn: f64, margin: f64) -> f64 {
    (d_qp - d_qn + margin).max(0.0)
}

/// Hinge on unit descriptors inside a graph, as a `1 × 1` value.
pub fn triplet_loss_graph<'p, G: Graph<'p>>(
    g: &mut G,
    q: &G::Var,
    p: &G::Var,
    n: &G::Var,
    margin: f64,
) -> G::Var {
    // d_qp - d_qn = <q, n> - <q, p>
    let qp = g.dot(q, p);
    let qn = g.dot(q, n);
    let diff = g.sub(&qn, &qp);
    let shifted = g.affine(&diff, 1.0, margin);
    g.relu(&shifted)
}

/// Angle drawn uniformly from the open interval (-π, π).
pub fn random_yaw<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let a = rng.random_range(-PI..PI);
        if a != -PI {
            return a;
        }
    }
}

/// Rotation about z by a random yaw; returns the angle used.
pub fn augment<R: Rng>(cloud: &PointCloud, rng: &mut R) -> (PointCloud, f64) {
    let angle = random_yaw(rng);
    (cloud.rotate_z(angle), angle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub query: usize,
    pub positive: usize,
    pub negative: usize,
}

/// One random positive and negative per anchor that has both, in shuffled
/// anchor order.
pub fn sample_triplets<R: Rng>(ids: &[String], pairs: &PairIndex, rng: &mut R) -> Vec<Triplet> {
    let pos_of = |id: &str| ids.iter().position(|x| x == id);
    let mut out = Vec::new();
    for (qi, id) in ids.iter().enumerate() {
        let pos: Vec<usize> = pairs
            .positives
            .get(id)
            .map(|v| v.iter().filter_map(|x| pos_of(x)).collect())
            .unwrap_or_default();
        let neg: Vec<usize> = pairs
            .negatives
            .get(id)
            .map(|v| v.iter().filter_map(|x| pos_of(x)).collect())
            .unwrap_or_default();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        out.push(Triplet {
            query: qi,
            positive: pos[rng.random_range(0..pos.len())],
            negative: neg[rng.random_range(0..neg.len())],
        });
    }
    out.shuffle(rng);
    out
}

/// Images for one descriptor evaluation.
type Images = Vec<DensityImage>;

/// Loss and per-tensor gradients of one triplet.
pub fn triplet_gradients(
    model: &Model,
    imgs: [&Images; 3],
    margin: f64,
    single: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut t = Tape::new();
    let bw = backbone::bind(&mut t, &model.backbone, 0);
    let hw = head::bind(&mut t, &model.head, model.backbone.count());
    let mut d = Vec::with_capacity(3);
    for im in imgs {
        d.push(describe_graph(
            &mut t,
            im,
            &bw,
            &hw,
            &model.backbone_cfg,
            &model.head_cfg,
            single,
        )?);
    }
    let loss = triplet_loss_graph(&mut t, &d[0], &d[1], &d[2], margin);
    let value = t.value(&loss)[[0, 0]];
    let grads = t.backward(&loss)?;
    let out = model
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, p)| grads.param(i).unwrap_or_else(|| Array2::zeros(p.dim())))
        .collect();
    Ok((value, out))
}

/// Loss value only, through the inference backend.
pub fn triplet_loss_value(
    model: &Model,
    imgs: [&Images; 3],
    margin: f64,
    single: bool,
) -> Result<f64> {
    let mut g = Eval;
    let bw = backbone::bind(&mut g, &model.backbone, 0);
    let hw = head::bind(&mut g, &model.head, model.backbone.count());
    let mut d = Vec::with_capacity(3);
    for im in imgs {
        d.push(describe_graph(
            &mut g,
            im,
            &bw,
            &hw,
            &model.backbone_cfg,
            &model.head_cfg,
            single,
        )?);
    }
    Ok(triplet_loss_graph(&mut g, &d[0], &d[1], &d[2], margin)[[0, 0]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Relative error of the directional derivative along a random
    /// direction over all parameters.
    pub directional_rel_err: f64,
}

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms. A step-1e-4
/// difference of a loss near 0.3 carries roundoff around 1e-11, so smaller
/// gradients cannot be resolved.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Five-point central difference of `f` at 0 with step `h`. The loss is a
/// small difference of nearly equal similarities, so the three-point
/// stencil's `h^2` term alone can exceed the tolerance.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let (p1, m1, p2, m2) = (f(h)?, f(-h)?, f(2.0 * h)?, f(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// Central finite differences against the tape. `per_tensor` entries of
/// every tensor are checked (all of them when `None`), plus the derivative
/// along one random unit direction in the full parameter space.
pub fn gradient_check(
    model: &Model,
    imgs: [&Images; 3],
    margin: f64,
    single: bool,
    per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradCheck> {
    let (_, grads) = triplet_gradients(model, imgs, margin, single)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    for (ti, t) in model.tensors().iter().enumerate() {
        match per_tensor {
            None => probes.extend((0..t.len()).map(|e| (ti, e))),
            Some(k) => {
                probes.extend((0..k.min(t.len())).map(|_| (ti, rng.random_range(0..t.len()))))
            }
        }
    }
    let loss_at = |m: &Model| triplet_loss_value(m, imgs, margin, single);
    let errs = par::try_map(&probes, |&(ti, e)| {
        let mut m = model.clone();
        let cols = m.tensors()[ti].ncols();
        let (r, c) = (e / cols, e % cols);
        let x0 = m.tensors()[ti][[r, c]];
        let fd = central_difference(
            |s| {
                m.tensors_mut()[ti][[r, c]] = x0 + s;
                loss_at(&m)
            },
            FD_STEP,
        )?;
        Ok::<_, Error>(rel_err(grads[ti][[r, c]], fd))
    })?;
    let mut dir: Vec<Tensor> = model
        .tensors()
        .iter()
        .map(|t| Array2::from_shape_simple_fn(t.dim(), || rng.random_range(-1.0..1.0)))
        .collect();
    let norm = dir
        .iter()
        .map(|d| d.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    dir.iter_mut().for_each(|d| d.mapv_inplace(|v| v / norm));
    let shifted = |s: f64| {
        let mut m = model.clone();
        for (t, d) in m.tensors_mut().into_iter().zip(&dir) {
            t.scaled_add(s, d);
        }
        m
    };
    let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| (g * d).sum()).sum();
    let fd = central_difference(|s| loss_at(&shifted(s)), FD_STEP)?;
    Ok(GradCheck {
        checked: probes.len(),
        max_rel_err: errs.into_iter().fold(0.0, f64::max),
        directional_rel_err: rel_err(analytic, fd),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub stage: usize,
    pub mean_loss: f64,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("epoch,stage,mean_loss\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.stage, r.mean_loss));
    }
    s
}

/// Pre-processed training clouds and their ids.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub ids: Vec<String>,
    pub clouds: Vec<PointCloud>,
}

fn round_f32(t: &mut Tensor) {
    t.mapv_inplace(|v| v as f32 as f64);
}

/// Sums losses and gradients in triplet order.
fn reduce(results: Vec<(f64, Vec<Tensor>)>) -> (f64, Vec<Tensor>) {
    let mut iter = results.into_iter();
    let (mut loss, mut acc) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (a, b) in acc.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain stochastic gradient descent.
    #[default]
    Sgd,
    /// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8 and bias correction.
    Adam,
}

/// Update rule state across steps.
struct Stepper {
    kind: Optimizer,
    lr: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Stepper {
    fn new(kind: Optimizer, lr: f64) -> Self {
        Stepper {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies the mean gradient `grads / n` and rounds parameters to f32.
    fn apply(&mut self, model: &mut Model, grads: Vec<Tensor>, n: usize) {
        let scale = 1.0 / n as f64;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in model.tensors_mut().into_iter().zip(&grads) {
                    p.scaled_add(-self.lr * scale, g);
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
                    self.v = self.m.clone();
                }
                self.step += 1;
                let c1 = 1.0 - B1.powi(self.step);
                let c2 = 1.0 - B2.powi(self.step);
                for (((p, g), m), v) in model
                    .tensors_mut()
                    .into_iter()
                    .zip(&grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    ndarray::Zip::from(p)
                        .and(g)
                        .and(m)
                        .and(v)
                        .for_each(|p, &g, m, v| {
                            let g = g * scale;
                            *m = B1 * *m + (1.0 - B1) * g;
                            *v = B2 * *v + (1.0 - B2) * g * g;
                            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                        });
                }
            }
        }
        for p in model.tensors_mut() {
            round_f32(p);
        }
    }
}

/// Two-stage training: single-image descriptors first, then the full
/// multi-slice model. Returns the per-epoch mean loss.
pub fn train(
    model: &mut Model,
    set: &TrainSet,
    pairs: &PairIndex,
    bev: &BevConfig,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    bev.validate()?;
    let size = (model.backbone_cfg.height, model.backbone_cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probe = sample_triplets(&set.ids, pairs, &mut rng.clone());
    if probe.is_empty() {
        return Err(Error::Dataset(
            "no valid triplets: no submap has both a positive and a negative".into(),
        ));
    }
    let mut curve = Vec::new();
    let mut stepper = Stepper::new(cfg.optimizer, cfg.lr);
    for (stage, epochs) in [(1usize, cfg.stage1_epochs), (2, cfg.stage2_epochs)] {
        let stage_bev = if stage == 1 {
            bev.single()
        } else {
            bev.clone()
        };
        let single = stage == 1;
        let fixed: Option<Vec<Images>> = if cfg.augment {
            None
        } else {
            Some(par::try_map(&set.clouds, |c| {
                make_bev_stack(c, &stage_bev, size).map(|s| s.images)
            })?)
        };
        for epoch in 1..=epochs {
            let triplets = sample_triplets(&set.ids, pairs, &mut rng);
            let mut total = 0.0;
            for batch in triplets.chunks(cfg.batch_size) {
                let angles: Vec<[f64; 3]> = batch
                    .iter()
                    .map(|_| [0; 3].map(|_| random_yaw(&mut rng)))
                    .collect();
                let work: Vec<(Triplet, [f64; 3])> = batch.iter().copied().zip(angles).collect();
                let results = par::try_map(&work, |(t, ang)| {
                    let ids = [t.query, t.positive, t.negative];
                    let owned: Vec<Images> = match &fixed {
                        Some(_) => Vec::new(),
                        None => ids
                            .iter()
                            .zip(ang)
                            .map(|(&i, &a)| {
                                make_bev_stack(&set.clouds[i].rotate_z(a), &stage_bev, size)
                                    .map(|s| s.images)
                            })
                            .collect::<Result<_>>()?,
                    };
                    let imgs: [&Images; 3] = match &fixed {
                        Some(f) => ids.map(|i| &f[i]),
                        None => [&owned[0], &owned[1], &owned[2]],
                    };
                    triplet_gradients(model, imgs, cfg.margin, single)
                })?;
                let (loss, grads) = reduce(results);
                stepper.apply(model, grads, batch.len());
                total += loss;
            }
            let mean_loss = total / triplets.len().max(1) as f64;
            log::info!("stage {stage} epoch {epoch}: mean loss {mean_loss:.5}");
            curve.push(LossRecord {
                epoch,
                stage,
                mean_loss,
            });
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::head::HeadConfig;

    #[test]
    fn five_point_stencil_is_exact_for_quartics() {
        let d = central_difference(|s| Ok((1.0 + s).powi(4) - 2.0 * s * s), 0.1).unwrap();
        assert!((d - 4.0).abs() < 1e-12, "{d}");
    }

    #[test]
    fn cosine_distance_examples() {
        let a = [0.6, 0.8];
        assert!(cosine_distance(&a, &a).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&a, &[-0.6, -0.8]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &a),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn triplet_loss_examples() {
        assert_eq!(triplet_loss(0.2, 0.5, 0.3), 0.0);
        assert!((triplet_loss(0.5, 0.2, 0.3) - 0.6).abs() < 1e-15);
        assert_eq!(triplet_loss(0.4, 0.4, 0.3), 0.3);
    }

    #[test]
    fn graph_loss_matches_scalar_loss() {
        let unit = |v: [f64; 3]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            Array2::from_shape_vec((1, 3), v.iter().map(|x| x / n).collect()).unwrap()
        };
        let (q, p, n) = (
            unit([1.0, 0.2, 0.0]),
            unit([0.3, 1.0, 0.1]),
            unit([0.9, 0.1, 0.3]),
        );
        let mut g = Eval;
        let (qv, pv, nv) = (
            g.constant(q.clone()),
            g.constant(p.clone()),
            g.constant(n.clone()),
        );
        let l = triplet_loss_graph(&mut g, &qv, &pv, &nv, 0.3)[[0, 0]];
        let dqp = cosine_distance(q.as_slice().unwrap(), p.as_slice().unwrap()).unwrap();
        let dqn = cosine_distance(q.as_slice().unwrap(), n.as_slice().unwrap()).unwrap();
        assert!((l - triplet_loss(dqp, dqn, 0.3)).abs() < 1e-12);
    }

    #[test]
    fn flat_hinge_has_zero_gradient() {
        let q = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let n = Array2::from_shape_vec((1, 2), vec![-1.0, 0.0]).unwrap();
        let mut t = Tape::new();
        let qv = t.param(0, &q);
        let pv = t.param(1, &q);
        let nv = t.param(2, &n);
        let l = triplet_loss_graph(&mut t, &qv, &pv, &nv, 0.3);
        assert_eq!(t.value(&l)[[0, 0]], 0.0);
        let g = t.backward(&l).unwrap();
        for id in 0..3 {
            assert!(g.param(id).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn normalization_gradient_is_tangent_projection() {
        let x = Array2::from_shape_vec((1, 3), vec![0.48, 0.6, 0.64]).unwrap();
        let up = Array2::from_shape_vec((1, 3), vec![0.3, -1.2, 0.5]).unwrap();
        let mut t = Tape::new();
        let xv = t.param(0, &x);
        let uv = t.constant(up.clone());
        let y = t.l2_normalize_rows(&xv);
        let s = t.dot(&y, &uv);
        let g = t.backward(&s).unwrap().param(0).unwrap();
        let proj = &up - &(&x * up.dot(&x.t())[[0, 0]]);
        for (a, b) in g.iter().zip(proj.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let f = |v: &Tensor| {
            let n = v.dot(&v.t())[[0, 0]].sqrt();
            (v / n).dot(&up.t())[[0, 0]]
        };
        for i in 0..3 {
            let mut p = x.clone();
            p[[0, i]] += 1e-6;
            let mut m = x.clone();
            m[[0, i]] -= 1e-6;
            assert!(rel_err(g[[0, i]], (f(&p) - f(&m)) / 2e-6) < 1e-6);
        }
    }

    #[test]
    fn augment_angles_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cloud = PointCloud::new(vec![crate::cloud::Point3::new(1.0, 2.0, 3.0)]);
        let mut angles: Vec<f64> = (0..10_000)
            .map(|_| {
                let (c, a) = augment(&cloud, &mut rng);
                assert_eq!(c.points[0].z, 3.0);
                a
            })
            .collect();
        angles.sort_by(f64::total_cmp);
        let n = angles.len() as f64;
        let d = angles
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let cdf = (a + PI) / (2.0 * PI);
                (cdf - i as f64 / n)
                    .abs()
                    .max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max);
        // Kolmogorov-Smirnov critical value at the 1% level
        assert!(d < 1.63 / n.sqrt(), "D = {d}");
        assert!(angles[0] > -PI && angles[angles.len() - 1] < PI);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(augment(&cloud, &mut r1), augment(&cloud, &mut r2));
    }

    fn micro() -> Model {
        let b = BackboneConfig {
            patch: 4,
            channels: 4,
            layers: 3,
            heads: 2,
            levels: [1, 2, 3],
            height: 8,
            width: 8,
        };
        Model::init(
            b,
            HeadConfig {
                dim: 6,
                ..HeadConfig::default()
            },
            0,
        )
        .unwrap()
    }

    fn images(seed: u64, s: usize, n: usize) -> Images {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..s)
            .map(|_| {
                let mut im = DensityImage::zeros(n, n, 0.5, 30.0);
                im.values
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(0.0..1.0));
                im
            })
            .collect()
    }

    /// Larger weights than the default init so every path carries signal.
    fn loud(mut m: Model, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in m.tensors_mut() {
            t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
        m
    }

    #[test]
    fn every_parameter_passes_finite_differences_on_micro_model() {
        let m = loud(micro(), 1);
        let (q, p, n) = (images(1, 3, 8), images(2, 3, 8), images(3, 3, 8));
        let loss = triplet_loss_value(&m, [&q, &p, &n], 0.3, false).unwrap();
        assert!(loss > 0.0);
        let r = gradient_check(&m, [&q, &p, &n], 0.3, false, None, 0).unwrap();
        assert_eq!(r.checked, m.num_parameters());
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        assert!(r.directional_rel_err < 1e-4, "{r:?}");
        let r1 = gradient_check(
            &m,
            [&q[..1].to_vec(), &p[..1].to_vec(), &n[..1].to_vec()],
            0.3,
            true,
            None,
            0,
        )
        .unwrap();
        assert!(r1.max_rel_err < 1e-4, "{r1:?}");
    }

    #[test]
    fn step_along_negative_gradient_is_first_order() {
        let m = loud(micro(), 2);
        let (q, p, n) = (images(4, 2, 8), images(5, 2, 8), images(6, 2, 8));
        let (l0, grads) = triplet_gradients(&m, [&q, &p, &n], 0.3, false).unwrap();
        let gnorm2: f64 = grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum();
        for eps in [1e-3, 1e-4] {
            let mut m2 = m.clone();
            for (t, g) in m2.tensors_mut().into_iter().zip(&grads) {
                t.scaled_add(-eps, g);
            }
            let l1 = triplet_loss_value(&m2, [&q, &p, &n], 0.3, false).unwrap();
            let predicted = -eps * gnorm2;
            assert!(
                ((l1 - l0) - predicted).abs() < 0.05 * predicted.abs(),
                "eps {eps}"
            );
        }
    }

    #[test]
    fn foreign_tape_value_is_rejected() {
        let mut t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.constant(Array2::ones((1, 1)));
        assert!(matches!(t2.backward(&x), Err(Error::Usage(_))));
    }

    fn tiny_set() -> (Model, TrainSet, PairIndex, BevConfig) {
        use crate::cloud::Point3;
        use crate::mining::{Label, Pair};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clouds: Vec<PointCloud> = (0..4)
            .map(|k| {
                (0..400)
                    .map(|_| {
                        let x = rng.random_range(-8.0..8.0) + k as f64;
                        Point3::new(x, rng.random_range(-8.0..8.0), rng.random_range(0.5..3.5))
                    })
                    .collect()
            })
            .collect();
        let ids: Vec<String> = (0..4).map(|k| format!("s_{k}")).collect();
        let pair = |a: usize, b: usize, label| Pair {
            query: ids[a].clone(),
            other: ids[b].clone(),
            label,
            score: 0.0,
        };
        let pairs = PairIndex::new(&[
            pair(0, 1, Label::Positive),
            pair(2, 3, Label::Positive),
            pair(0, 2, Label::Negative),
            pair(1, 3, Label::Negative),
        ]);
        let bev = BevConfig {
            slices: 2,
            slice_height: 1.0,
            z_lo: 1.0,
            resolution: 1.0,
            extent: 4.0,
            ..BevConfig::default()
        };
        (micro(), TrainSet { ids, clouds }, pairs, bev)
    }

    fn short(lr: f64) -> TrainConfig {
        TrainConfig {
            lr,
            stage1_epochs: 2,
            stage2_epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (m0, set, pairs, bev) = tiny_set();
        let mut m = m0.clone();
        let curve = train(&mut m, &set, &pairs, &bev, &short(0.0)).unwrap();
        assert_eq!(m, m0);
        assert_eq!(curve.len(), 4);
        assert!(curve
            .iter()
            .all(|r| r.mean_loss.is_finite() && r.mean_loss >= 0.0));
    }

    #[test]
    fn training_is_reproducible_across_job_counts() {
        let (m0, set, pairs, bev) = tiny_set();
        let run = |jobs| {
            par::with_jobs(jobs, || {
                let mut m = m0.clone();
                let c = train(&mut m, &set, &pairs, &bev, &short(0.05)).unwrap();
                (m, c)
            })
        };
        let (ma, ca) = run(1);
        let (mb, cb) = run(3);
        assert_eq!(ca, cb);
        assert_eq!(ma, mb);
        assert_ne!(ma, m0);
        assert!(ma
            .tensors()
            .iter()
            .all(|t| t.iter().all(|&v| v == v as f32 as f64)));
        let csv = loss_csv(&ca);
        assert!(csv.starts_with("epoch,stage,mean_loss\n1,1,"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn no_triplets_is_a_dataset_error() {
        let (mut m, set, _, bev) = tiny_set();
        let err = train(&mut m, &set, &PairIndex::default(), &bev, &short(0.1)).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
    }

    #[test]
    fn sampled_triplets_respect_labels() {
        let (_, set, pairs, _) = tiny_set();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_triplets(&set.ids, &pairs, &mut rng);
        assert_eq!(t.len(), 4);
        for tr in t {
            let q = &set.ids[tr.query];
            assert!(pairs.positives[q].contains(&set.ids[tr.positive]));
            assert!(pairs.negatives[q].contains(&set.ids[tr.negative]));
        }
    }
}
