//! Synthetic hierarchical data, a small encoder, the training loop and
//! direct free-coordinate tree embedding.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Real, Var};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::geometry::{kernel, Curvature};
use crate::hierarchy::{tree_metric, LabelTree};
use crate::objective::{
    composite_objective, cpcc, cpcc_over_vertices, Batch, DistanceKind, FlatInputs, FlatLoss,
    ObjectiveConfig,
};

/// Parameters of the hierarchical Gaussian generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    /// Distance of each top-level group center from the origin.
    pub coarse_spread: f64,
    /// Offset of each leaf center from its parent.
    pub fine_spread: f64,
    /// Standard deviation of the isotropic sample noise.
    pub noise_sigma: f64,
    pub n_per_leaf: usize,
    pub seed: u64,
    /// Also draw a second, independently perturbed view of every sample.
    pub two_views: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            dim: 16,
            coarse_spread: 4.0,
            fine_spread: 2.0,
            noise_sigma: 0.5,
            n_per_leaf: 50,
            seed: 0,
            two_views: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_per_leaf == 0 {
            return Err(Error::InvalidConfig("dim and n_per_leaf must be positive".into()));
        }
        for (name, v) in [
            ("coarse_spread", self.coarse_spread),
            ("fine_spread", self.fine_spread),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Spreads out of the recommended order `coarse > fine > noise`.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.coarse_spread <= self.fine_spread {
            out.push("coarse_spread should exceed fine_spread".to_string());
        }
        if self.fine_spread <= self.noise_sigma {
            out.push("fine_spread should exceed noise_sigma".to_string());
        }
        out
    }
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Vertex centers: depth-1 vertices sit at `coarse_spread` from the origin,
/// deeper leaves at `fine_spread` from their parent, deeper internal
/// vertices at the geometric mean of the two spreads.
pub fn vertex_centers(tree: &LabelTree, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![vec![0.0; spec.dim]; tree.len()];
    for v in tree.preorder() {
        let Some(p) = tree.parent(v) else { continue };
        let spread = if tree.depth(v) == 1 {
            spec.coarse_spread
        } else if tree.is_leaf(v) {
            spec.fine_spread
        } else {
            (spec.coarse_spread * spec.fine_spread).sqrt()
        };
        let dir = random_direction(rng, spec.dim);
        centers[v] = centers[p].iter().zip(&dir).map(|(c, d)| c + spread * d).collect();
    }
    centers
}

/// Samples around the leaf centers of `tree`, interleaved by class
/// (`n_per_leaf` rounds over all classes). Deterministic per seed.
pub fn generate_hierarchical_gaussians(tree: &LabelTree, spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = vertex_centers(tree, spec, &mut rng);
    let noise = |rng: &mut ChaCha8Rng, base: &[f64]| -> Vec<f64> {
        base.iter()
            .map(|&c| {
                let z: f64 = StandardNormal.sample(rng);
                c + spec.noise_sigma * z
            })
            .collect()
    };
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut views = Vec::new();
    for _ in 0..spec.n_per_leaf {
        for (class, &leaf) in tree.leaves().iter().enumerate() {
            let x = noise(&mut rng, &centers[leaf]);
            if spec.two_views {
                views.push(noise(&mut rng, &x));
            }
            features.push(x);
            labels.push(class);
        }
    }
    let mut data = LabeledDataset::new(features, labels)?;
    if spec.two_views {
        data.second_view = Some(views);
    }
    Ok(data)
}

/// Points far from every class: a Gaussian cluster centered `distance`
/// away from the origin along a fresh random direction.
pub fn generate_ood_cluster(
    dim: usize,
    n: usize,
    distance: f64,
    sigma: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = random_direction(&mut rng, dim);
    (0..n)
        .map(|_| {
            dir.iter()
                .map(|d| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    distance * d + sigma * z
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Linear,
    Mlp1Hidden,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            kind: EncoderKind::Mlp1Hidden,
            input_dim: 16,
            hidden_dim: 32,
            output_dim: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            lr0: 0.05,
            momentum: 0.9,
            schedule: Schedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.batch_size > n {
            return bad(format!("batch_size {} exceeds dataset size {n}", self.batch_size));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be >= 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }

    /// Learning rate used during epoch `e` (0-based). The cosine schedule
    /// anneals from `lr0` to `1e-3 lr0` at the final epoch.
    pub fn lr_at(&self, e: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr0,
            Schedule::Cosine => {
                if self.epochs <= 1 {
                    return self.lr0;
                }
                let lr_min = 1e-3 * self.lr0;
                let t = e as f64 / (self.epochs - 1) as f64;
                lr_min + (self.lr0 - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Output head attached to the encoder for the flat loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Head {
    /// Linear classifier over `classes` fine classes.
    Classifier { classes: usize },
    /// One-hidden-layer ReLU projection of width `dim`, normalized.
    Projection { dim: usize },
}

impl Head {
    pub fn for_loss(flat: FlatLoss, classes: usize, feature_dim: usize) -> Head {
        match flat {
            FlatLoss::CrossEntropy => Head::Classifier { classes },
            FlatLoss::Supcon => Head::Projection {
                dim: feature_dim.min(128),
            },
        }
    }
}

/// One named block of the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
struct Segment {
    name: &'static str,
    offset: usize,
    rows: usize,
    cols: usize,
}

/// Encoder plus head, with all weights in one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderSpec,
    pub head: Head,
    pub params: Vec<f64>,
    layout: Vec<Segment>,
}

fn layout(enc: &EncoderSpec, head: Head) -> Vec<Segment> {
    let mut shapes: Vec<(&'static str, usize, usize)> = match enc.kind {
        EncoderKind::Linear => vec![
            ("enc.w", enc.output_dim, enc.input_dim),
            ("enc.b", enc.output_dim, 1),
        ],
        EncoderKind::Mlp1Hidden => vec![
            ("enc.w1", enc.hidden_dim, enc.input_dim),
            ("enc.b1", enc.hidden_dim, 1),
            ("enc.w2", enc.output_dim, enc.hidden_dim),
            ("enc.b2", enc.output_dim, 1),
        ],
    };
    let d = enc.output_dim;
    match head {
        Head::Classifier { classes } => {
            shapes.push(("head.w", classes, d));
            shapes.push(("head.b", classes, 1));
        }
        Head::Projection { dim } => {
            shapes.push(("proj.w1", d, d));
            shapes.push(("proj.b1", d, 1));
            shapes.push(("proj.w2", dim, d));
            shapes.push(("proj.b2", dim, 1));
        }
    }
    let mut offset = 0;
    shapes
        .into_iter()
        .map(|(name, rows, cols)| {
            let s = Segment {
                name,
                offset,
                rows,
                cols,
            };
            offset += rows * cols;
            s
        })
        .collect()
}

/// `W x + b` for row-major `W` (`rows x x.len()`).
fn affine<T: Real, X: Copy>(w: &[T], b: &[T], x: &[X], mul: impl Fn(T, X) -> T) -> Vec<T> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .fold(bias, |acc, (&wi, &xi)| acc + mul(wi, xi))
        })
        .collect()
}

impl Model {
    /// Fresh model with weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// seeded by the encoder seed.
    pub fn new(encoder: EncoderSpec, head: Head) -> Result<Self> {
        if encoder.input_dim == 0 || encoder.output_dim == 0 || encoder.hidden_dim == 0 {
            return Err(Error::InvalidConfig("encoder dimensions must be positive".into()));
        }
        match head {
            Head::Classifier { classes: 0 } | Head::Projection { dim: 0 } => {
                return Err(Error::InvalidConfig("head width must be positive".into()))
            }
            _ => {}
        }
        let layout = layout(&encoder, head);
        let mut rng = ChaCha8Rng::seed_from_u64(encoder.seed);
        let mut params = Vec::new();
        for (k, seg) in layout.iter().enumerate() {
            // Biases share the fan-in of the weight matrix before them.
            let fan_in = if seg.cols == 1 { layout[k - 1].cols } else { seg.cols };
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.extend((0..seg.rows * seg.cols).map(|_| rng.random_range(-bound..=bound)));
        }
        Ok(Model {
            encoder,
            head,
            params,
            layout,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn seg<'a, T>(&self, p: &'a [T], name: &str) -> &'a [T] {
        let s = self.layout.iter().find(|s| s.name == name).expect("segment");
        &p[s.offset..s.offset + s.rows * s.cols]
    }

    /// Encoder output for one input row.
    pub fn encode<T: Real>(&self, p: &[T], x: &[f64]) -> Vec<T> {
        let mul = |w: T, x: f64| w * x;
        match self.encoder.kind {
            EncoderKind::Linear => affine(self.seg(p, "enc.w"), self.seg(p, "enc.b"), x, mul),
            EncoderKind::Mlp1Hidden => {
                let h: Vec<T> = affine(self.seg(p, "enc.w1"), self.seg(p, "enc.b1"), x, mul)
                    .into_iter()
                    .map(Real::relu)
                    .collect();
                affine(self.seg(p, "enc.w2"), self.seg(p, "enc.b2"), &h, |w, v| w * v)
            }
        }
    }

    /// Head output for one feature row: logits, or a unit-norm projection.
    pub fn head_output<T: Real>(&self, p: &[T], z: &[T]) -> Vec<T> {
        let mul = |w: T, v: T| w * v;
        match self.head {
            Head::Classifier { .. } => affine(self.seg(p, "head.w"), self.seg(p, "head.b"), z, mul),
            Head::Projection { .. } => {
                let h: Vec<T> = affine(self.seg(p, "proj.w1"), self.seg(p, "proj.b1"), z, mul)
                    .into_iter()
                    .map(Real::relu)
                    .collect();
                let u = affine(self.seg(p, "proj.w2"), self.seg(p, "proj.b2"), &h, mul);
                let n = (autodiff::norm_sq(&u) + 1e-24).sqrt();
                u.into_iter().map(|x| x / n).collect()
            }
        }
    }

    /// Encoder features of many rows with the current parameters.
    pub fn embed(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if let Some(r) = rows.iter().find(|r| r.len() != self.encoder.input_dim) {
            return Err(Error::DimensionMismatch {
                expected: self.encoder.input_dim,
                got: r.len(),
            });
        }
        Ok(rows.par_iter().map(|x| self.encode(&self.params, x)).collect())
    }

    /// Parameters by segment name, for the checkpoint format.
    pub fn named_params(&self) -> BTreeMap<String, Vec<f64>> {
        self.layout
            .iter()
            .map(|s| {
                (
                    s.name.to_string(),
                    self.params[s.offset..s.offset + s.rows * s.cols].to_vec(),
                )
            })
            .collect()
    }

    pub fn to_checkpoint(&self, config_echo: serde_json::Value) -> Checkpoint {
        Checkpoint {
            encoder: self.encoder.clone(),
            head: self.head,
            params: self.named_params(),
            config_echo,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut m = Model::new(ck.encoder.clone(), ck.head)?;
        for s in &m.layout {
            let v = ck
                .params
                .get(s.name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks {}", s.name)))?;
            if v.len() != s.rows * s.cols {
                return Err(Error::DimensionMismatch {
                    expected: s.rows * s.cols,
                    got: v.len(),
                });
            }
            m.params[s.offset..s.offset + v.len()].copy_from_slice(v);
        }
        if ck.params.len() != m.layout.len() {
            return Err(Error::Validation("checkpoint has unknown parameter blocks".into()));
        }
        Ok(m)
    }
}

/// Serialized model: named parameter arrays plus the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub encoder: EncoderSpec,
    pub head: Head,
    pub params: BTreeMap<String, Vec<f64>>,
    pub config_echo: serde_json::Value,
}

/// One evaluation of the objective terms over the whole training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub flat: f64,
    /// NaN when the CPCC could not be formed.
    pub cpcc: f64,
    pub center: f64,
    pub lr: f64,
}

/// Row 0 is taken before training; row `e` after epoch `e`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    /// Steps on which the CPCC term could not be formed and was skipped.
    pub skipped_cpcc_steps: usize,
    /// Steps that hit a clamp or active clip branch.
    pub nonsmooth_steps: usize,
}

impl History {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,flat,cpcc,center,lr")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.epoch, r.flat, r.cpcc, r.center, r.lr)?;
        }
        Ok(())
    }
}

/// Objective inputs for a batch of rows, evaluated through the model.
fn flat_inputs<T: Real>(
    model: &Model,
    p: &[T],
    feats: &[Vec<T>],
    second: Option<&[Vec<f64>]>,
    labels: &[usize],
) -> FlatInputs<T> {
    match model.head {
        Head::Classifier { .. } => {
            FlatInputs::Logits(feats.iter().map(|z| model.head_output(p, z)).collect())
        }
        Head::Projection { .. } => {
            let mut embeddings: Vec<Vec<T>> = feats.iter().map(|z| model.head_output(p, z)).collect();
            let mut all_labels = labels.to_vec();
            if let Some(views) = second {
                for x in views {
                    let z = model.encode(p, x);
                    embeddings.push(model.head_output(p, &z));
                }
                all_labels.extend_from_slice(labels);
            }
            FlatInputs::Projections {
                embeddings,
                labels: all_labels,
            }
        }
    }
}

fn evaluate(
    model: &Model,
    data: &LabeledDataset,
    tree: &LabelTree,
    obj: &ObjectiveConfig,
) -> Result<(f64, f64, f64)> {
    let feats = model.embed(&data.features)?;
    let flat = flat_inputs(
        model,
        &model.params,
        &feats,
        data.second_view.as_deref(),
        &data.labels,
    );
    let batch = Batch::new(feats, data.labels.clone())?;
    // Report every term regardless of its weight.
    let report = ObjectiveConfig {
        alpha: 1.0,
        beta: 1.0,
        ..obj.clone()
    };
    let v = composite_objective(&batch, tree, &report, &flat)?;
    Ok((v.flat, v.cpcc.unwrap_or(f64::NAN), v.center))
}

/// Mini-batch SGD with momentum on the composite objective.
///
/// Each epoch reshuffles with a generator seeded from `tc.seed`; the last
/// batch of an epoch may be smaller. A non-finite loss or gradient stops
/// training with [`Error::Diverged`].
pub fn train(
    data: &LabeledDataset,
    tree: &LabelTree,
    encoder: &EncoderSpec,
    obj: &ObjectiveConfig,
    tc: &TrainConfig,
) -> Result<(Model, History)> {
    obj.validate()?;
    tc.validate(data.len())?;
    data.validate_labels(tree)?;
    if data.dim() != encoder.input_dim {
        return Err(Error::DimensionMismatch {
            expected: encoder.input_dim,
            got: data.dim(),
        });
    }
    let head = Head::for_loss(obj.flat_loss, tree.num_classes(), encoder.output_dim);
    let mut model = Model::new(encoder.clone(), head)?;
    let mut velocity = vec![0.0; model.num_params()];
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = History::default();

    let (flat, cp, center) = evaluate(&model, data, tree, obj)?;
    history.rows.push(HistoryRow {
        epoch: 0,
        flat,
        cpcc: cp,
        center,
        lr: tc.lr_at(0),
    });

    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        order.shuffle(&mut rng);
        for (b, idx) in order.chunks(tc.batch_size).enumerate() {
            let rows: Vec<&[f64]> = idx.iter().map(|&i| data.features[i].as_slice()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let second: Option<Vec<Vec<f64>>> = data
                .second_view
                .as_ref()
                .map(|v| idx.iter().map(|&i| v[i].clone()).collect());
            let mut skipped = false;
            let (loss, grad, events) = autodiff::gradient_with_events(&model.params, |p| {
                let feats: Vec<Vec<Var>> = rows.iter().map(|x| model.encode(p, x)).collect();
                let flat = flat_inputs(&model, p, &feats, second.as_deref(), &labels);
                let batch = Batch::new(feats, labels.clone())?;
                let v = composite_objective(&batch, tree, obj, &flat)?;
                skipped = obj.alpha > 0.0 && v.cpcc.is_none();
                Ok(v.total)
            })?;
            if skipped {
                history.skipped_cpcc_steps += 1;
            }
            if events > 0 {
                history.nonsmooth_steps += 1;
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                });
            }
            for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = tc.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        let (flat, cp, center) = evaluate(&model, data, tree, obj)?;
        if !flat.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                batch: 0,
            });
        }
        history.rows.push(HistoryRow {
            epoch: epoch + 1,
            flat,
            cpcc: cp,
            center,
            lr,
        });
    }
    Ok((model, history))
}

/// Optimization budget for [`embed_tree_direct`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedBudget {
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Standard deviation of the initial coordinates.
    pub init_scale: f64,
}

impl Default for EmbedBudget {
    fn default() -> Self {
        EmbedBudget {
            restarts: 8,
            steps: 5000,
            lr: 0.5,
            seed: 0,
            init_scale: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeEmbedding {
    /// One point per tree vertex (in the ball for Poincaré mode).
    pub coords: Vec<Vec<f64>>,
    /// Best CPCC across restarts.
    pub cpcc: f64,
    /// Final CPCC of every restart, in restart order.
    pub restart_cpcc: Vec<f64>,
}

/// Gradient of the CPCC between fixed `t` and `rho` with respect to `rho`.
fn cpcc_grad_wrt_rho(t: &[f64], rho: &[f64]) -> (f64, Vec<f64>) {
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let mr = rho.iter().sum::<f64>() / n;
    let a: Vec<f64> = t.iter().map(|x| x - mt).collect();
    let b: Vec<f64> = rho.iter().map(|x| x - mr).collect();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb2 = b.iter().map(|x| x * x).sum::<f64>();
    let nb = nb2.sqrt();
    let r = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    // Centering is absorbed: both a and b sum to zero.
    let g = a.iter().zip(&b).map(|(ak, bk)| ak / (na * nb) - r * bk / nb2).collect();
    (r, g)
}

fn embed_l2_run(pairs: &[(usize, usize)], t: &[f64], nv: usize, dim: usize, budget: &EmbedBudget, seed: u64) -> (f64, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<Vec<f64>> = (0..nv)
        .map(|_| {
            (0..dim)
                .map(|_| budget.init_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        })
        .collect();
    let dist = |x: &[Vec<f64>]| -> Vec<f64> {
        pairs.iter().map(|&(i, j)| kernel::l2_distance(&x[i], &x[j])).collect()
    };
    for _ in 0..budget.steps {
        let rho = dist(&x);
        if rho.iter().any(|&r| r == 0.0) {
            break;
        }
        let (_, g) = cpcc_grad_wrt_rho(t, &rho);
        let mut grad = vec![vec![0.0; dim]; nv];
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let s = g[k] / rho[k];
            for d in 0..dim {
                let u = s * (x[i][d] - x[j][d]);
                grad[i][d] += u;
                grad[j][d] -= u;
            }
        }
        for (xi, gi) in x.iter_mut().zip(&grad) {
            for (a, b) in xi.iter_mut().zip(gi) {
                *a += budget.lr * b;
            }
        }
    }
    let r = cpcc(t, &dist(&x)).unwrap_or(f64::NAN);
    (r, x)
}

fn embed_poincare_run(
    pairs: &[(usize, usize)],
    t: &[f64],
    nv: usize,
    dim: usize,
    c: f64,
    budget: &EmbedBudget,
    seed: u64,
) -> (f64, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..nv * dim)
        .map(|_| budget.init_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let objective = |p: &[Var]| -> Result<Var> {
        let pts: Vec<Vec<Var>> = p.chunks(dim).map(|u| kernel::exp_map_origin(u, c)).collect();
        let rho: Vec<Var> = pairs
            .iter()
            .map(|&(i, j)| kernel::poincare_distance(&pts[i], &pts[j], c))
            .collect();
        let tv: Vec<Var> = t.iter().map(|&x| Var::cst(x)).collect();
        cpcc(&tv, &rho)
    };
    for _ in 0..budget.steps {
        match autodiff::gradient_with_events(&v, objective) {
            Ok((_, g, _)) if g.iter().all(|x| x.is_finite()) => {
                for (a, b) in v.iter_mut().zip(&g) {
                    *a += budget.lr * b;
                }
            }
            _ => break,
        }
    }
    let pts: Vec<Vec<f64>> = v.chunks(dim).map(|u| kernel::exp_map_origin(u, c)).collect();
    let rho: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| kernel::poincare_distance(&pts[i], &pts[j], c))
        .collect();
    (cpcc(t, &rho).unwrap_or(f64::NAN), pts)
}

/// Free per-vertex coordinates maximizing the CPCC between the tree metric
/// and the chosen distance over all vertex pairs. Poincaré mode optimizes
/// tangent vectors passed through the exponential map. Restarts run in
/// parallel and the best (first on ties) is returned.
pub fn embed_tree_direct(
    tree: &LabelTree,
    dim: usize,
    mode: DistanceKind,
    c: Curvature,
    budget: &EmbedBudget,
) -> Result<TreeEmbedding> {
    if dim < 2 {
        return Err(Error::InvalidConfig(format!("embedding dim must be >= 2, got {dim}")));
    }
    if budget.restarts == 0 {
        return Err(Error::InvalidConfig("at least one restart is required".into()));
    }
    let nv = tree.len();
    if nv < 3 {
        return Err(Error::InsufficientVertices(nv));
    }
    let metric = tree_metric(tree);
    let pairs: Vec<(usize, usize)> = (0..nv)
        .flat_map(|i| (i + 1..nv).map(move |j| (i, j)))
        .collect();
    let t: Vec<f64> = pairs.iter().map(|&(i, j)| metric.get(i, j)).collect();
    let runs: Vec<(f64, Vec<Vec<f64>>)> = (0..budget.restarts)
        .into_par_iter()
        .map(|k| {
            let seed = budget.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64);
            match mode {
                DistanceKind::L2 => embed_l2_run(&pairs, &t, nv, dim, budget, seed),
                DistanceKind::Poincare => {
                    embed_poincare_run(&pairs, &t, nv, dim, c.value(), budget, seed)
                }
            }
        })
        .collect();
    let restart_cpcc: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let best = (0..runs.len())
        .filter(|&k| runs[k].0.is_finite())
        .fold(None, |acc: Option<usize>, k| match acc {
            Some(b) if runs[b].0 >= runs[k].0 => Some(b),
            _ => Some(k),
        })
        .ok_or(Error::DegenerateVariance)?;
    let coords = runs[best].1.clone();
    // Recompute through the shared CPCC path so the reported value is canonical.
    let vertices: Vec<usize> = (0..nv).collect();
    let refs: Vec<&[f64]> = coords.iter().map(|p| p.as_slice()).collect();
    let value = cpcc_over_vertices(&metric, &vertices, &refs, mode, c.value())?;
    Ok(TreeEmbedding {
        coords,
        cpcc: value,
        restart_cpcc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::builtin_cifar10_tree;

    #[test]
    fn generator_counts_and_determinism() {
        let tree = builtin_cifar10_tree();
        let spec = SyntheticSpec {
            n_per_leaf: 50,
            seed: 4,
            ..Default::default()
        };
        let a = generate_hierarchical_gaussians(&tree, &spec).unwrap();
        assert_eq!(a.len(), 500);
        assert_eq!(a.dim(), 16);
        let distinct: std::collections::BTreeSet<usize> = a.labels.iter().copied().collect();
        assert_eq!(distinct.len(), 10);
        let b = generate_hierarchical_gaussians(&tree, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_samples_are_leaf_centers() {
        let tree = builtin_cifar10_tree();
        let spec = SyntheticSpec {
            n_per_leaf: 1,
            noise_sigma: 0.0,
            seed: 1,
            ..Default::default()
        };
        let data = generate_hierarchical_gaussians(&tree, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers = vertex_centers(&tree, &spec, &mut rng);
        for (x, &l) in data.features.iter().zip(&data.labels) {
            assert_eq!(x, &centers[tree.leaves()[l]]);
        }
        // Leaves sit fine_spread from their parent, coarse groups coarse_spread from the origin.
        let leaf = tree.leaves()[0];
        let parent = tree.parent(leaf).unwrap();
        assert!((kernel::l2_distance(&centers[leaf], &centers[parent]) - 2.0).abs() < 1e-12);
        assert!((kernel::l2_distance(&centers[parent], &centers[0]) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let tc = TrainConfig {
            epochs: 50,
            ..Default::default()
        };
        assert_eq!(tc.lr_at(0), tc.lr0);
        assert!(tc.lr_at(49) <= 0.01 * tc.lr0);
        assert!(tc.lr_at(10) > tc.lr_at(20));
    }

    #[test]
    fn model_layout_and_checkpoint_round_trip() {
        let enc = EncoderSpec {
            input_dim: 3,
            hidden_dim: 4,
            output_dim: 2,
            ..Default::default()
        };
        let m = Model::new(enc, Head::Classifier { classes: 5 }).unwrap();
        assert_eq!(m.num_params(), 4 * 3 + 4 + 2 * 4 + 2 + 5 * 2 + 5);
        assert!(m.params.iter().all(|w| w.abs() <= 1.0 / 2f64.sqrt() + 1e-12));
        let ck = m.to_checkpoint(serde_json::json!({"note": 1}));
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(Model::from_checkpoint(&back).unwrap(), m);
    }

    #[test]
    fn projection_head_is_unit_norm() {
        let enc = EncoderSpec {
            input_dim: 3,
            hidden_dim: 4,
            output_dim: 6,
            ..Default::default()
        };
        let m = Model::new(enc, Head::Projection { dim: 6 }).unwrap();
        let z = m.encode(&m.params, &[0.3, -1.0, 2.0]);
        let u = m.head_output(&m.params, &z);
        assert!((autodiff::norm(&u) - 1.0).abs() < 1e-12);
    }

    fn small_setup() -> (LabelTree, LabeledDataset, EncoderSpec) {
        let tree = builtin_cifar10_tree();
        let data = generate_hierarchical_gaussians(
            &tree,
            &SyntheticSpec {
                dim: 8,
                n_per_leaf: 10,
                seed: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let enc = EncoderSpec {
            input_dim: 8,
            hidden_dim: 16,
            output_dim: 8,
            seed: 3,
            ..Default::default()
        };
        (tree, data, enc)
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let (tree, data, enc) = small_setup();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: data.len(),
            lr0: 0.0,
            ..Default::default()
        };
        let (m, h) = train(&data, &tree, &enc, &ObjectiveConfig::default(), &tc).unwrap();
        let fresh = Model::new(enc, m.head).unwrap();
        assert_eq!(m.params, fresh.params);
        assert_eq!(h.rows.len(), 2);
        assert_eq!(h.rows[0].flat, h.rows[1].flat);
    }

    #[test]
    fn flat_training_reduces_cross_entropy() {
        let (tree, data, enc) = small_setup();
        let tc = TrainConfig {
            epochs: 20,
            batch_size: 20,
            ..Default::default()
        };
        let (_, h) = train(&data, &tree, &enc, &ObjectiveConfig::flat(), &tc).unwrap();
        assert!(h.rows.last().unwrap().flat < h.rows[0].flat);
    }

    #[test]
    fn training_is_deterministic() {
        let (tree, data, enc) = small_setup();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 32,
            ..Default::default()
        };
        let a = train(&data, &tree, &enc, &ObjectiveConfig::default(), &tc).unwrap();
        let b = train(&data, &tree, &enc, &ObjectiveConfig::default(), &tc).unwrap();
        assert_eq!(a.0.params, b.0.params);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn supcon_training_runs() {
        let tree = builtin_cifar10_tree();
        let data = generate_hierarchical_gaussians(
            &tree,
            &SyntheticSpec {
                dim: 4,
                n_per_leaf: 4,
                two_views: true,
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let enc = EncoderSpec {
            input_dim: 4,
            hidden_dim: 8,
            output_dim: 4,
            ..Default::default()
        };
        let obj = ObjectiveConfig {
            flat_loss: FlatLoss::Supcon,
            ..Default::default()
        };
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 20,
            ..Default::default()
        };
        let (m, h) = train(&data, &tree, &enc, &obj, &tc).unwrap();
        assert_eq!(m.head, Head::Projection { dim: 4 });
        assert!(h.rows.iter().all(|r| r.flat.is_finite()));
    }

    #[test]
    fn divergence_is_reported() {
        let (tree, data, enc) = small_setup();
        let tc = TrainConfig {
            epochs: 5,
            batch_size: 10,
            lr0: 1e200,
            momentum: 0.0,
            schedule: Schedule::Constant,
            ..Default::default()
        };
        let r = train(&data, &tree, &enc, &ObjectiveConfig::flat(), &tc);
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn history_csv_header() {
        let h = History {
            rows: vec![HistoryRow {
                epoch: 0,
                flat: 1.5,
                cpcc: 0.25,
                center: 0.0,
                lr: 0.05,
            }],
            ..Default::default()
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,flat,cpcc,center,lr\n0,1.5,0.25,0,0.05\n");
    }

    #[test]
    fn cpcc_gradient_matches_finite_differences() {
        let t = [1.0, 2.0, 2.0, 3.0, 4.0];
        let rho = [0.5, 1.7, 1.1, 2.0, 2.4];
        let (_, g) = cpcc_grad_wrt_rho(&t, &rho);
        let fd = autodiff::finite_difference(&rho, 1e-6, |r| cpcc(&t, r)).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn three_leaf_star_embeds_exactly_in_l2() {
        let tree = crate::hierarchy::balanced_tree(&[1, 3]).unwrap();
        let budget = EmbedBudget {
            restarts: 2,
            steps: 2000,
            ..Default::default()
        };
        let e = embed_tree_direct(&tree, 2, DistanceKind::L2, Curvature::default(), &budget).unwrap();
        assert!(e.cpcc > 1.0 - 1e-6, "{}", e.cpcc);
    }

    #[test]
    fn poincare_embedding_stays_in_ball() {
        let tree = builtin_cifar10_tree();
        let budget = EmbedBudget {
            restarts: 2,
            steps: 300,
            ..Default::default()
        };
        let e = embed_tree_direct(&tree, 2, DistanceKind::Poincare, Curvature::default(), &budget).unwrap();
        for p in &e.coords {
            assert!(p.iter().map(|x| x * x).sum::<f64>() < 1.0);
        }
        assert_eq!(e.restart_cpcc.len(), 2);
    }
}
