//! CPCC, prototypes, flat losses and the composite training objective.
//!
//! Every loss is generic over [`Real`], so the same code yields plain
//! values on `f64` and gradients on [`crate::autodiff::Var`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, kahan_sum, norm, Real, Var};
use crate::error::{Error, Result};
use crate::geometry::{kernel, Curvature, DEFAULT_EPSILON};
use crate::hierarchy::{tree_metric, LabelTree, TreeMetric};

/// Which tree vertices take part in the CPCC term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeScope {
    LeafOnly,
    FullTree,
}

/// How a vertex prototype is formed from its samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidMode {
    /// Map every sample into the ball, then take the Einstein midpoint.
    KleinAverage,
    /// Average in feature space, then map the mean into the ball.
    EuclideanThenMap,
}

/// Map from feature space into the ball.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    ExpMap,
    Clip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlatLoss {
    CrossEntropy,
    Supcon,
}

/// Feature-space distance used by the CPCC term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    L2,
    Poincare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Weight of the CPCC term.
    pub alpha: f64,
    /// Weight of the centering term.
    pub beta: f64,
    pub c: Curvature,
    /// SupCon temperature.
    pub tau: f64,
    pub tree_scope: TreeScope,
    pub centroid_mode: CentroidMode,
    pub map_mode: MapMode,
    pub flat_loss: FlatLoss,
    /// `poincare` gives the hyperbolic objective, `l2` the Euclidean one.
    pub distance: DistanceKind,
    /// Clipping margin when `map_mode` is `clip`.
    pub epsilon: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            alpha: 1.0,
            beta: 0.01,
            c: Curvature::default(),
            tau: 0.1,
            tree_scope: TreeScope::FullTree,
            centroid_mode: CentroidMode::KleinAverage,
            map_mode: MapMode::ExpMap,
            flat_loss: FlatLoss::CrossEntropy,
            distance: DistanceKind::Poincare,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl ObjectiveConfig {
    /// Plain flat-loss training: both structured terms switched off.
    pub fn flat() -> Self {
        ObjectiveConfig {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        }
    }

    /// CPCC with Euclidean centroids and distances, no centering.
    pub fn l2_cpcc() -> Self {
        ObjectiveConfig {
            beta: 0.0,
            centroid_mode: CentroidMode::EuclideanThenMap,
            distance: DistanceKind::L2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.epsilon > 0.0 && self.epsilon < self.c.radius()) {
            return bad(format!("epsilon must lie in (0, 1/sqrt(c)), got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Encoder outputs for one step and their fine-class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub features: Vec<Vec<T>>,
    pub labels: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn new(features: Vec<Vec<T>>, labels: Vec<usize>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if features.len() != labels.len() {
            return Err(Error::LengthMismatch(features.len(), labels.len()));
        }
        let d = features[0].len();
        if d == 0 {
            return Err(Error::EmptyInput);
        }
        if let Some(r) = features.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.len(),
            });
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, |r| r.len())
    }

    fn check_labels(&self, tree: &LabelTree) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= tree.num_classes()) {
            Some(l) => Err(Error::UnknownLabel(format!("class index {l}"))),
            None => Ok(()),
        }
    }
}

/// Per-vertex prototypes; `None` where no sample of the batch falls below the vertex
/// or the vertex is outside the configured scope.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes<T> {
    pub points: Vec<Option<Vec<T>>>,
}

impl<T: Real> Prototypes<T> {
    /// Vertices with a prototype, ascending.
    pub fn present(&self) -> Vec<usize> {
        (0..self.points.len())
            .filter(|&v| self.points[v].is_some())
            .collect()
    }

    pub fn get(&self, v: usize) -> Option<&[T]> {
        self.points.get(v).and_then(|p| p.as_deref())
    }
}

/// Pearson correlation between paired tree and feature distances.
pub fn cpcc<T: Real>(tree_dists: &[T], feat_dists: &[T]) -> Result<T> {
    if tree_dists.len() != feat_dists.len() {
        return Err(Error::LengthMismatch(tree_dists.len(), feat_dists.len()));
    }
    let n = tree_dists.len();
    if n < 2 {
        return Err(Error::DegenerateVariance);
    }
    let centered = |xs: &[T]| -> Result<(Vec<T>, T)> {
        let mean = kahan_sum(xs.iter().copied()) / n as f64;
        let dev: Vec<T> = xs.iter().map(|&x| x - mean).collect();
        let ss = kahan_sum(dev.iter().map(|&d| d * d));
        let scale = xs.iter().fold(0.0f64, |m, x| m.max(x.value().abs()));
        if ss.value() <= (1e-14 * scale).powi(2) * n as f64 {
            return Err(Error::DegenerateVariance);
        }
        Ok((dev, ss))
    };
    let (da, sa) = centered(tree_dists)?;
    let (db, sb) = centered(feat_dists)?;
    let cov = kahan_sum(da.iter().zip(&db).map(|(&x, &y)| x * y));
    Ok(cov / (sa * sb).sqrt())
}

/// Distance between the centroids of two groups of feature rows.
pub fn l2_dataset_distance(group_a: &[Vec<f64>], group_b: &[Vec<f64>]) -> Result<f64> {
    let ma = mean_row(group_a)?;
    let mb = mean_row(group_b)?;
    if ma.len() != mb.len() {
        return Err(Error::DimensionMismatch {
            expected: ma.len(),
            got: mb.len(),
        });
    }
    Ok(kernel::l2_distance(&ma, &mb))
}

fn mean_row(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or(Error::EmptyGroup)?;
    let d = first.len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: r.len(),
        });
    }
    Ok(euclidean_mean(&rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>()))
}

fn euclidean_mean<T: Real>(rows: &[&[T]]) -> Vec<T> {
    let n = rows.len() as f64;
    (0..rows[0].len())
        .map(|k| kahan_sum(rows.iter().map(|r| r[k])) / n)
        .collect()
}

/// Sample indices grouped by the vertex they fall below, restricted to scope.
fn members(batch_labels: &[usize], tree: &LabelTree, scope: TreeScope) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); tree.len()];
    for (i, &l) in batch_labels.iter().enumerate() {
        let mut v = Some(tree.leaves()[l]);
        while let Some(u) = v {
            out[u].push(i);
            v = match scope {
                TreeScope::FullTree => tree.parent(u),
                TreeScope::LeafOnly => None,
            };
        }
    }
    out
}

fn to_ball<T: Real>(v: &[T], cfg: &ObjectiveConfig) -> Vec<T> {
    let c = cfg.c.value();
    match cfg.map_mode {
        MapMode::ExpMap => kernel::exp_map_origin(v, c),
        MapMode::Clip => kernel::clip_to_ball(v, c, cfg.epsilon),
    }
}

/// Poincaré prototypes for every present in-scope vertex.
///
/// Internal vertices aggregate all samples of their descendant leaves.
pub fn hyp_prototypes<T: Real>(
    batch: &Batch<T>,
    tree: &LabelTree,
    cfg: &ObjectiveConfig,
) -> Result<Prototypes<T>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batch.check_labels(tree)?;
    let groups = members(&batch.labels, tree, cfg.tree_scope);
    let c = cfg.c.value();
    let points = match cfg.centroid_mode {
        CentroidMode::KleinAverage => {
            // Lorentz factor and Klein image of every mapped sample, computed once.
            let klein: Vec<(T, Vec<T>)> = batch
                .features
                .iter()
                .map(|z| {
                    let p = to_ball(z, cfg);
                    let q = autodiff::norm_sq(&p) * c;
                    ((q + 1.0) / (-q + 1.0), kernel::poincare_to_klein(&p, c))
                })
                .collect();
            groups
                .iter()
                .map(|g| {
                    if g.is_empty() {
                        return None;
                    }
                    let items: Vec<(T, &[T])> =
                        g.iter().map(|&i| (klein[i].0, klein[i].1.as_slice())).collect();
                    let mid = kernel::weighted_mean(&items, batch.dim());
                    Some(kernel::klein_to_poincare(&mid, c))
                })
                .collect()
        }
        CentroidMode::EuclideanThenMap => groups
            .iter()
            .map(|g| {
                if g.is_empty() {
                    return None;
                }
                let rows: Vec<&[T]> = g.iter().map(|&i| batch.features[i].as_slice()).collect();
                Some(to_ball(&euclidean_mean(&rows), cfg))
            })
            .collect(),
    };
    Ok(Prototypes { points })
}

/// Euclidean class/vertex centroids of the raw features.
pub fn euclidean_prototypes<T: Real>(
    batch: &Batch<T>,
    tree: &LabelTree,
    scope: TreeScope,
) -> Result<Prototypes<T>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batch.check_labels(tree)?;
    let points = members(&batch.labels, tree, scope)
        .iter()
        .map(|g| {
            if g.is_empty() {
                None
            } else {
                let rows: Vec<&[T]> = g.iter().map(|&i| batch.features[i].as_slice()).collect();
                Some(euclidean_mean(&rows))
            }
        })
        .collect();
    Ok(Prototypes { points })
}

/// CPCC over all unordered pairs of `vertices`, with `points[k]` placed at
/// `vertices[k]`. Fewer than three vertices (three pairs) is reported as
/// [`Error::InsufficientVertices`].
pub fn cpcc_over_vertices<T: Real>(
    metric: &TreeMetric,
    vertices: &[usize],
    points: &[&[T]],
    distance: DistanceKind,
    c: f64,
) -> Result<T> {
    if vertices.len() != points.len() {
        return Err(Error::LengthMismatch(vertices.len(), points.len()));
    }
    if vertices.len() < 3 {
        return Err(Error::InsufficientVertices(vertices.len()));
    }
    let mut td = Vec::new();
    let mut fd = Vec::new();
    for a in 0..vertices.len() {
        for b in a + 1..vertices.len() {
            td.push(T::cst(metric.get(vertices[a], vertices[b])));
            fd.push(match distance {
                DistanceKind::L2 => kernel::l2_distance(points[a], points[b]),
                DistanceKind::Poincare => kernel::poincare_distance(points[a], points[b], c),
            });
        }
    }
    cpcc(&td, &fd)
}

fn prototype_cpcc<T: Real>(
    protos: &Prototypes<T>,
    metric: &TreeMetric,
    distance: DistanceKind,
    c: f64,
) -> Result<T> {
    let present = protos.present();
    let pts: Vec<&[T]> = present.iter().map(|&v| protos.get(v).unwrap()).collect();
    cpcc_over_vertices(metric, &present, &pts, distance, c)
}

/// CPCC between the tree metric and Poincaré distances of the hyperbolic
/// prototypes. The objective subtracts `alpha` times this value.
pub fn hypcpcc_loss<T: Real>(
    batch: &Batch<T>,
    tree: &LabelTree,
    cfg: &ObjectiveConfig,
) -> Result<T> {
    let protos = hyp_prototypes(batch, tree, cfg)?;
    prototype_cpcc(&protos, &tree_metric(tree), DistanceKind::Poincare, cfg.c.value())
}

/// CPCC between the tree metric and Euclidean distances of feature centroids.
pub fn l2_cpcc_loss<T: Real>(
    batch: &Batch<T>,
    tree: &LabelTree,
    cfg: &ObjectiveConfig,
) -> Result<T> {
    let protos = euclidean_prototypes(batch, tree, cfg.tree_scope)?;
    prototype_cpcc(&protos, &tree_metric(tree), DistanceKind::L2, cfg.c.value())
}

/// Norm of the batch-wide prototype (the root when every sample is mapped).
pub fn centering_loss<T: Real>(batch: &Batch<T>, cfg: &ObjectiveConfig) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let center = match cfg.centroid_mode {
        CentroidMode::KleinAverage => {
            let mapped: Vec<Vec<T>> = batch.features.iter().map(|z| to_ball(z, cfg)).collect();
            let refs: Vec<&[T]> = mapped.iter().map(|p| p.as_slice()).collect();
            kernel::hyp_ave_poincare(&refs, cfg.c.value())
        }
        CentroidMode::EuclideanThenMap => {
            let refs: Vec<&[T]> = batch.features.iter().map(|z| z.as_slice()).collect();
            euclidean_mean(&refs)
        }
    };
    Ok(norm(&center))
}

fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.value()));
    let s = xs
        .iter()
        .fold(T::zero(), |acc, &x| acc + (x - m).exp());
    s.ln() + m
}

/// Mean negative log-softmax probability of the true class.
pub fn cross_entropy<T: Real>(logits: &[Vec<T>], labels: &[usize]) -> Result<T> {
    if logits.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if logits.len() != labels.len() {
        return Err(Error::LengthMismatch(logits.len(), labels.len()));
    }
    let mut total = T::zero();
    for (row, &y) in logits.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::IndexOutOfRange(y, row.len()));
        }
        total = total + log_sum_exp(row) - row[y];
    }
    Ok(total / logits.len() as f64)
}

/// Supervised contrastive loss over a batch of unit-norm projections.
///
/// Anchors without a same-class partner are left out of the mean; a batch
/// in which no anchor has one is an error.
pub fn supcon_loss<T: Real>(embeddings: &[Vec<T>], labels: &[usize], tau: f64) -> Result<T> {
    if embeddings.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if embeddings.len() != labels.len() {
        return Err(Error::LengthMismatch(embeddings.len(), labels.len()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    for (i, u) in embeddings.iter().enumerate() {
        let n = autodiff::norm_sq(u).value().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::UnnormalizedInput(i, n));
        }
    }
    let n = embeddings.len();
    let mut total = T::zero();
    let mut anchors = 0usize;
    for i in 0..n {
        let mut pos = Vec::new();
        let mut all = Vec::with_capacity(n - 1);
        for k in (0..n).filter(|&k| k != i) {
            let s = autodiff::dot(&embeddings[i], &embeddings[k]) / tau;
            if labels[k] == labels[i] {
                pos.push(s);
            }
            all.push(s);
        }
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let mean_pos = log_sum_exp(&pos) - (pos.len() as f64).ln();
        total = total + log_sum_exp(&all) - mean_pos;
    }
    if anchors == 0 {
        return Err(Error::ClassWithoutPositive);
    }
    Ok(total / anchors as f64)
}

/// Inputs of the flat (non-hierarchical) loss term.
#[derive(Clone, Debug)]
pub enum FlatInputs<T> {
    /// Classifier logits, one row per batch sample.
    Logits(Vec<Vec<T>>),
    /// Unit-norm projections of all views with their labels.
    Projections { embeddings: Vec<Vec<T>>, labels: Vec<usize> },
}

/// The individual terms of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveValue<T> {
    pub total: T,
    pub flat: T,
    /// `None` when the batch had fewer than three present vertices.
    pub cpcc: Option<T>,
    pub center: T,
}

/// `flat - alpha * cpcc + beta * center`.
///
/// A CPCC term that cannot be formed on this batch is skipped, as is a
/// term whose weight is zero.
pub fn composite_objective<T: Real>(
    batch: &Batch<T>,
    tree: &LabelTree,
    cfg: &ObjectiveConfig,
    flat_inputs: &FlatInputs<T>,
) -> Result<ObjectiveValue<T>> {
    let flat = match flat_inputs {
        FlatInputs::Logits(logits) => cross_entropy(logits, &batch.labels)?,
        FlatInputs::Projections { embeddings, labels } => supcon_loss(embeddings, labels, cfg.tau)?,
    };
    let cpcc = if cfg.alpha > 0.0 {
        let r = match cfg.distance {
            DistanceKind::Poincare => hypcpcc_loss(batch, tree, cfg),
            DistanceKind::L2 => l2_cpcc_loss(batch, tree, cfg),
        };
        match r {
            Ok(v) => Some(v),
            Err(Error::InsufficientVertices(_)) | Err(Error::DegenerateVariance) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let center = if cfg.beta > 0.0 {
        centering_loss(batch, cfg)?
    } else {
        T::zero()
    };
    let mut total = flat;
    if let Some(v) = cpcc {
        total = total - v * cfg.alpha;
    }
    if cfg.beta > 0.0 {
        total = total + center * cfg.beta;
    }
    Ok(ObjectiveValue {
        total,
        flat,
        cpcc,
        center,
    })
}

/// Exact gradient of `f` at `params`.
///
/// Fails with [`Error::NonDifferentiablePoint`] when a clamp or an active
/// clip branch was hit, since the derivative there is one-sided.
pub fn gradient<F>(f: F, params: &[f64]) -> Result<Vec<f64>>
where
    F: FnOnce(&[Var]) -> Result<Var>,
{
    let (_, g, events) = autodiff::gradient_with_events(params, f)?;
    if events > 0 {
        return Err(Error::NonDifferentiablePoint(events));
    }
    Ok(g)
}

/// Largest componentwise relative error between two gradients, with
/// denominators floored at `1e-3` so near-zero components are compared
/// absolutely.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::builtin_cifar10_tree;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    /// Textbook two-pass Pearson, kept independent of `cpcc`.
    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for i in 0..x.len() {
            sxy += (x[i] - mx) * (y[i] - my);
            sxx += (x[i] - mx).powi(2);
            syy += (y[i] - my).powi(2);
        }
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn cpcc_examples() {
        close(cpcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0, 1e-15);
        close(cpcc(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), -1.0, 1e-15);
        let v = cpcc(&[1.0, 2.0, 4.0], &[1.0, 3.0, 4.0]).unwrap();
        close(v, 13.0 / 14.0, 1e-15);
        close(v, pearson(&[1.0, 2.0, 4.0], &[1.0, 3.0, 4.0]), 1e-15);
    }

    #[test]
    fn cpcc_errors() {
        assert_eq!(cpcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::DegenerateVariance));
        assert_eq!(cpcc(&[0.1; 7], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]), Err(Error::DegenerateVariance));
        assert_eq!(cpcc(&[1.0, 2.0], &[1.0]), Err(Error::LengthMismatch(2, 1)));
    }

    #[test]
    fn dataset_distance_examples() {
        let a = vec![vec![0.0, 0.0]];
        assert_eq!(l2_dataset_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(l2_dataset_distance(&a, &[vec![3.0, 4.0]]).unwrap(), 5.0);
        let a = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let b = vec![vec![5.0, 0.0], vec![7.0, 0.0]];
        assert_eq!(l2_dataset_distance(&a, &b).unwrap(), 5.0);
        assert_eq!(l2_dataset_distance(&[], &b), Err(Error::EmptyGroup));
    }

    #[test]
    fn prototype_examples() {
        let tree = builtin_cifar10_tree();
        let cfg = ObjectiveConfig {
            tree_scope: TreeScope::LeafOnly,
            ..Default::default()
        };
        let z = vec![0.3, -0.4];
        let batch = Batch::new(vec![z.clone()], vec![2]).unwrap();
        let p = hyp_prototypes(&batch, &tree, &cfg).unwrap();
        let leaf = tree.leaves()[2];
        assert_eq!(p.present(), vec![leaf]);
        let expect = kernel::exp_map_origin(&z, 1.0);
        for (a, b) in p.get(leaf).unwrap().iter().zip(&expect) {
            close(*a, *b, 1e-15);
        }

        let v = vec![0.7, 0.2];
        let nv: Vec<f64> = v.iter().map(|x| -x).collect();
        let batch = Batch::new(vec![v, nv], vec![0, 0]).unwrap();
        for mode in [CentroidMode::EuclideanThenMap, CentroidMode::KleinAverage] {
            let cfg = ObjectiveConfig {
                centroid_mode: mode,
                ..cfg.clone()
            };
            let p = hyp_prototypes(&batch, &tree, &cfg).unwrap();
            assert!(norm(p.get(tree.leaves()[0]).unwrap()) < 1e-15);
        }
    }

    #[test]
    fn full_tree_scope_covers_ancestors() {
        let tree = builtin_cifar10_tree();
        let batch = Batch::new(vec![vec![0.1, 0.0], vec![0.0, 0.2]], vec![0, 5]).unwrap();
        let p = hyp_prototypes(&batch, &tree, &ObjectiveConfig::default()).unwrap();
        // Two leaves, two coarse parents and the root.
        assert_eq!(p.present().len(), 5);
        assert!(p.present().contains(&tree.root()));
    }

    #[test]
    fn hypcpcc_needs_three_vertices() {
        let tree = builtin_cifar10_tree();
        let cfg = ObjectiveConfig {
            tree_scope: TreeScope::LeafOnly,
            ..Default::default()
        };
        let batch = Batch::new(vec![vec![0.1, 0.0], vec![0.0, 0.2]], vec![0, 5]).unwrap();
        assert_eq!(hypcpcc_loss(&batch, &tree, &cfg), Err(Error::InsufficientVertices(2)));
    }

    #[test]
    fn cpcc_is_one_on_tree_consistent_leaves() {
        // Three leaves on a line: two siblings close, one far away.
        let tree = builtin_cifar10_tree();
        let cfg = ObjectiveConfig {
            tree_scope: TreeScope::LeafOnly,
            ..ObjectiveConfig::l2_cpcc()
        };
        // d_T = (2, 4, 4); place airplane, automobile and cat so that ℓ2 = (1, 2, 2).
        let h = (4.0f64 - 0.25).sqrt();
        let batch = Batch::new(
            vec![vec![-0.5, 0.0], vec![0.5, 0.0], vec![0.0, h]],
            vec![0, 1, 5],
        )
        .unwrap();
        close(l2_cpcc_loss(&batch, &tree, &cfg).unwrap(), 1.0, 1e-12);
    }

    #[test]
    fn centering_examples() {
        let zero = Batch::new(vec![vec![0.0, 0.0]; 3], vec![0, 1, 2]).unwrap();
        let sym = Batch::new(vec![vec![0.3, 0.1], vec![-0.3, -0.1]], vec![0, 1]).unwrap();
        for mode in [CentroidMode::KleinAverage, CentroidMode::EuclideanThenMap] {
            let cfg = ObjectiveConfig {
                centroid_mode: mode,
                ..Default::default()
            };
            assert_eq!(centering_loss(&zero, &cfg).unwrap(), 0.0);
            assert!(centering_loss(&sym, &cfg).unwrap() < 1e-15);
        }
        let cfg = ObjectiveConfig {
            centroid_mode: CentroidMode::EuclideanThenMap,
            ..Default::default()
        };
        let one = Batch::new(vec![vec![0.5, 0.0]], vec![0]).unwrap();
        assert_eq!(centering_loss(&one, &cfg).unwrap(), 0.5);
    }

    #[test]
    fn cross_entropy_examples() {
        close(cross_entropy(&[vec![100.0, 0.0]], &[0]).unwrap(), 0.0, 1e-40);
        close(cross_entropy(&[vec![0.3; 4]], &[2]).unwrap(), 4f64.ln(), 1e-15);
        let v = cross_entropy(&[vec![1.0, 0.0]], &[0]).unwrap();
        close(v, -(1f64.exp() / (1f64.exp() + 1.0)).ln(), 1e-15);
        close(v, 0.313262, 1e-6);
    }

    /// Direct double loop over the SupCon definition.
    fn supcon_brute(u: &[Vec<f64>], y: &[usize], tau: f64) -> f64 {
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..u.len() {
            let s = |k: usize| (u[i].iter().zip(&u[k]).map(|(a, b)| a * b).sum::<f64>() / tau).exp();
            let p: Vec<usize> = (0..u.len()).filter(|&k| k != i && y[k] == y[i]).collect();
            if p.is_empty() {
                continue;
            }
            let num: f64 = p.iter().map(|&k| s(k)).sum::<f64>() / p.len() as f64;
            let den: f64 = (0..u.len()).filter(|&k| k != i).map(s).sum();
            total -= (num / den).ln();
            count += 1.0;
        }
        total / count
    }

    #[test]
    fn supcon_examples() {
        let u = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        close(supcon_loss(&u, &[3, 3], 0.07).unwrap(), 0.0, 1e-15);

        // Four identical same-class views: every ratio is 1/3 after the mean correction.
        let u = vec![vec![1.0, 0.0]; 4];
        close(supcon_loss(&u, &[1; 4], 0.5).unwrap(), 3f64.ln(), 1e-14);

        let u = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let y = [0, 0, 1, 1];
        let v = supcon_loss(&u, &y, 1.0).unwrap();
        close(v, -(1f64.exp() / (1f64.exp() + 2.0)).ln(), 1e-14);
        close(v, 0.551445, 1e-6);
        close(v, supcon_brute(&u, &y, 1.0), 1e-14);
    }

    #[test]
    fn supcon_errors() {
        assert!(matches!(
            supcon_loss(&[vec![2.0, 0.0], vec![1.0, 0.0]], &[0, 0], 1.0),
            Err(Error::UnnormalizedInput(0, _))
        ));
        assert_eq!(
            supcon_loss(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1], 1.0),
            Err(Error::ClassWithoutPositive)
        );
        // Anchor 2 has no partner and is skipped.
        let u = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let v = supcon_loss(&u, &[0, 0, 1], 1.0).unwrap();
        close(v, supcon_brute(&u, &[0, 0, 1], 1.0), 1e-14);
    }

    #[test]
    fn composite_reduces_to_flat() {
        let tree = builtin_cifar10_tree();
        let batch = Batch::new(
            vec![vec![0.1, 0.2], vec![-0.3, 0.1], vec![0.2, -0.2]],
            vec![0, 4, 7],
        )
        .unwrap();
        let logits = vec![vec![0.2, 0.1, -0.3]; 3];
        let flat_only = FlatInputs::Logits(logits.iter().map(|r| r[..].to_vec()).collect());
        let labels = [0, 1, 2];
        let b2 = Batch::new(batch.features.clone(), labels.to_vec()).unwrap();
        let v = composite_objective(&b2, &tree, &ObjectiveConfig::flat(), &flat_only).unwrap();
        assert_eq!(v.total, cross_entropy(&logits, &labels).unwrap());

        let logits10 = vec![vec![0.0; 10]; 3];
        let cfg = ObjectiveConfig {
            beta: 0.0,
            ..Default::default()
        };
        let v = composite_objective(&batch, &tree, &cfg, &FlatInputs::Logits(logits10)).unwrap();
        close(v.total, v.flat - v.cpcc.unwrap(), 1e-15);
        close(v.cpcc.unwrap(), hypcpcc_loss(&batch, &tree, &cfg).unwrap(), 1e-15);
    }

    #[test]
    fn composite_skips_degenerate_cpcc() {
        let tree = builtin_cifar10_tree();
        let batch = Batch::new(vec![vec![0.1, 0.2]], vec![0]).unwrap();
        let cfg = ObjectiveConfig {
            tree_scope: TreeScope::LeafOnly,
            ..Default::default()
        };
        let v = composite_objective(&batch, &tree, &cfg, &FlatInputs::Logits(vec![vec![0.0; 10]]))
            .unwrap();
        assert!(v.cpcc.is_none());
    }

    #[test]
    fn gradient_of_norm() {
        let g = gradient(|x| Ok(norm(x)), &[3.0, 4.0]).unwrap();
        close(g[0], 0.6, 1e-15);
        close(g[1], 0.8, 1e-15);
    }

    #[test]
    fn gradient_flags_active_clip() {
        let cfg = ObjectiveConfig {
            map_mode: MapMode::Clip,
            centroid_mode: CentroidMode::KleinAverage,
            ..Default::default()
        };
        let r = gradient(
            |x| {
                let b = Batch::new(vec![x.to_vec()], vec![0])?;
                centering_loss(&b, &cfg)
            },
            &[3.0, 4.0],
        );
        assert!(matches!(r, Err(Error::NonDifferentiablePoint(n)) if n > 0));
    }

    #[test]
    fn cpcc_gradient_is_zero_along_scaling() {
        let t = [1.0, 2.0, 4.0, 3.0];
        let f = [2.0, 4.0, 8.0, 6.0];
        let g = gradient(
            |x| {
                let tc: Vec<Var> = t.iter().map(|&v| Var::cst(v)).collect();
                cpcc(&tc, x)
            },
            &f,
        )
        .unwrap();
        let dir: f64 = g.iter().zip(&f).map(|(a, b)| a * b).sum();
        close(dir, 0.0, 1e-14);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ObjectiveConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"klein_average\""));
        let back: ObjectiveConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let partial: ObjectiveConfig = serde_json::from_str(r#"{"alpha": 0.5}"#).unwrap();
        assert_eq!(partial.beta, 0.01);
        assert!(serde_json::from_str::<ObjectiveConfig>(r#"{"c": -1}"#).is_err());
    }
}
