//! Evaluation metrics: δ-hyperbolicity, test CPCC, kNN accuracy and
//! Mahalanobis OOD scoring with AUROC and Borda counts.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{kernel, Curvature};
use crate::hierarchy::{tree_metric, LabelTree, TreeMetric};
use crate::objective::{
    cpcc_over_vertices, euclidean_prototypes, hyp_prototypes, Batch, CentroidMode, DistanceKind,
    MapMode, ObjectiveConfig, Prototypes, TreeScope,
};

/// Largest point count accepted by the exact O(n^4) δ scan.
pub const EXACT_DELTA_MAX_POINTS: usize = 400;

/// Symmetric matrix of pairwise distances with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    dist: Vec<f64>,
}

impl DistanceMatrix {
    /// Row-major `n x n` distances.
    pub fn new(n: usize, dist: Vec<f64>) -> Result<Self> {
        if dist.len() != n * n {
            return Err(Error::LengthMismatch(dist.len(), n * n));
        }
        if dist.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        let mut worst = 0.0f64;
        for i in 0..n {
            if dist[i * n + i] != 0.0 {
                return Err(Error::Validation(format!("diagonal entry {i} is nonzero")));
            }
            for j in i + 1..n {
                if dist[i * n + j] < 0.0 {
                    return Err(Error::Validation(format!("negative distance at ({i}, {j})")));
                }
                worst = worst.max((dist[i * n + j] - dist[j * n + i]).abs());
            }
        }
        if worst > 1e-12 {
            return Err(Error::NotSymmetric(worst));
        }
        Ok(DistanceMatrix { n, dist })
    }

    fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let mut dist = vec![0.0; n * n];
        dist.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
            for (j, x) in row.iter_mut().enumerate() {
                if i != j {
                    let (a, b) = if i < j { (i, j) } else { (j, i) };
                    *x = f(a, b);
                }
            }
        });
        DistanceMatrix { n, dist }
    }

    pub fn from_l2(points: &[Vec<f64>]) -> Self {
        Self::from_fn(points.len(), |i, j| kernel::l2_distance(&points[i], &points[j]))
    }

    /// Poincaré distances; points are assumed to lie in the ball.
    pub fn from_poincare(points: &[Vec<f64>], c: Curvature) -> Self {
        Self::from_fn(points.len(), |i, j| {
            kernel::poincare_distance(&points[i], &points[j], c.value())
        })
    }

    pub fn from_tree_metric(m: &TreeMetric) -> Self {
        DistanceMatrix {
            n: m.len(),
            dist: m.as_slice().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    pub fn diameter(&self) -> f64 {
        self.dist.iter().copied().fold(0.0, f64::max)
    }

    /// Every distance multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        DistanceMatrix {
            n: self.n,
            dist: self.dist.iter().map(|x| x * factor).collect(),
        }
    }

    /// Submatrix on the given point indices.
    pub fn restrict(&self, idx: &[usize]) -> Self {
        let n = idx.len();
        let mut dist = Vec::with_capacity(n * n);
        for &i in idx {
            dist.extend(idx.iter().map(|&j| self.get(i, j)));
        }
        DistanceMatrix { n, dist }
    }
}

/// `(d(x, y) + d(x, z) - d(y, z)) / 2`.
pub fn gromov_product(dm: &DistanceMatrix, x: usize, y: usize, z: usize) -> Result<f64> {
    if let Some(&bad) = [x, y, z].iter().find(|&&i| i >= dm.len()) {
        return Err(Error::IndexOutOfRange(bad, dm.len()));
    }
    Ok((dm.get(x, y) + dm.get(x, z) - dm.get(y, z)) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DeltaMode {
    /// Every quadruple.
    Exact,
    /// `k` quadruples drawn with a seeded generator; a lower bound on the exact value.
    Sampled { k: u64, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub delta: f64,
    /// `2 delta / diam`, in `[0, 1]`.
    pub delta_rel: f64,
}

/// Four-point slack of one quadruple: half the gap between the largest and
/// second largest of the three pair sums.
#[inline]
fn quad_slack(dm: &DistanceMatrix, x: usize, y: usize, z: usize, w: usize) -> f64 {
    let s1 = dm.get(x, y) + dm.get(z, w);
    let s2 = dm.get(x, z) + dm.get(y, w);
    let s3 = dm.get(x, w) + dm.get(y, z);
    let (hi, mid) = if s1 >= s2 {
        if s2 >= s3 {
            (s1, s2)
        } else if s1 >= s3 {
            (s1, s3)
        } else {
            (s3, s1)
        }
    } else if s1 >= s3 {
        (s2, s1)
    } else if s2 >= s3 {
        (s2, s3)
    } else {
        (s3, s2)
    };
    (hi - mid) / 2.0
}

/// Gromov δ-hyperbolicity: the smallest δ with
/// `(x, z)_w >= min((x, y)_w, (y, z)_w) - δ` for all points.
pub fn delta_hyperbolicity(dm: &DistanceMatrix, mode: DeltaMode) -> Result<Delta> {
    let n = dm.len();
    let diam = dm.diameter();
    if diam <= 0.0 {
        return Err(Error::ZeroDiameter);
    }
    let delta = if n < 4 {
        0.0
    } else {
        match mode {
            DeltaMode::Exact => {
                if n > EXACT_DELTA_MAX_POINTS {
                    return Err(Error::InvalidConfig(format!(
                        "exact δ is limited to {EXACT_DELTA_MAX_POINTS} points, got {n}; use sampled mode"
                    )));
                }
                (0..n)
                    .into_par_iter()
                    .map(|x| {
                        let mut best = 0.0f64;
                        for y in x + 1..n {
                            for z in y + 1..n {
                                for w in z + 1..n {
                                    best = best.max(quad_slack(dm, x, y, z, w));
                                }
                            }
                        }
                        best
                    })
                    .reduce(|| 0.0, f64::max)
            }
            DeltaMode::Sampled { k, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut best = 0.0f64;
                for _ in 0..k {
                    let q: [usize; 4] = std::array::from_fn(|_| rng.random_range(0..n));
                    best = best.max(quad_slack(dm, q[0], q[1], q[2], q[3]));
                }
                best
            }
        }
    };
    Ok(Delta {
        delta,
        delta_rel: 2.0 * delta / diam,
    })
}

/// Feature-space distance used for test CPCC.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CpccDistance {
    /// Class centroids compared with ℓ2 distance.
    L2,
    /// Exp-mapped samples averaged in the Klein model, compared with Poincaré distance.
    Poincare { c: Curvature },
}

/// Class prototypes under the given convention, one per present class.
pub fn class_prototypes(
    features: &[Vec<f64>],
    labels: &[usize],
    tree: &LabelTree,
    mode: CpccDistance,
) -> Result<Prototypes<f64>> {
    let batch = Batch::new(features.to_vec(), labels.to_vec())?;
    match mode {
        CpccDistance::L2 => euclidean_prototypes(&batch, tree, TreeScope::LeafOnly),
        CpccDistance::Poincare { c } => {
            let cfg = ObjectiveConfig {
                c,
                tree_scope: TreeScope::LeafOnly,
                centroid_mode: CentroidMode::KleinAverage,
                map_mode: MapMode::ExpMap,
                ..Default::default()
            };
            hyp_prototypes(&batch, tree, &cfg)
        }
    }
}

/// CPCC between the tree metric and class-prototype distances over the
/// pairs of classes present in `labels`.
pub fn test_cpcc(
    features: &[Vec<f64>],
    labels: &[usize],
    tree: &LabelTree,
    mode: CpccDistance,
) -> Result<f64> {
    let protos = class_prototypes(features, labels, tree, mode)?;
    let present = protos.present();
    let pts: Vec<&[f64]> = present.iter().map(|&v| protos.get(v).unwrap()).collect();
    let (kind, c) = match mode {
        CpccDistance::L2 => (DistanceKind::L2, 1.0),
        CpccDistance::Poincare { c } => (DistanceKind::Poincare, c.value()),
    };
    cpcc_over_vertices(&tree_metric(tree), &present, &pts, kind, c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnLevel {
    Fine,
    Coarse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnOutcome {
    /// Fine class indices, or parent vertex ids at the coarse level.
    pub predictions: Vec<usize>,
    /// Fraction correct, when query labels were supplied.
    pub accuracy: Option<f64>,
}

/// k-nearest-neighbour majority vote under ℓ2 distance.
///
/// At the coarse level neighbour labels are replaced by their parent vertex
/// before voting. Neighbour ties in distance go to the lower training
/// index; vote ties go to the smallest label.
pub fn knn_classify(
    train_feats: &[Vec<f64>],
    train_labels: &[usize],
    query_feats: &[Vec<f64>],
    query_labels: Option<&[usize]>,
    k: usize,
    level: KnnLevel,
    tree: &LabelTree,
) -> Result<KnnOutcome> {
    if train_feats.len() != train_labels.len() {
        return Err(Error::LengthMismatch(train_feats.len(), train_labels.len()));
    }
    if k == 0 || k > train_feats.len() {
        return Err(Error::InvalidConfig(format!(
            "k must lie in 1..={}, got {k}",
            train_feats.len()
        )));
    }
    let d = train_feats[0].len();
    for r in train_feats.iter().chain(query_feats) {
        if r.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.len(),
            });
        }
    }
    let classes = tree.num_classes();
    if let Some(&l) = train_labels
        .iter()
        .chain(query_labels.unwrap_or(&[]))
        .find(|&&l| l >= classes)
    {
        return Err(Error::UnknownLabel(format!("class index {l}")));
    }
    let map = |l: usize| match level {
        KnnLevel::Fine => l,
        KnnLevel::Coarse => tree.coarse_of_class(l),
    };
    let predictions: Vec<usize> = query_feats
        .par_iter()
        .map(|q| {
            let mut nn: Vec<(f64, usize)> = train_feats
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let d2: f64 = t.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d2, i)
                })
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            nn.select_nth_unstable_by(k - 1, cmp);
            let mut votes = vec![0usize; tree.len().max(classes)];
            for &(_, i) in &nn[..k] {
                votes[map(train_labels[i])] += 1;
            }
            // First maximum is the smallest label.
            let mut best = 0;
            for (l, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = l;
                }
            }
            best
        })
        .collect();
    let accuracy = match query_labels {
        Some(ql) => {
            if ql.len() != query_feats.len() {
                return Err(Error::LengthMismatch(query_feats.len(), ql.len()));
            }
            if ql.is_empty() {
                None
            } else {
                let hits = predictions.iter().zip(ql).filter(|(p, &y)| **p == map(y)).count();
                Some(hits as f64 / ql.len() as f64)
            }
        }
        None => None,
    };
    Ok(KnnOutcome {
        predictions,
        accuracy,
    })
}

/// Single Gaussian fitted to in-distribution features.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mu: DVector<f64>,
    /// Unbiased sample covariance.
    pub sigma: DMatrix<f64>,
    /// Inverse of `sigma + lambda I`.
    pub sigma_inv: DMatrix<f64>,
    pub lambda: f64,
}

/// Default ridge relative to the mean covariance eigenvalue.
pub const DEFAULT_RIDGE_SCALE: f64 = 1e-6;

/// Sample mean, unbiased covariance and the inverse of the ridge-regularized
/// covariance, with ridge `1e-6 tr(Σ) / d` (or `1e-12` when `Σ = 0`).
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianFit> {
    fit_gaussian_with_ridge(features, DEFAULT_RIDGE_SCALE)
}

/// [`fit_gaussian`] with ridge `ridge_scale * tr(Σ) / d`. A zero scale
/// inverts the raw covariance and fails if it is singular.
pub fn fit_gaussian_with_ridge(features: &[Vec<f64>], ridge_scale: f64) -> Result<GaussianFit> {
    if !(ridge_scale >= 0.0 && ridge_scale.is_finite()) {
        return Err(Error::InvalidConfig(format!("ridge scale must be >= 0, got {ridge_scale}")));
    }
    let n = features.len();
    if n < 2 {
        return Err(Error::TooFewSamples(2, n));
    }
    let d = features[0].len();
    if let Some(r) = features.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: r.len(),
        });
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu: DVector<f64> = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let sigma = centered.transpose() * &centered / (n as f64 - 1.0);
    let tr = sigma.trace();
    let lambda = match (ridge_scale > 0.0, tr > 0.0) {
        (false, _) => 0.0,
        (true, true) => ridge_scale * tr / d as f64,
        (true, false) => 1e-12,
    };
    let reg = &sigma + DMatrix::identity(d, d) * lambda;
    let sigma_inv = reg
        .cholesky()
        .ok_or(Error::SingularAfterRegularization)?
        .inverse();
    if sigma_inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularAfterRegularization);
    }
    Ok(GaussianFit {
        mu,
        sigma,
        sigma_inv,
        lambda,
    })
}

/// `(x - μ)' Σ⁻¹ (x - μ)`; larger is more anomalous.
pub fn mahalanobis_score(x: &[f64], fit: &GaussianFit) -> Result<f64> {
    if x.len() != fit.mu.len() {
        return Err(Error::DimensionMismatch {
            expected: fit.mu.len(),
            got: x.len(),
        });
    }
    let diff = DVector::from_fn(x.len(), |i, _| x[i] - fit.mu[i]);
    Ok((diff.transpose() * &fit.sigma_inv * &diff)[(0, 0)].max(0.0))
}

/// Centers rows by a fixed mean and scales each to unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNormalizer {
    pub mean: Vec<f64>,
}

impl FeatureNormalizer {
    /// Mean of the reference (in-distribution training) rows.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyInput)?;
        let n = rows.len() as f64;
        let mean = (0..first.len())
            .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n)
            .collect();
        Ok(FeatureNormalizer { mean })
    }

    /// Rows that are zero after centering are left at zero.
    pub fn apply(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                let c: Vec<f64> = r.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
                let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    c.into_iter().map(|x| x / norm).collect()
                } else {
                    c
                }
            })
            .collect()
    }
}

/// Area under the ROC curve with OOD as the positive class:
/// `P(ood > id) + P(ood = id) / 2`.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if id_scores.iter().chain(ood_scores).any(|x| x.is_nan()) {
        return Err(Error::NonFinite);
    }
    // Mann-Whitney U from midranks of the pooled sample.
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (n, m) = (id_scores.len() as f64, ood_scores.len() as f64);
    Ok((rank_sum - m * (m + 1.0) / 2.0) / (n * m))
}

/// Borda count over a methods × datasets table of AUROC values. Per
/// dataset, the method ranked `r` (1-based, descending) among `M` earns
/// `M - r` points; tied methods share the mean of their ranks' points.
pub fn borda_count(table: &[Vec<Option<f64>>]) -> Result<Vec<f64>> {
    let m = table.len();
    let Some(first) = table.first() else {
        return Err(Error::EmptyInput);
    };
    let datasets = first.len();
    let mut score = vec![0.0; m];
    for d in 0..datasets {
        let mut col = Vec::with_capacity(m);
        for (i, row) in table.iter().enumerate() {
            match row.get(d).copied().flatten() {
                Some(v) if !v.is_nan() => col.push((v, i)),
                _ => return Err(Error::MissingEntry { method: i, dataset: d }),
            }
        }
        col.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut i = 0;
        while i < m {
            let mut j = i;
            while j + 1 < m && col[j + 1].0 == col[i].0 {
                j += 1;
            }
            // Ranks i+1..=j+1 earn m-(i+1) ..= m-(j+1) points.
            let pts = (m as f64 - 1.0) - (i + j) as f64 / 2.0;
            for &(_, method) in &col[i..=j] {
                score[method] += pts;
            }
            i = j + 1;
        }
    }
    if let Some(i) = table.iter().position(|r| r.len() != datasets) {
        return Err(Error::MissingEntry {
            method: i,
            dataset: datasets.min(table[i].len()),
        });
    }
    Ok(score)
}

/// One metric in the JSON report format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub config_echo: serde_json::Value,
    pub seed: u64,
}
