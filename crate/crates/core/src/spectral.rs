//! Hierarchical block correlation matrices and their eigenspectra.
//!
//! Closed forms for balanced trees are computed in exact rational
//! arithmetic; a cyclic Jacobi solver serves as the numerical oracle.

use std::io::Write;

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::hierarchy::{balanced_tree, lca_height, LabelTree};

/// Relative spacing below which adjacent eigenvalues are merged.
pub const MERGE_TOLERANCE: f64 = 1e-9;

/// A block correlation template: leaves are samples, and the entry for two
/// distinct leaves is `r[h - 1]` where `h` is the height of their lowest
/// common ancestor.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCorrelationSpec {
    pub tree: LabelTree,
    /// `r[h - 1]` is the correlation at LCA height `h`, for `h = 1..=H`.
    pub r: Vec<f64>,
}

impl BlockCorrelationSpec {
    pub fn new(tree: LabelTree, r: Vec<f64>) -> Result<Self> {
        let h = tree.max_depth();
        if r.len() != h {
            return Err(Error::InvalidConfig(format!(
                "tree of height {h} needs {h} correlation levels, got {}",
                r.len()
            )));
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(BlockCorrelationSpec { tree, r })
    }

    /// Balanced tree from root-first level counts `C_H, ..., C_0`.
    pub fn balanced(level_counts: &[usize], r: Vec<f64>) -> Result<Self> {
        Self::new(balanced_tree(level_counts)?, r)
    }

    pub fn height(&self) -> usize {
        self.r.len()
    }

    /// Departures from the ordering `r^1 >= ... >= r^H >= 0` the theory
    /// assumes. Such specs are still accepted.
    pub fn precondition_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (h, w) in self.r.windows(2).enumerate() {
            if w[1] > w[0] {
                out.push(format!("r^{} = {} exceeds r^{} = {}", h + 2, w[1], h + 1, w[0]));
            }
        }
        for (h, &x) in self.r.iter().enumerate() {
            if x < 0.0 {
                out.push(format!("r^{} = {x} is negative", h + 1));
            }
        }
        out
    }
}

/// Eigenvalues sorted descending, with equal values merged into groups.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenSpectrum {
    pub values: Vec<f64>,
    pub multiplicities: Vec<usize>,
}

impl EigenSpectrum {
    /// Sort and merge values closer than [`MERGE_TOLERANCE`] (relative).
    pub fn from_values(mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| b.total_cmp(a));
        let mut out = EigenSpectrum {
            values: Vec::new(),
            multiplicities: Vec::new(),
        };
        for v in values {
            match out.values.last() {
                Some(&last) if (last - v).abs() <= MERGE_TOLERANCE * last.abs().max(1.0) => {
                    *out.multiplicities.last_mut().unwrap() += 1;
                }
                _ => {
                    out.values.push(v);
                    out.multiplicities.push(1);
                }
            }
        }
        out
    }

    /// Build from (value, multiplicity) pairs; zero multiplicities are dropped.
    pub fn from_groups(groups: impl IntoIterator<Item = (f64, usize)>) -> Self {
        let expanded = groups
            .into_iter()
            .flat_map(|(v, m)| std::iter::repeat_n(v, m))
            .collect();
        Self::from_values(expanded)
    }

    /// Matrix order.
    pub fn order(&self) -> usize {
        self.multiplicities.iter().sum()
    }

    pub fn trace(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.multiplicities)
            .map(|(v, &m)| v * m as f64)
            .sum()
    }

    /// All eigenvalues, descending, each repeated by its multiplicity.
    pub fn expanded(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.multiplicities)
            .flat_map(|(&v, &m)| std::iter::repeat_n(v, m))
            .collect()
    }

    /// Largest elementwise gap between the sorted spectra.
    pub fn max_abs_difference(&self, other: &EigenSpectrum) -> Result<f64> {
        let (a, b) = (self.expanded(), other.expanded());
        if a.len() != b.len() {
            return Err(Error::LengthMismatch(a.len(), b.len()));
        }
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
    }
}

/// `K[i][j] = 1` on the diagonal and `r^{lca_height(i, j)}` elsewhere, with
/// rows in class (leaf) order.
pub fn build_block_matrix(spec: &BlockCorrelationSpec) -> DMatrix<f64> {
    let leaves = spec.tree.leaves();
    let n = leaves.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            let h = lca_height(&spec.tree, leaves[i], leaves[j]).expect("leaves");
            spec.r[h - 1]
        }
    })
}

fn rational(x: f64) -> Result<BigRational> {
    BigRational::from_float(x).ok_or(Error::NonFinite)
}

fn check_balanced(level_counts: &[usize], r: &[f64]) -> Result<()> {
    balanced_tree(level_counts)?;
    let h = level_counts.len() - 1;
    if r.len() != h {
        return Err(Error::InvalidConfig(format!(
            "{} levels need {h} correlation values, got {}",
            level_counts.len(),
            r.len()
        )));
    }
    if h == 0 {
        return Err(Error::InvalidLevelCounts("tree has no leaves below the root".into()));
    }
    if let Some(x) = r.iter().find(|&&x| x.is_nan() || x < 0.0) {
        return Err(Error::PreconditionViolated(format!(
            "correlations must be nonnegative, got {x}"
        )));
    }
    Ok(())
}

/// Exact closed-form spectrum of a balanced block matrix as
/// `(eigenvalue, multiplicity)` pairs, from the leaf level up.
///
/// `level_counts` is root first (`C_H = 1, ..., C_0`) as for
/// [`balanced_tree`]; the `f64` correlations are converted exactly.
pub fn balanced_eigenvalues_exact(
    level_counts: &[usize],
    r: &[f64],
) -> Result<Vec<(BigRational, usize)>> {
    check_balanced(level_counts, r)?;
    let rq = r.iter().map(|&x| rational(x)).collect::<Result<Vec<_>>>()?;
    // counts[h] = C_h, leaf level first.
    let counts: Vec<usize> = level_counts.iter().rev().copied().collect();
    let height = counts.len() - 1;
    let c0 = BigRational::from_integer(BigInt::from(counts[0]));
    let one = BigRational::from_integer(BigInt::from(1));
    let mut out = Vec::with_capacity(height + 1);
    let mut lambda = &one - &rq[0];
    out.push((lambda.clone(), counts[0] - counts[1]));
    for h in 1..height {
        let ch = BigRational::from_integer(BigInt::from(counts[h]));
        lambda = lambda + (&rq[h - 1] - &rq[h]) * &c0 / ch;
        out.push((lambda.clone(), counts[h] - counts[h + 1]));
    }
    lambda = lambda + &c0 * &rq[height - 1];
    out.push((lambda, 1));
    Ok(out)
}

/// Sum of `value * multiplicity` in exact arithmetic.
pub fn exact_trace(groups: &[(BigRational, usize)]) -> BigRational {
    groups.iter().fold(BigRational::zero(), |acc, (v, m)| {
        acc + v * BigRational::from_integer(BigInt::from(*m))
    })
}

/// Closed-form spectrum of a balanced block matrix.
pub fn balanced_eigenvalues_closed_form(level_counts: &[usize], r: &[f64]) -> Result<EigenSpectrum> {
    let exact = balanced_eigenvalues_exact(level_counts, r)?;
    Ok(EigenSpectrum::from_groups(
        exact
            .iter()
            .map(|(v, m)| (v.to_f64().unwrap_or(f64::NAN), *m)),
    ))
}

/// Spectrum of the `d x d` matrix with unit diagonal and every other entry `p`.
pub fn star_matrix_eigenvalues(d: usize, p: f64) -> Result<EigenSpectrum> {
    if d < 2 {
        return Err(Error::PreconditionViolated(format!("need d >= 2, got {d}")));
    }
    Ok(EigenSpectrum::from_groups([
        (1.0 + p * (d as f64 - 1.0), 1),
        (1.0 - p, d - 1),
    ]))
}

/// Group-averaged matrix `(G'G)^{-1/2} G'KG (G'G)^{-1/2}` for the 0/1
/// membership matrix `G` of `groups`.
pub fn group_reduction(k: &DMatrix<f64>, groups: &[Vec<usize>]) -> DMatrix<f64> {
    let g = groups.len();
    DMatrix::from_fn(g, g, |a, b| {
        let s: f64 = groups[a]
            .iter()
            .flat_map(|&i| groups[b].iter().map(move |&j| k[(i, j)]))
            .sum();
        s / ((groups[a].len() * groups[b].len()) as f64).sqrt()
    })
}

/// Spectrum reduction for a matrix made of constant blocks.
///
/// The template: within group `i` the diagonal is `diag[i]` and every other
/// entry `within[i]`; every entry between groups `i` and `j` is
/// `across[(i, j)]`. The result is `1 - r_ii`-style within-group values
/// (`diag[i] - within[i]`, `p_i - 1` times each) and the reduced matrix
/// with `a_ii = diag[i] + (p_i - 1) within[i]` and
/// `a_ij = sqrt(p_i p_j) across[(i, j)]`, whose spectrum supplies the rest.
pub fn two_level_block_reduction(
    k: &DMatrix<f64>,
    groups: &[Vec<usize>],
    diag: &[f64],
    within: &[f64],
    across: &DMatrix<f64>,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let g = groups.len();
    if diag.len() != g || within.len() != g || across.nrows() != g || across.ncols() != g {
        return Err(Error::TemplateMismatch(format!(
            "{g} groups but parameter sizes {}, {}, {}x{}",
            diag.len(),
            within.len(),
            across.nrows(),
            across.ncols()
        )));
    }
    let n = k.nrows();
    let mut seen = vec![false; n];
    for i in groups.iter().flatten() {
        if *i >= n || std::mem::replace(&mut seen[*i], true) {
            return Err(Error::TemplateMismatch(format!("index {i} missing or repeated")));
        }
    }
    if seen.iter().any(|s| !s) || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::TemplateMismatch("groups must partition the rows".into()));
    }
    let tol = 1e-12 * k.amax().max(1.0);
    for (a, ga) in groups.iter().enumerate() {
        for (b, gb) in groups.iter().enumerate() {
            for &i in ga {
                for &j in gb {
                    let want = match (a == b, i == j) {
                        (true, true) => diag[a],
                        (true, false) => within[a],
                        _ => across[(a, b)],
                    };
                    if (k[(i, j)] - want).abs() > tol {
                        return Err(Error::TemplateMismatch(format!(
                            "entry ({i}, {j}) is {} but the template gives {want}",
                            k[(i, j)]
                        )));
                    }
                }
            }
        }
    }
    let mut within_eigs = Vec::new();
    for (a, ga) in groups.iter().enumerate() {
        within_eigs.extend(std::iter::repeat_n(diag[a] - within[a], ga.len() - 1));
    }
    Ok((within_eigs, group_reduction(k, groups)))
}

/// Read the constant-block parameters of `m` for `groups`, if it has that form.
fn block_parameters(
    m: &DMatrix<f64>,
    groups: &[Vec<usize>],
) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
    let g = groups.len();
    let diag = groups.iter().map(|gr| m[(gr[0], gr[0])]).collect();
    let within = groups
        .iter()
        .map(|gr| if gr.len() > 1 { m[(gr[0], gr[1])] } else { 0.0 })
        .collect();
    let across = DMatrix::from_fn(g, g, |a, b| {
        if a == b {
            0.0
        } else {
            m[(groups[a][0], groups[b][0])]
        }
    });
    (diag, within, across)
}

/// Spectrum of a block correlation matrix by repeated two-level reduction,
/// one tree level at a time from the leaves up. A level whose blocks are
/// not constant (sibling subtrees of unequal size) is finished with the
/// numerical solver.
///
/// All leaves must sit at the same depth.
pub fn hierarchical_spectrum(spec: &BlockCorrelationSpec) -> Result<EigenSpectrum> {
    let tree = &spec.tree;
    let depth = tree.max_depth();
    if tree.leaves().iter().any(|&l| tree.depth(l) != depth) {
        return Err(Error::PreconditionViolated(
            "all leaves must share one depth; see normalize_depths".into(),
        ));
    }
    let mut m = build_block_matrix(spec);
    let mut nodes: Vec<usize> = tree.leaves().to_vec();
    let mut values = Vec::new();
    while nodes.len() > 1 {
        let mut parents: Vec<usize> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, &v) in nodes.iter().enumerate() {
            let p = tree.parent(v).expect("non-root");
            match parents.iter().position(|&q| q == p) {
                Some(k) => groups[k].push(i),
                None => {
                    parents.push(p);
                    groups.push(vec![i]);
                }
            }
        }
        let (diag, within, across) = block_parameters(&m, &groups);
        match two_level_block_reduction(&m, &groups, &diag, &within, &across) {
            Ok((w, a)) => {
                values.extend(w);
                m = a;
                nodes = parents;
            }
            Err(Error::TemplateMismatch(_)) => break,
            Err(e) => return Err(e),
        }
    }
    values.extend(numerical_eigenvalues(&m)?.expanded());
    Ok(EigenSpectrum::from_values(values))
}

/// Sufficient condition for the bottom `C_0 - C_h` eigenvalues to lie below
/// the top `C_h`: `m <= (M - 2 delta (p_max - 1)) / (p_max (C_h - 1))`.
pub fn generic_gap_condition(big_m: f64, m: f64, delta: f64, p_max: usize, c_h: usize) -> bool {
    if p_max < 1 || c_h < 2 {
        return false;
    }
    let p = p_max as f64;
    m <= (big_m - 2.0 * delta * (p - 1.0)) / (p * (c_h as f64 - 1.0))
}

fn check_symmetric(k: &DMatrix<f64>) -> Result<()> {
    if k.nrows() != k.ncols() {
        return Err(Error::DimensionMismatch {
            expected: k.nrows(),
            got: k.ncols(),
        });
    }
    if k.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut worst = 0.0f64;
    for i in 0..k.nrows() {
        for j in i + 1..k.ncols() {
            worst = worst.max((k[(i, j)] - k[(j, i)]).abs());
        }
    }
    if worst > 1e-12 * k.amax().max(1.0) {
        return Err(Error::NotSymmetric(worst));
    }
    Ok(())
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations,
/// iterated until the off-diagonal norm is below `1e-12 ||K||_F`.
pub fn jacobi_eigenvalues(k: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_symmetric(k)?;
    let n = k.nrows();
    // Symmetrize exactly so rotations see one value per pair.
    let mut a = DMatrix::from_fn(n, n, |i, j| 0.5 * (k[(i, j)] + k[(j, i)]));
    let target = 1e-12 * a.norm();
    let off = |a: &DMatrix<f64>| {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += 2.0 * a[(i, j)] * a[(i, j)];
            }
        }
        s.sqrt()
    };
    for _sweep in 0..100 {
        if off(&a) <= target {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let arp = a[(r, p)];
                    let arq = a[(r, q)];
                    a[(r, p)] = c * arp - s * arq;
                    a[(r, q)] = s * arp + c * arq;
                }
                for r in 0..n {
                    let apr = a[(p, r)];
                    let aqr = a[(q, r)];
                    a[(p, r)] = c * apr - s * aqr;
                    a[(q, r)] = s * apr + c * aqr;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
            }
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    vals.sort_by(|x, y| y.total_cmp(x));
    Ok(vals)
}

/// Numerical spectrum of a symmetric matrix.
pub fn numerical_eigenvalues(k: &DMatrix<f64>) -> Result<EigenSpectrum> {
    Ok(EigenSpectrum::from_values(jacobi_eigenvalues(k)?))
}

/// Correlation-style Gram matrix of features, ordered by class.
///
/// Features are centered by their dataset mean and each row is scaled to
/// unit norm. Rows are sorted by (coarse group, fine class, original
/// index); the permutation is returned alongside the matrix.
pub fn gram_matrix(
    features: &[Vec<f64>],
    labels: &[usize],
    tree: &LabelTree,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InsufficientVertices(n));
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch(n, labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= tree.num_classes()) {
        return Err(Error::UnknownLabel(format!("class index {l}")));
    }
    let d = features[0].len();
    if let Some(r) = features.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: r.len(),
        });
    }
    let mean: Vec<f64> = (0..d)
        .map(|k| features.iter().map(|r| r[k]).sum::<f64>() / n as f64)
        .collect();
    let mut rows = Vec::with_capacity(n);
    for (i, r) in features.iter().enumerate() {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = r.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
        if norm <= 1e-12 * scale {
            return Err(Error::DegenerateRow(i));
        }
        rows.push(c.into_iter().map(|x| x / norm).collect::<Vec<f64>>());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (tree.coarse_of_class(labels[i]), labels[i], i));
    let k = DMatrix::from_fn(n, n, |a, b| {
        let (x, y) = (&rows[order[a]], &rows[order[b]]);
        x.iter().zip(y).map(|(p, q)| p * q).sum()
    });
    Ok((k, order))
}

/// A spectral gap: after the `position`-th largest eigenvalue (1-based) the
/// spectrum drops by `relative_drop = (l_i - l_{i+1}) / l_i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub position: usize,
    pub relative_drop: f64,
}

/// Relative drops among the `top_k` largest eigenvalues, largest first.
/// Drops below `1e-9` and positions with a nonpositive eigenvalue are ignored.
pub fn phase_transition_detect(spectrum: &EigenSpectrum, top_k: usize) -> Vec<Transition> {
    let vals = spectrum.expanded();
    let limit = top_k.min(vals.len());
    let mut out: Vec<Transition> = (0..limit.saturating_sub(1))
        .filter(|&i| vals[i] > 0.0)
        .map(|i| Transition {
            position: i + 1,
            relative_drop: (vals[i] - vals[i + 1]) / vals[i],
        })
        .filter(|t| t.relative_drop > 1e-9)
        .collect();
    out.sort_by(|a, b| {
        b.relative_drop
            .total_cmp(&a.relative_drop)
            .then(a.position.cmp(&b.position))
    });
    out
}

/// Write `rank,eigenvalue,multiplicity_group` rows, one per eigenvalue.
pub fn write_spectrum_csv<W: Write>(mut w: W, spectrum: &EigenSpectrum) -> Result<()> {
    writeln!(w, "rank,eigenvalue,multiplicity_group")?;
    let mut rank = 1;
    for (g, (&v, &m)) in spectrum.values.iter().zip(&spectrum.multiplicities).enumerate() {
        for _ in 0..m {
            writeln!(w, "{rank},{v:.15e},{}", g + 1)?;
            rank += 1;
        }
    }
    Ok(())
}
