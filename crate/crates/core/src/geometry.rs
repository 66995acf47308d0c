//! Poincaré ball and Klein model primitives.
//!
//! The typed API ([`PoincarePoint`], [`KleinPoint`] and the free functions
//! taking them) validates the ball invariant on construction. The
//! [`kernel`] submodule holds the unchecked, scalar-generic versions the
//! objectives differentiate through.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default clipping margin for [`clip_to_ball`].
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// `atanh` arguments (and `tanh` outputs) are clamped to this value.
pub const ATANH_LIMIT: f64 = 1.0 - 1e-15;

/// Positive ball curvature constant `c`; the ball has radius `1/sqrt(c)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Curvature(c))
        } else {
            Err(Error::InvalidCurvature(c))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// Radius of the ball, `1/sqrt(c)`.
    #[inline]
    pub fn radius(self) -> f64 {
        1.0 / self.0.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Curvature(1.0)
    }
}

impl TryFrom<f64> for Curvature {
    type Error = Error;
    fn try_from(c: f64) -> Result<Self> {
        Curvature::new(c)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.0
    }
}

fn check_ball(coords: &[f64], c: Curvature) -> Result<()> {
    if coords.is_empty() {
        return Err(Error::EmptyInput);
    }
    if coords.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let q = c.value() * coords.iter().map(|x| x * x).sum::<f64>();
    if q < 1.0 {
        Ok(())
    } else {
        Err(Error::OutsideBall(q))
    }
}

fn check_pair(a: (usize, Curvature), b: (usize, Curvature)) -> Result<()> {
    if a.1 != b.1 {
        return Err(Error::MixedCurvature(a.1.value(), b.1.value()));
    }
    if a.0 != b.0 {
        return Err(Error::DimensionMismatch {
            expected: a.0,
            got: b.0,
        });
    }
    Ok(())
}

macro_rules! ball_point {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            coords: Vec<f64>,
            c: Curvature,
        }

        impl $name {
            pub fn new(coords: Vec<f64>, c: Curvature) -> Result<Self> {
                check_ball(&coords, c)?;
                Ok(Self { coords, c })
            }

            pub fn origin(dim: usize, c: Curvature) -> Self {
                Self {
                    coords: vec![0.0; dim.max(1)],
                    c,
                }
            }

            pub fn coords(&self) -> &[f64] {
                &self.coords
            }

            pub fn into_coords(self) -> Vec<f64> {
                self.coords
            }

            pub fn curvature(&self) -> Curvature {
                self.c
            }

            pub fn dim(&self) -> usize {
                self.coords.len()
            }

            pub fn norm(&self) -> f64 {
                self.coords.iter().map(|x| x * x).sum::<f64>().sqrt()
            }
        }
    };
}

ball_point!(PoincarePoint, "A point strictly inside the Poincaré ball.");
ball_point!(KleinPoint, "A point strictly inside the Klein ball.");

impl KleinPoint {
    /// Lorentz factor `1/sqrt(1 - c|z|^2)`.
    pub fn lorentz_factor(&self) -> f64 {
        let q = self.c.value() * self.coords.iter().map(|x| x * x).sum::<f64>();
        1.0 / (1.0 - q).sqrt()
    }
}

/// Geodesic distance on the Poincaré ball.
pub fn poincare_distance(a: &PoincarePoint, b: &PoincarePoint) -> Result<f64> {
    check_pair((a.dim(), a.c), (b.dim(), b.c))?;
    Ok(kernel::poincare_distance(&a.coords, &b.coords, a.c.value()))
}

/// Exponential map at the origin.
pub fn exp_map_origin(v: &[f64], c: Curvature) -> Result<PoincarePoint> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    PoincarePoint::new(kernel::exp_map_origin(v, c.value()), c)
}

/// Logarithm map at the origin.
pub fn log_map_origin(u: &PoincarePoint) -> Vec<f64> {
    kernel::log_map_origin(&u.coords, u.c.value())
}

/// Radial clipping into the ball: identity inside radius `1/sqrt(c)`,
/// otherwise rescaled to norm `1/sqrt(c) - epsilon`.
pub fn clip_to_ball(v: &[f64], c: Curvature, epsilon: f64) -> Result<PoincarePoint> {
    if !(epsilon > 0.0 && epsilon < c.radius()) {
        return Err(Error::InvalidConfig(format!(
            "clip epsilon must lie in (0, {}), got {epsilon}",
            c.radius()
        )));
    }
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    PoincarePoint::new(kernel::clip_to_ball(v, c.value(), epsilon), c)
}

pub fn poincare_to_klein(z: &PoincarePoint) -> KleinPoint {
    KleinPoint {
        coords: kernel::poincare_to_klein(&z.coords, z.c.value()),
        c: z.c,
    }
}

pub fn klein_to_poincare(z: &KleinPoint) -> PoincarePoint {
    PoincarePoint {
        coords: kernel::klein_to_poincare(&z.coords, z.c.value()),
        c: z.c,
    }
}

/// Einstein midpoint: the Lorentz-factor weighted average of Klein points.
pub fn einstein_midpoint(points: &[KleinPoint]) -> Result<KleinPoint> {
    let first = points.first().ok_or(Error::EmptyInput)?;
    for p in &points[1..] {
        check_pair((first.dim(), first.c), (p.dim(), p.c))?;
    }
    let c = first.c.value();
    let weighted: Vec<(f64, &[f64])> = points
        .iter()
        .map(|p| {
            let q = c * p.coords.iter().map(|x| x * x).sum::<f64>();
            (1.0 / (1.0 - q).sqrt(), p.coords.as_slice())
        })
        .collect();
    let coords = kernel::weighted_mean(&weighted, first.dim());
    KleinPoint::new(coords, first.c)
}

/// Hyperbolic average of Poincaré points, computed through the Klein model.
pub fn hyp_ave_poincare(points: &[PoincarePoint]) -> Result<PoincarePoint> {
    let first = points.first().ok_or(Error::EmptyInput)?;
    for p in &points[1..] {
        check_pair((first.dim(), first.c), (p.dim(), p.c))?;
    }
    let refs: Vec<&[f64]> = points.iter().map(|p| p.coords.as_slice()).collect();
    let coords = kernel::hyp_ave_poincare(&refs, first.c.value());
    PoincarePoint::new(coords, first.c)
}

/// Unchecked, scalar-generic geometry used inside differentiated losses.
///
/// Slices are assumed to share a dimension and lie inside the ball of
/// curvature `c`. Clamp events are reported through
/// [`crate::autodiff::note_nonsmooth`].
pub mod kernel {
    use crate::autodiff::{dot, kahan_sum, norm, norm_sq, note_nonsmooth, Real};

    use super::ATANH_LIMIT;

    /// `atanh` with the argument clamped to [`ATANH_LIMIT`]. The clamped
    /// branch is a constant, so no derivative flows through it.
    pub fn atanh_clamped<T: Real>(x: T) -> T {
        if x.value() > ATANH_LIMIT {
            note_nonsmooth();
            T::cst(ATANH_LIMIT.atanh())
        } else {
            x.atanh()
        }
    }

    fn tanh_capped<T: Real>(x: T) -> T {
        let t = x.tanh();
        if t.value() > ATANH_LIMIT {
            note_nonsmooth();
            T::cst(ATANH_LIMIT)
        } else {
            t
        }
    }

    /// Poincaré distance. The Möbius-difference numerator
    /// `-(1 - 2c<a,b> + c|b|^2) a + (1 - c|a|^2) b` is evaluated as
    /// `(1 - c|a|^2)(b - a) - c|b - a|^2 a`, which is exact algebra and
    /// vanishes identically at `a = b`.
    pub fn poincare_distance<T: Real>(a: &[T], b: &[T], c: f64) -> T {
        let diff: Vec<T> = b.iter().zip(a).map(|(&y, &x)| y - x).collect();
        let dist = norm(&diff);
        if dist.value() == 0.0 {
            return T::zero();
        }
        let aa = norm_sq(a);
        let bb = norm_sq(b);
        let ab = dot(a, b);
        let dd = dist * dist;
        let la = -(aa * c) + 1.0;
        let bracket = la * la - la * dot(&diff, a) * (2.0 * c) + dd * aa * (c * c);
        let den = -(ab * (2.0 * c)) + aa * bb * (c * c) + 1.0;
        let sc = c.sqrt();
        let arg = dist * bracket.sqrt() * sc / den;
        atanh_clamped(arg) * (2.0 / sc)
    }

    /// Euclidean distance.
    pub fn l2_distance<T: Real>(a: &[T], b: &[T]) -> T {
        let diff: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
        norm(&diff)
    }

    pub fn exp_map_origin<T: Real>(v: &[T], c: f64) -> Vec<T> {
        let n = norm(v);
        if n.value() == 0.0 {
            return v.to_vec();
        }
        let sn = n * c.sqrt();
        let scale = tanh_capped(sn) / sn;
        v.iter().map(|&x| x * scale).collect()
    }

    pub fn log_map_origin<T: Real>(u: &[T], c: f64) -> Vec<T> {
        let n = norm(u);
        if n.value() == 0.0 {
            return u.iter().map(|_| T::zero()).collect();
        }
        let sn = n * c.sqrt();
        let scale = atanh_clamped(sn) / sn;
        u.iter().map(|&x| x * scale).collect()
    }

    pub fn clip_to_ball<T: Real>(v: &[T], c: f64, epsilon: f64) -> Vec<T> {
        let radius = 1.0 / c.sqrt();
        let n = norm(v);
        if n.value() < radius {
            return v.to_vec();
        }
        note_nonsmooth();
        let scale = T::cst(radius - epsilon) / n;
        v.iter().map(|&x| x * scale).collect()
    }

    pub fn poincare_to_klein<T: Real>(z: &[T], c: f64) -> Vec<T> {
        let s = T::cst(2.0) / (norm_sq(z) * c + 1.0);
        z.iter().map(|&x| x * s).collect()
    }

    pub fn klein_to_poincare<T: Real>(z: &[T], c: f64) -> Vec<T> {
        let mut q = -(norm_sq(z) * c) + 1.0;
        if q.value() <= 0.0 {
            note_nonsmooth();
            q = T::cst(f64::MIN_POSITIVE);
        }
        let s = T::cst(1.0) / (q.sqrt() + 1.0);
        z.iter().map(|&x| x * s).collect()
    }

    /// `sum_i w_i z_i / sum_i w_i`, compensated, in input order.
    pub fn weighted_mean<T: Real>(items: &[(T, &[T])], dim: usize) -> Vec<T> {
        let total = kahan_sum(items.iter().map(|(w, _)| *w));
        (0..dim)
            .map(|k| kahan_sum(items.iter().map(|(w, z)| *w * z[k])) / total)
            .collect()
    }

    /// Einstein midpoint of Klein points with Lorentz factor `1/sqrt(1 - c|z|^2)`.
    pub fn einstein_midpoint<T: Real>(points: &[&[T]], c: f64) -> Vec<T> {
        let items: Vec<(T, &[T])> = points
            .iter()
            .map(|z| {
                let q = -(norm_sq(z) * c) + 1.0;
                (T::cst(1.0) / q.sqrt(), *z)
            })
            .collect();
        weighted_mean(&items, points[0].len())
    }

    /// Poincaré prototype: map to Klein, take the Einstein midpoint, map back.
    ///
    /// The Lorentz factor of the Klein image of a Poincaré point `p` equals
    /// `(1 + c|p|^2) / (1 - c|p|^2)`; it is evaluated in that form because
    /// the Klein norm rounds to the boundary long before the Poincaré one.
    pub fn hyp_ave_poincare<T: Real>(points: &[&[T]], c: f64) -> Vec<T> {
        let klein: Vec<(T, Vec<T>)> = points
            .iter()
            .map(|p| {
                let q = norm_sq(p) * c;
                let gamma = (q + 1.0) / (-q + 1.0);
                (gamma, poincare_to_klein(p, c))
            })
            .collect();
        let items: Vec<(T, &[T])> = klein.iter().map(|(g, z)| (*g, z.as_slice())).collect();
        let mid = weighted_mean(&items, points[0].len());
        klein_to_poincare(&mid, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c1() -> Curvature {
        Curvature::default()
    }

    fn p(coords: &[f64]) -> PoincarePoint {
        PoincarePoint::new(coords.to_vec(), c1()).unwrap()
    }

    fn random_ball_point(rng: &mut ChaCha8Rng, dim: usize, max_norm: f64) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let r = max_norm * rng.random::<f64>().powf(1.0 / dim as f64);
        v.iter().map(|x| x / n * r).collect()
    }

    #[test]
    fn curvature_must_be_positive() {
        assert!(Curvature::new(0.0).is_err());
        assert!(Curvature::new(-1.0).is_err());
        assert!(Curvature::new(f64::NAN).is_err());
        assert_eq!(Curvature::new(2.0).unwrap().value(), 2.0);
    }

    #[test]
    fn construction_rejects_points_outside_ball() {
        assert!(matches!(
            PoincarePoint::new(vec![1.0, 0.0], c1()),
            Err(Error::OutsideBall(_))
        ));
        assert!(KleinPoint::new(vec![0.5, 0.5], Curvature::new(4.0).unwrap()).is_err());
    }

    #[test]
    fn distance_identity_and_origin_closed_form() {
        let a = p(&[0.3, -0.2]);
        assert_eq!(poincare_distance(&a, &a).unwrap(), 0.0);
        let d = poincare_distance(&p(&[0.0, 0.0]), &p(&[0.5, 0.0])).unwrap();
        assert!((d - 2.0 * 0.5f64.atanh()).abs() < 1e-15);
        assert!((d - 1.098612).abs() < 1e-6);
    }

    #[test]
    fn distance_matches_literal_mobius_formula() {
        // Direct transcription of the Möbius-difference form as an oracle.
        fn literal(a: &[f64], b: &[f64], c: f64) -> f64 {
            let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let aa: f64 = a.iter().map(|x| x * x).sum();
            let bb: f64 = b.iter().map(|x| x * x).sum();
            let ca = -(1.0 - 2.0 * c * ab + c * bb);
            let cb = 1.0 - c * aa;
            let den = 1.0 - 2.0 * c * ab + c * c * aa * bb;
            let n: f64 = a
                .iter()
                .zip(b)
                .map(|(x, y)| ((ca * x + cb * y) / den).powi(2))
                .sum::<f64>()
                .sqrt();
            2.0 / c.sqrt() * (c.sqrt() * n).atanh()
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = rng.random_range(0.1..3.0);
            let r = 0.99 / f64::sqrt(c);
            let a = random_ball_point(&mut rng, 4, r);
            let b = random_ball_point(&mut rng, 4, r);
            let got = kernel::poincare_distance(&a, &b, c);
            let want = literal(&a, &b, c);
            assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn small_curvature_recovers_twice_euclidean() {
        let c = Curvature::new(1e-8).unwrap();
        let a = PoincarePoint::new(vec![0.1, 0.0], c).unwrap();
        let b = PoincarePoint::new(vec![0.3, 0.0], c).unwrap();
        let d = poincare_distance(&a, &b).unwrap();
        assert!((d - 0.4).abs() < 1e-6, "{d}");
    }

    #[test]
    fn distance_rejects_mixed_operands() {
        let a = p(&[0.1, 0.0]);
        let b = PoincarePoint::new(vec![0.1, 0.0], Curvature::new(2.0).unwrap()).unwrap();
        assert!(matches!(poincare_distance(&a, &b), Err(Error::MixedCurvature(..))));
        let b = p(&[0.1, 0.0, 0.0]);
        assert!(matches!(
            poincare_distance(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn exp_map_examples() {
        assert_eq!(exp_map_origin(&[0.0, 0.0], c1()).unwrap().coords(), &[0.0, 0.0]);
        for t in [0.1, 1.0, 5.0, 17.0, 50.0] {
            let z = exp_map_origin(&[t, 0.0], c1()).unwrap();
            assert!(z.norm() < 1.0);
            if t < 17.0 {
                assert!((z.coords()[0] - t.tanh()).abs() < 1e-15);
            }
            assert_eq!(z.coords()[1], 0.0);
        }
    }

    #[test]
    fn log_map_examples() {
        assert_eq!(log_map_origin(&p(&[0.0, 0.0])), vec![0.0, 0.0]);
        let v = log_map_origin(&p(&[1f64.tanh(), 0.0]));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] == 0.0);
    }

    #[test]
    fn clip_examples() {
        let z = clip_to_ball(&[0.3, 0.4], c1(), DEFAULT_EPSILON).unwrap();
        assert_eq!(z.coords(), &[0.3, 0.4]);
        let z = clip_to_ball(&[3.0, 4.0], c1(), 1e-5).unwrap();
        assert!((z.coords()[0] - 0.6 * (1.0 - 1e-5)).abs() < 1e-15);
        assert!((z.coords()[1] - 0.8 * (1.0 - 1e-5)).abs() < 1e-15);
        assert_eq!(clip_to_ball(&[0.0], c1(), 1e-5).unwrap().coords(), &[0.0]);
        assert!(clip_to_ball(&[1.0], c1(), 2.0).is_err());
    }

    #[test]
    fn klein_conversion_examples() {
        let k = poincare_to_klein(&p(&[0.5, 0.0]));
        assert!((k.coords()[0] - 0.8).abs() < 1e-15);
        let b = klein_to_poincare(&KleinPoint::new(vec![0.8, 0.0], c1()).unwrap());
        assert!((b.coords()[0] - 0.5).abs() < 1e-15);
        let o = poincare_to_klein(&PoincarePoint::origin(3, c1()));
        assert_eq!(o.coords(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn klein_to_poincare_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let z = random_ball_point(&mut rng, 3, 0.999);
            let k = KleinPoint::new(z, c1()).unwrap();
            let b = klein_to_poincare(&k);
            assert!(b.norm() < k.norm());
        }
    }

    #[test]
    fn einstein_midpoint_examples() {
        let a = KleinPoint::new(vec![0.5, 0.0], c1()).unwrap();
        let o = KleinPoint::origin(2, c1());
        assert_eq!(einstein_midpoint(std::slice::from_ref(&a)).unwrap(), a);

        let m = einstein_midpoint(&[a.clone(), o]).unwrap();
        let g = 1.0 / 0.75f64.sqrt();
        let want = g * 0.5 / (g + 1.0);
        assert!((m.coords()[0] - want).abs() < 1e-15);
        assert!((m.coords()[0] - 0.267949).abs() < 1e-6);

        for r in [0.1, 0.7, 0.999] {
            let pair = [
                KleinPoint::new(vec![r, 0.0], c1()).unwrap(),
                KleinPoint::new(vec![-r, 0.0], c1()).unwrap(),
            ];
            assert_eq!(einstein_midpoint(&pair).unwrap().coords(), &[0.0, 0.0]);
        }
        assert_eq!(einstein_midpoint(&[]), Err(Error::EmptyInput));
        let other = KleinPoint::new(vec![0.1, 0.0], Curvature::new(2.0).unwrap()).unwrap();
        assert!(matches!(
            einstein_midpoint(&[a, other]),
            Err(Error::MixedCurvature(..))
        ));
    }

    #[test]
    fn hyp_ave_examples() {
        let a = p(&[0.4, -0.3]);
        let single = hyp_ave_poincare(std::slice::from_ref(&a)).unwrap();
        for (x, y) in single.coords().iter().zip(a.coords()) {
            assert!((x - y).abs() < 1e-15);
        }
        let neg = p(&[-0.4, 0.3]);
        let m = hyp_ave_poincare(&[a.clone(), neg]).unwrap();
        assert!(m.norm() < 1e-15);
    }

    #[test]
    fn hyp_ave_agrees_with_explicit_klein_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let pts: Vec<PoincarePoint> = (0..5)
                .map(|_| p(&random_ball_point(&mut rng, 3, 0.95)))
                .collect();
            let fused = hyp_ave_poincare(&pts).unwrap();
            let klein: Vec<KleinPoint> = pts.iter().map(poincare_to_klein).collect();
            let explicit = klein_to_poincare(&einstein_midpoint(&klein).unwrap());
            for (x, y) in fused.coords().iter().zip(explicit.coords()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hyp_ave_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts: Vec<PoincarePoint> = (0..9)
            .map(|_| p(&random_ball_point(&mut rng, 4, 0.99)))
            .collect();
        let base = hyp_ave_poincare(&pts).unwrap();
        pts.reverse();
        pts.swap(0, 4);
        let perm = hyp_ave_poincare(&pts).unwrap();
        for (x, y) in base.coords().iter().zip(perm.coords()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clamp_is_counted() {
        crate::autodiff::reset_nonsmooth();
        let x = kernel::atanh_clamped(1.0f64);
        assert!(x.is_finite());
        assert_eq!(crate::autodiff::nonsmooth_events(), 1);
    }
}
