//! Scalar reverse-mode differentiation.
//!
//! Loss code is written once against the [`Real`] trait and evaluated either
//! on plain `f64` or on [`Var`], which records every operation on a
//! thread-local tape. [`gradient`] seeds the inputs, runs the closure and
//! sweeps the tape backwards.
//!
//! Each thread owns its own tape, so independent runs may execute on a
//! thread pool. Nested [`gradient`] calls on one thread are not supported.

use std::cell::{Cell, RefCell};
use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::Result;

/// Scalar type the losses are generic over.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Lift a constant (zero derivative).
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn atanh(self) -> Self;
    fn relu(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    /// Same value, derivative cut.
    fn detach(self) -> Self {
        Self::cst(self.value())
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn atanh(self) -> Self {
        f64::atanh(self)
    }
    #[inline]
    fn relu(self) -> Self {
        self.max(0.0)
    }
}

const NO_PARENT: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

thread_local! {
    static TAPE: RefCell<Vec<Node>> = const { RefCell::new(Vec::new()) };
    static NONSMOOTH: Cell<u64> = const { Cell::new(0) };
}

/// A value recorded on the current thread's tape.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: u32,
    val: f64,
}

impl Var {
    fn push(parents: [u32; 2], partials: [f64; 2], val: f64) -> Var {
        if parents[0] == NO_PARENT && parents[1] == NO_PARENT {
            return Var { idx: NO_PARENT, val };
        }
        let idx = TAPE.with(|t| {
            let mut t = t.borrow_mut();
            t.push(Node { parents, partials });
            (t.len() - 1) as u32
        });
        Var { idx, val }
    }

    #[inline]
    fn unary(self, val: f64, d: f64) -> Var {
        if self.idx == NO_PARENT {
            return Var { idx: NO_PARENT, val };
        }
        Var::push([self.idx, NO_PARENT], [d, 0.0], val)
    }

    #[inline]
    fn binary(self, other: Var, val: f64, da: f64, db: f64) -> Var {
        Var::push([self.idx, other.idx], [da, db], val)
    }

    pub fn is_constant(self) -> bool {
        self.idx == NO_PARENT
    }
}

impl Add for Var {
    type Output = Var;
    fn add(self, o: Var) -> Var {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}
impl Sub for Var {
    type Output = Var;
    fn sub(self, o: Var) -> Var {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}
impl Mul for Var {
    type Output = Var;
    fn mul(self, o: Var) -> Var {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}
impl Div for Var {
    type Output = Var;
    fn div(self, o: Var) -> Var {
        let q = self.val / o.val;
        self.binary(o, q, 1.0 / o.val, -q / o.val)
    }
}
impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}
impl Add<f64> for Var {
    type Output = Var;
    fn add(self, o: f64) -> Var {
        self.unary(self.val + o, 1.0)
    }
}
impl Sub<f64> for Var {
    type Output = Var;
    fn sub(self, o: f64) -> Var {
        self.unary(self.val - o, 1.0)
    }
}
impl Mul<f64> for Var {
    type Output = Var;
    fn mul(self, o: f64) -> Var {
        self.unary(self.val * o, o)
    }
}
impl Div<f64> for Var {
    type Output = Var;
    fn div(self, o: f64) -> Var {
        self.unary(self.val / o, 1.0 / o)
    }
}

impl Real for Var {
    fn cst(v: f64) -> Self {
        Var {
            idx: NO_PARENT,
            val: v,
        }
    }
    fn value(self) -> f64 {
        self.val
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn atanh(self) -> Self {
        self.unary(self.val.atanh(), 1.0 / (1.0 - self.val * self.val))
    }
    fn relu(self) -> Self {
        if self.val > 0.0 {
            self.unary(self.val, 1.0)
        } else {
            Var::cst(0.0)
        }
    }
}

/// Record one evaluation at a point where the objective is only
/// piecewise smooth (clamped `atanh`, active clip branch).
pub fn note_nonsmooth() {
    NONSMOOTH.with(|c| c.set(c.get() + 1));
}

/// Count of non-smooth events on this thread since the last reset.
pub fn nonsmooth_events() -> u64 {
    NONSMOOTH.with(|c| c.get())
}

pub fn reset_nonsmooth() {
    NONSMOOTH.with(|c| c.set(0));
}

/// Value and gradient of `f` at `params`, plus the number of non-smooth
/// events hit during the evaluation.
pub fn gradient_with_events<F>(params: &[f64], f: F) -> Result<(f64, Vec<f64>, u64)>
where
    F: FnOnce(&[Var]) -> Result<Var>,
{
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        assert!(t.is_empty(), "nested gradient evaluation on one thread");
        t.reserve(params.len());
    });
    reset_nonsmooth();
    let inputs: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            TAPE.with(|t| {
                t.borrow_mut().push(Node {
                    parents: [NO_PARENT; 2],
                    partials: [0.0; 2],
                })
            });
            Var { idx: i as u32, val: v }
        })
        .collect();

    let out = f(&inputs);
    let tape = TAPE.with(|t| std::mem::take(&mut *t.borrow_mut()));
    let events = nonsmooth_events();
    let out = out?;

    let mut grad = vec![0.0; params.len()];
    if !out.is_constant() {
        let mut adj = vec![0.0; tape.len()];
        adj[out.idx as usize] = 1.0;
        for i in (0..tape.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = tape[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NO_PARENT {
                    adj[p as usize] += a * node.partials[k];
                }
            }
        }
        grad.copy_from_slice(&adj[..params.len()]);
    }
    Ok((out.val, grad, events))
}

/// Central finite differences, used as an independent check of [`gradient_with_events`].
pub fn finite_difference<F>(params: &[f64], step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + step;
        let fp = f(&p)?;
        p[i] = orig - step;
        let fm = f(&p)?;
        p[i] = orig;
        out.push((fp - fm) / (2.0 * step));
    }
    Ok(out)
}

/// Sum with Kahan compensation, in iteration order.
pub fn kahan_sum<T: Real, I: IntoIterator<Item = T>>(items: I) -> T {
    let mut sum = T::zero();
    let mut comp = T::zero();
    for x in items {
        let y = x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm_sq<T: Real>(a: &[T]) -> T {
    dot(a, a)
}

/// Euclidean norm with the kink at zero mapped to a constant zero.
pub fn norm<T: Real>(a: &[T]) -> T {
    let s = norm_sq(a);
    if s.value() <= 0.0 {
        T::zero()
    } else {
        s.sqrt()
    }
}
