//! Scalar abstraction shared by plain evaluation and reverse-mode differentiation.
//!
//! Every estimator in the crate is written once over [`Real`]. Instantiated with
//! `f64` it is an ordinary numeric routine; instantiated with [`Var`] it records
//! a tape on the current thread which [`gradient`] then sweeps backwards.

use std::cell::RefCell;
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

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
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn square(self) -> Self {
        self * self
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    fn softplus(self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(self) -> f64 {
        self
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
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
}

pub fn softplus_f64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const NO_PARENT: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    a: u32,
    b: u32,
    da: f64,
    db: f64,
}

thread_local! {
    static TAPE: RefCell<Tape> = const { RefCell::new(Tape { nodes: Vec::new(), active: false }) };
}

struct Tape {
    nodes: Vec<Node>,
    active: bool,
}

/// A tape-tracked scalar. Constants carry no tape index and cost nothing to
/// combine.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    val: f64,
    idx: u32,
}

impl Var {
    #[inline]
    fn constant(val: f64) -> Self {
        Var { val, idx: NO_PARENT }
    }

    #[inline]
    fn push(a: u32, da: f64, b: u32, db: f64, val: f64) -> Self {
        let idx = TAPE.with(|t| {
            let mut t = t.borrow_mut();
            debug_assert!(t.active, "Var arithmetic outside of a gradient session");
            let idx = t.nodes.len() as u32;
            t.nodes.push(Node { a, b, da, db });
            idx
        });
        Var { val, idx }
    }

    #[inline]
    fn unary(self, val: f64, d: f64) -> Self {
        if self.idx == NO_PARENT {
            Var::constant(val)
        } else {
            Var::push(self.idx, d, NO_PARENT, 0.0, val)
        }
    }

    #[inline]
    fn binary(self, other: Var, val: f64, dx: f64, dy: f64) -> Self {
        match (self.idx == NO_PARENT, other.idx == NO_PARENT) {
            (true, true) => Var::constant(val),
            (false, true) => Var::push(self.idx, dx, NO_PARENT, 0.0, val),
            (true, false) => Var::push(other.idx, dy, NO_PARENT, 0.0, val),
            (false, false) => Var::push(self.idx, dx, other.idx, dy, val),
        }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == NO_PARENT
    }
}

impl Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, o: Var) -> Var {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}
impl Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, o: Var) -> Var {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}
impl Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, o: Var) -> Var {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}
impl Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, o: Var) -> Var {
        let q = self.val / o.val;
        self.binary(o, q, 1.0 / o.val, -q / o.val)
    }
}
impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}
impl Add<f64> for Var {
    type Output = Var;
    #[inline]
    fn add(self, o: f64) -> Var {
        self.unary(self.val + o, 1.0)
    }
}
impl Sub<f64> for Var {
    type Output = Var;
    #[inline]
    fn sub(self, o: f64) -> Var {
        self.unary(self.val - o, 1.0)
    }
}
impl Mul<f64> for Var {
    type Output = Var;
    #[inline]
    fn mul(self, o: f64) -> Var {
        self.unary(self.val * o, o)
    }
}
impl Div<f64> for Var {
    type Output = Var;
    #[inline]
    fn div(self, o: f64) -> Var {
        self.unary(self.val / o, 1.0 / o)
    }
}
impl AddAssign for Var {
    #[inline]
    fn add_assign(&mut self, o: Var) {
        *self = *self + o;
    }
}
impl SubAssign for Var {
    #[inline]
    fn sub_assign(&mut self, o: Var) {
        *self = *self - o;
    }
}
impl MulAssign for Var {
    #[inline]
    fn mul_assign(&mut self, o: Var) {
        *self = *self * o;
    }
}

impl Real for Var {
    #[inline]
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn val(self) -> f64 {
        self.val
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    #[inline]
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    #[inline]
    fn square(self) -> Self {
        self.unary(self.val * self.val, 2.0 * self.val)
    }
    #[inline]
    fn softplus(self) -> Self {
        self.unary(softplus_f64(self.val), sigmoid_f64(self.val))
    }
}

struct Session;

impl Session {
    fn begin() -> Self {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            assert!(!t.active, "nested gradient sessions are not supported");
            t.active = true;
            t.nodes.clear();
        });
        Session
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            t.active = false;
            t.nodes.clear();
        });
    }
}

/// Evaluates `f` at `theta` and returns its value with the exact gradient.
///
/// The closure may return an error; it is passed through untouched.
pub fn gradient<F, E>(theta: &[f64], f: F) -> Result<(f64, Vec<f64>), E>
where
    F: FnOnce(&[Var]) -> Result<Var, E>,
{
    let _session = Session::begin();
    let inputs: Vec<Var> = theta
        .iter()
        .map(|&v| Var::push(NO_PARENT, 0.0, NO_PARENT, 0.0, v))
        .collect();
    let out = f(&inputs)?;
    let mut grad = vec![0.0; theta.len()];
    if out.idx == NO_PARENT {
        return Ok((out.val, grad));
    }
    TAPE.with(|t| {
        let t = t.borrow();
        let mut adj = vec![0.0f64; out.idx as usize + 1];
        adj[out.idx as usize] = 1.0;
        for i in (0..=out.idx as usize).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let node = t.nodes[i];
            if node.a != NO_PARENT {
                adj[node.a as usize] += g * node.da;
            }
            if node.b != NO_PARENT {
                adj[node.b as usize] += g * node.db;
            }
        }
        let n = theta.len().min(adj.len());
        grad[..n].copy_from_slice(&adj[..n]);
    });
    Ok((out.val, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let h = 1e-6;
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn poly<T: Real>(x: &[T]) -> T {
        let a = x[0];
        let b = x[1];
        (a * b).exp() / (b.square() + 1.0) + a.sin() * b.cos() - (a.softplus() + 2.0).ln()
            + (b * b + 3.0).sqrt() * 0.5
    }

    #[test]
    fn matches_finite_differences() {
        let x = [0.3, -1.2];
        let (v, g) = gradient::<_, ()>(&x, |t| Ok(poly(t))).unwrap();
        assert!((v - poly(&x)).abs() < 1e-15);
        let g_fd = fd(|t| poly(t), &x);
        for (a, b) in g.iter().zip(&g_fd) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let (v, g) = gradient::<_, ()>(&[1.0, 2.0], |_| Ok(Var::cst(4.0))).unwrap();
        assert_eq!(v, 4.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn reused_inputs_accumulate() {
        let (_, g) = gradient::<_, ()>(&[3.0], |t| Ok(t[0] * t[0] * t[0])).unwrap();
        assert!((g[0] - 27.0).abs() < 1e-12);
    }
}
