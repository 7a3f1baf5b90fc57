//! Scalar reverse-mode automatic differentiation on a flat tape.
//!
//! Every differentiable forward pass in this crate (decoder layers, losses,
//! box refinement) is recorded as scalar nodes on a [`Tape`]; one backward
//! sweep then yields exact gradients for all leaves. Vector-valued
//! quantities are laid out as contiguous node ranges ([`Seg`]) so that inner
//! products collapse into single fused [`Op::Dot`]/[`Op::DotAdd`] nodes,
//! which keeps tape sizes small enough to train on a single core.

use crate::error::{Error, Result};
use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Handle to one node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub u32);

/// Contiguous run of nodes, used as a vector operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seg {
    pub start: u32,
    pub len: u32,
}

impl Seg {
    pub fn var(&self, i: usize) -> Var {
        debug_assert!((i as u32) < self.len);
        Var(self.start + i as u32)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        (self.start..self.start + self.len).map(Var)
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Copy(u32),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    AddC(u32),
    MulC(u32, f64),
    MulAdd(u32, u32, u32),
    Exp(u32),
    Ln(u32),
    Sqrt(u32),
    Abs(u32),
    Relu(u32),
    Max(u32, u32),
    Min(u32, u32),
    MaxC(u32, f64),
    MinC(u32, f64),
    PowC(u32, f64),
    Dot { a: u32, b: u32, len: u32 },
    DotAdd { a: u32, b: u32, len: u32, c: u32 },
    SumRange { a: u32, len: u32 },
}

/// Gradients of one scalar root with respect to every tape node.
pub struct Grads {
    g: Vec<f64>,
}

impl Grads {
    pub fn var(&self, v: Var) -> f64 {
        self.g[v.0 as usize]
    }

    pub fn seg(&self, s: Seg) -> &[f64] {
        &self.g[s.start as usize..(s.start + s.len) as usize]
    }
}

/// Define-by-run computation tape.
#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            ops: Vec::with_capacity(n),
            vals: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn val(&self, v: Var) -> f64 {
        self.vals[v.0 as usize]
    }

    pub fn seg_vals(&self, s: Seg) -> &[f64] {
        &self.vals[s.start as usize..(s.start + s.len) as usize]
    }

    #[inline]
    fn push(&mut self, op: Op, val: f64) -> Var {
        let id = self.ops.len() as u32;
        self.ops.push(op);
        self.vals.push(val);
        Var(id)
    }

    pub fn leaf(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, v)
    }

    /// Contiguous block of leaves from a slice.
    pub fn leaf_seg(&mut self, values: &[f64]) -> Seg {
        let start = self.ops.len() as u32;
        for &v in values {
            self.push(Op::Leaf, v);
        }
        Seg {
            start,
            len: values.len() as u32,
        }
    }

    /// Re-emit an existing node's value at the current tape position.
    /// Used to pack scattered results into one contiguous [`Seg`].
    pub fn copy(&mut self, a: Var) -> Var {
        let v = self.val(a);
        self.push(Op::Copy(a.0), v)
    }

    /// Pack arbitrary nodes into a contiguous range.
    pub fn pack(&mut self, vars: &[Var]) -> Seg {
        let start = self.ops.len() as u32;
        for &v in vars {
            self.copy(v);
        }
        Seg {
            start,
            len: vars.len() as u32,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) + self.val(b);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) - self.val(b);
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) * self.val(b);
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) / self.val(b);
        self.push(Op::Div(a.0, b.0), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.val(a);
        self.push(Op::Neg(a.0), v)
    }

    pub fn add_c(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a) + c;
        self.push(Op::AddC(a.0), v)
    }

    pub fn mul_c(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a) * c;
        self.push(Op::MulC(a.0, c), v)
    }

    /// `a * b + c` as a single node.
    pub fn mul_add(&mut self, a: Var, b: Var, c: Var) -> Var {
        let v = self.val(a) * self.val(b) + self.val(c);
        self.push(Op::MulAdd(a.0, b.0, c.0), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.val(a).exp();
        self.push(Op::Exp(a.0), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.val(a).ln();
        self.push(Op::Ln(a.0), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.val(a).sqrt();
        self.push(Op::Sqrt(a.0), v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.val(a).abs();
        self.push(Op::Abs(a.0), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.val(a).max(0.0);
        self.push(Op::Relu(a.0), v)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).max(self.val(b));
        self.push(Op::Max(a.0, b.0), v)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).min(self.val(b));
        self.push(Op::Min(a.0, b.0), v)
    }

    pub fn max_c(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).max(c);
        self.push(Op::MaxC(a.0, c), v)
    }

    pub fn min_c(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).min(c);
        self.push(Op::MinC(a.0, c), v)
    }

    /// `a^p` for a fixed exponent, with a zero-base guard in the backward
    /// rule so clamped similarities at exactly 0 never produce NaN.
    pub fn pow_c(&mut self, a: Var, p: f64) -> Var {
        let v = self.val(a).powf(p);
        self.push(Op::PowC(a.0, p), v)
    }

    /// Inner product of two equal-length contiguous ranges, one node.
    pub fn dot(&mut self, a: Seg, b: Seg) -> Var {
        assert_eq!(a.len, b.len, "dot operands must have equal length");
        let mut v = 0.0;
        for i in 0..a.len() {
            v += self.vals[a.start as usize + i] * self.vals[b.start as usize + i];
        }
        self.push(
            Op::Dot {
                a: a.start,
                b: b.start,
                len: a.len,
            },
            v,
        )
    }

    /// `dot(a, b) + c` as one node; the workhorse behind affine maps.
    pub fn dot_add(&mut self, a: Seg, b: Seg, c: Var) -> Var {
        assert_eq!(a.len, b.len, "dot operands must have equal length");
        let mut v = self.val(c);
        for i in 0..a.len() {
            v += self.vals[a.start as usize + i] * self.vals[b.start as usize + i];
        }
        self.push(
            Op::DotAdd {
                a: a.start,
                b: b.start,
                len: a.len,
                c: c.0,
            },
            v,
        )
    }

    /// Sum of one contiguous range.
    pub fn sum_range(&mut self, a: Seg) -> Var {
        let mut v = 0.0;
        for i in 0..a.len() {
            v += self.vals[a.start as usize + i];
        }
        self.push(
            Op::SumRange {
                a: a.start,
                len: a.len,
            },
            v,
        )
    }

    /// Sum of an arbitrary set of nodes via an add chain.
    pub fn sum_vars(&mut self, vars: &[Var]) -> Var {
        match vars {
            [] => self.leaf(0.0),
            [v] => *v,
            [first, rest @ ..] => {
                let mut acc = *first;
                for v in rest {
                    acc = self.add(acc, *v);
                }
                acc
            }
        }
    }

    /// Maximum of a non-empty set of nodes via a max chain.
    pub fn max_vars(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut acc = vars[0];
        for v in &vars[1..] {
            acc = self.max(acc, *v);
        }
        acc
    }

    /// Numerically stable `log(1 + exp(x))`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let pos = self.relu(x);
        let a = self.abs(x);
        let na = self.neg(a);
        let e = self.exp(na);
        let e1 = self.add_c(e, 1.0);
        let l = self.ln(e1);
        self.add(pos, l)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        let n = self.ops.len();
        let mut g = vec![0.0f64; n];
        g[root.0 as usize] = 1.0;
        let vals = &self.vals;
        for idx in (0..n).rev() {
            let gy = g[idx];
            if gy == 0.0 {
                continue;
            }
            match self.ops[idx] {
                Op::Leaf => {}
                Op::Copy(a) => g[a as usize] += gy,
                Op::Add(a, b) => {
                    g[a as usize] += gy;
                    g[b as usize] += gy;
                }
                Op::Sub(a, b) => {
                    g[a as usize] += gy;
                    g[b as usize] -= gy;
                }
                Op::Mul(a, b) => {
                    g[a as usize] += gy * vals[b as usize];
                    g[b as usize] += gy * vals[a as usize];
                }
                Op::Div(a, b) => {
                    let vb = vals[b as usize];
                    g[a as usize] += gy / vb;
                    g[b as usize] -= gy * vals[a as usize] / (vb * vb);
                }
                Op::Neg(a) => g[a as usize] -= gy,
                Op::AddC(a) => g[a as usize] += gy,
                Op::MulC(a, c) => g[a as usize] += gy * c,
                Op::MulAdd(a, b, c) => {
                    g[a as usize] += gy * vals[b as usize];
                    g[b as usize] += gy * vals[a as usize];
                    g[c as usize] += gy;
                }
                Op::Exp(a) => g[a as usize] += gy * vals[idx],
                Op::Ln(a) => g[a as usize] += gy / vals[a as usize],
                Op::Sqrt(a) => g[a as usize] += gy * 0.5 / vals[idx],
                Op::Abs(a) => {
                    let va = vals[a as usize];
                    if va > 0.0 {
                        g[a as usize] += gy;
                    } else if va < 0.0 {
                        g[a as usize] -= gy;
                    }
                }
                Op::Relu(a) => {
                    if vals[a as usize] > 0.0 {
                        g[a as usize] += gy;
                    }
                }
                Op::Max(a, b) => {
                    if vals[a as usize] >= vals[b as usize] {
                        g[a as usize] += gy;
                    } else {
                        g[b as usize] += gy;
                    }
                }
                Op::Min(a, b) => {
                    if vals[a as usize] <= vals[b as usize] {
                        g[a as usize] += gy;
                    } else {
                        g[b as usize] += gy;
                    }
                }
                Op::MaxC(a, c) => {
                    if vals[a as usize] >= c {
                        g[a as usize] += gy;
                    }
                }
                Op::MinC(a, c) => {
                    if vals[a as usize] <= c {
                        g[a as usize] += gy;
                    }
                }
                Op::PowC(a, p) => {
                    let va = vals[a as usize];
                    if va == 0.0 {
                        if p == 1.0 {
                            g[a as usize] += gy;
                        }
                        // p > 1: derivative 0; p < 1: clamp the infinity to 0.
                    } else {
                        g[a as usize] += gy * p * va.powf(p - 1.0);
                    }
                }
                Op::Dot { a, b, len } => {
                    for i in 0..len as usize {
                        g[a as usize + i] += gy * vals[b as usize + i];
                        g[b as usize + i] += gy * vals[a as usize + i];
                    }
                }
                Op::DotAdd { a, b, len, c } => {
                    for i in 0..len as usize {
                        g[a as usize + i] += gy * vals[b as usize + i];
                        g[b as usize + i] += gy * vals[a as usize + i];
                    }
                    g[c as usize] += gy;
                }
                Op::SumRange { a, len } => {
                    for i in 0..len as usize {
                        g[a as usize + i] += gy;
                    }
                }
            }
        }
        Grads { g }
    }
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `build` records the scalar function of interest on a fresh tape given a
/// leaf segment holding the parameter vector. Up to `sample` coordinates
/// (all of them when the vector is smaller) are probed; the return value is
/// the worst relative error `|ad - fd| / max(1, |ad|, |fd|)`.
pub fn grad_check<F>(theta: &[f64], eps: f64, sample: usize, seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, Seg) -> Var,
{
    let eval = |params: &[f64]| -> Result<(f64, Tape, Seg, Var)> {
        let mut tape = Tape::new();
        let seg = tape.leaf_seg(params);
        let root = build(&mut tape, seg);
        let v = tape.val(root);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective value {v}")));
        }
        Ok((v, tape, seg, root))
    };

    let (_, tape, seg, root) = eval(theta)?;
    let grads = tape.backward(root);
    let analytic = grads.seg(seg).to_vec();

    let n = theta.len();
    let coords: Vec<usize> = if n <= sample {
        (0..n).collect()
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        index_sample(&mut rng, n, sample).into_vec()
    };

    let mut worst = 0.0f64;
    let mut probe = theta.to_vec();
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let (fp, ..) = eval(&probe)?;
        probe[i] = orig - eps;
        let (fm, ..) = eval(&probe)?;
        probe[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let ad = analytic[i];
        let rel = (ad - fd).abs() / 1.0f64.max(ad.abs()).max(fd.abs());
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
