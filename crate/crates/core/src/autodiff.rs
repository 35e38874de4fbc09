//! Reverse-mode differentiation over small dense vectors.
//!
//! Everything that must be differentiated (the MLPs, the Lie-group primitives,
//! the integrator arithmetic and the losses) is written once against the
//! [`Algebra`] trait. [`Plain`] evaluates it directly in `f64`; [`Tape`]
//! records every primitive with its operands so a single reverse sweep yields
//! exact gradients for all parameters and inputs.

use thiserror::Error;

use crate::liegroup::{self, hat, right_jacobian, vee_unchecked, Mat3, Vec3};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TapeError {
    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,
    #[error("seed gradient has length {got}, output node has length {expected}")]
    SeedLength { expected: usize, got: usize },
}

/// Arithmetic shared by every evaluation mode.
///
/// `V3` and `M3` are 3-vectors and row-major 3×3 matrices, `Vector` a dense
/// vector of any length and `Scalar` a single number.
pub trait Algebra {
    type Scalar: Clone;
    type V3: Clone;
    type M3: Clone;
    type Vector: Clone;

    fn s_const(&mut self, c: f64) -> Self::Scalar;
    fn v3_const(&mut self, v: Vec3) -> Self::V3;
    fn m3_const(&mut self, m: Mat3) -> Self::M3;
    fn vec_const(&mut self, v: &[f64]) -> Self::Vector;

    fn s_val(&self, s: &Self::Scalar) -> f64;
    fn v3_val(&self, v: &Self::V3) -> Vec3;
    fn m3_val(&self, m: &Self::M3) -> Mat3;
    fn vec_val(&self, v: &Self::Vector) -> Vec<f64>;

    fn s_add(&mut self, a: &Self::Scalar, b: &Self::Scalar) -> Self::Scalar;
    fn s_scale(&mut self, a: &Self::Scalar, c: f64) -> Self::Scalar;
    /// `acos(clamp(c, −1, 1))²` with a derivative that stays finite at `c = 1`.
    fn s_acos_sq(&mut self, c: &Self::Scalar) -> Self::Scalar;

    fn v3_add(&mut self, a: &Self::V3, b: &Self::V3) -> Self::V3;
    fn v3_sub(&mut self, a: &Self::V3, b: &Self::V3) -> Self::V3;
    fn v3_scale(&mut self, a: &Self::V3, c: f64) -> Self::V3;
    fn v3_sqnorm(&mut self, a: &Self::V3) -> Self::Scalar;

    fn m3_add(&mut self, a: &Self::M3, b: &Self::M3) -> Self::M3;
    fn m3_sub(&mut self, a: &Self::M3, b: &Self::M3) -> Self::M3;
    fn m3_scale(&mut self, a: &Self::M3, c: f64) -> Self::M3;
    fn m3_mul(&mut self, a: &Self::M3, b: &Self::M3) -> Self::M3;
    fn m3_transpose(&mut self, a: &Self::M3) -> Self::M3;
    fn m3_vec(&mut self, a: &Self::M3, v: &Self::V3) -> Self::V3;
    /// `aᵀ·v`.
    fn m3_tvec(&mut self, a: &Self::M3, v: &Self::V3) -> Self::V3;
    /// `a·k` for a constant matrix `k`.
    fn m3_mul_const(&mut self, a: &Self::M3, k: &Mat3) -> Self::M3;
    /// `k·a` for a constant matrix `k`.
    fn const_mul_m3(&mut self, k: &Mat3, a: &Self::M3) -> Self::M3;
    /// `k·v` for a constant matrix `k`.
    fn const_mul_v3(&mut self, k: &Mat3, v: &Self::V3) -> Self::V3;
    fn m3_inverse(&mut self, a: &Self::M3) -> Self::M3;
    /// `tr(aᵀb)`, the elementwise inner product.
    fn m3_dot(&mut self, a: &Self::M3, b: &Self::M3) -> Self::Scalar;

    fn hat(&mut self, v: &Self::V3) -> Self::M3;
    /// Vee of the antisymmetric part.
    fn vee(&mut self, m: &Self::M3) -> Self::V3;
    fn exp_so3(&mut self, v: &Self::V3) -> Self::M3;

    fn vec_from_v3(&mut self, v: &Self::V3) -> Self::Vector;
    fn vec_from_m3(&mut self, m: &Self::M3) -> Self::Vector;
    fn vec_concat(&mut self, parts: &[Self::Vector]) -> Self::Vector;
    fn vec_v3(&mut self, v: &Self::Vector, start: usize) -> Self::V3;
    fn vec_m3(&mut self, v: &Self::Vector, start: usize) -> Self::M3;
    fn vec_slice(&mut self, v: &Self::Vector, start: usize, len: usize) -> Self::Vector;
    fn vec_add(&mut self, a: &Self::Vector, b: &Self::Vector) -> Self::Vector;
    fn vec_mul(&mut self, a: &Self::Vector, b: &Self::Vector) -> Self::Vector;
    /// `W·x + b` with `W` stored row-major as `out × inp`.
    fn vec_affine(
        &mut self,
        w: &Self::Vector,
        b: &Self::Vector,
        x: &Self::Vector,
        out: usize,
        inp: usize,
    ) -> Self::Vector;
    /// `Wᵀ·g` with `W` stored row-major as `out × inp`.
    fn vec_mat_tvec(&mut self, w: &Self::Vector, g: &Self::Vector, out: usize, inp: usize)
        -> Self::Vector;
    fn vec_tanh(&mut self, a: &Self::Vector) -> Self::Vector;
    fn vec_relu(&mut self, a: &Self::Vector) -> Self::Vector;
    /// `1 − a²` elementwise (the tanh derivative expressed through its output).
    fn vec_one_minus_sq(&mut self, a: &Self::Vector) -> Self::Vector;
    /// Heaviside mask of `a`; carries no gradient.
    fn vec_step_mask(&mut self, a: &Self::Vector) -> Self::Vector;

    /// Account for work done outside the recorded primitives (e.g. a solver
    /// Jacobian). Only the FLOP counter cares.
    fn note_flops(&mut self, _flops: u64) {}
}

/// Direct `f64` evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Plain;

fn affine_plain(w: &[f64], b: &[f64], x: &[f64], out: usize, inp: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), out * inp);
    debug_assert_eq!(x.len(), inp);
    (0..out)
        .map(|r| {
            let row = &w[r * inp..(r + 1) * inp];
            b[r] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect()
}

fn mat_tvec_plain(w: &[f64], g: &[f64], out: usize, inp: usize) -> Vec<f64> {
    let mut res = vec![0.0; inp];
    for r in 0..out {
        let gr = g[r];
        let row = &w[r * inp..(r + 1) * inp];
        res.iter_mut().zip(row).for_each(|(o, a)| *o += a * gr);
    }
    res
}

pub(crate) fn acos_sq_value(c: f64) -> f64 {
    let t = c.clamp(-1.0, 1.0).acos();
    t * t
}

/// d/dc acos(c)² = −2θ/sin θ, with the series `θ/sin θ ≈ 1 + θ²/6` near `c = 1`.
fn acos_sq_derivative(c: f64) -> f64 {
    let c = c.clamp(-1.0, 1.0);
    let theta = c.acos();
    if 1.0 - c <= 1e-7 {
        -2.0 * (1.0 + theta * theta / 6.0)
    } else {
        -2.0 * theta / theta.sin().max(1e-7)
    }
}

impl Algebra for Plain {
    type Scalar = f64;
    type V3 = Vec3;
    type M3 = Mat3;
    type Vector = Vec<f64>;

    fn s_const(&mut self, c: f64) -> f64 {
        c
    }
    fn v3_const(&mut self, v: Vec3) -> Vec3 {
        v
    }
    fn m3_const(&mut self, m: Mat3) -> Mat3 {
        m
    }
    fn vec_const(&mut self, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }
    fn s_val(&self, s: &f64) -> f64 {
        *s
    }
    fn v3_val(&self, v: &Vec3) -> Vec3 {
        *v
    }
    fn m3_val(&self, m: &Mat3) -> Mat3 {
        *m
    }
    fn vec_val(&self, v: &Vec<f64>) -> Vec<f64> {
        v.clone()
    }
    fn s_add(&mut self, a: &f64, b: &f64) -> f64 {
        a + b
    }
    fn s_scale(&mut self, a: &f64, c: f64) -> f64 {
        a * c
    }
    fn s_acos_sq(&mut self, c: &f64) -> f64 {
        acos_sq_value(*c)
    }
    fn v3_add(&mut self, a: &Vec3, b: &Vec3) -> Vec3 {
        *a + *b
    }
    fn v3_sub(&mut self, a: &Vec3, b: &Vec3) -> Vec3 {
        *a - *b
    }
    fn v3_scale(&mut self, a: &Vec3, c: f64) -> Vec3 {
        a.scale(c)
    }
    fn v3_sqnorm(&mut self, a: &Vec3) -> f64 {
        a.norm_squared()
    }
    fn m3_add(&mut self, a: &Mat3, b: &Mat3) -> Mat3 {
        *a + *b
    }
    fn m3_sub(&mut self, a: &Mat3, b: &Mat3) -> Mat3 {
        *a - *b
    }
    fn m3_scale(&mut self, a: &Mat3, c: f64) -> Mat3 {
        a.scale(c)
    }
    fn m3_mul(&mut self, a: &Mat3, b: &Mat3) -> Mat3 {
        *a * *b
    }
    fn m3_transpose(&mut self, a: &Mat3) -> Mat3 {
        a.transpose()
    }
    fn m3_vec(&mut self, a: &Mat3, v: &Vec3) -> Vec3 {
        a.mul_vec(*v)
    }
    fn m3_tvec(&mut self, a: &Mat3, v: &Vec3) -> Vec3 {
        a.tr_mul_vec(*v)
    }
    fn m3_mul_const(&mut self, a: &Mat3, k: &Mat3) -> Mat3 {
        *a * *k
    }
    fn const_mul_m3(&mut self, k: &Mat3, a: &Mat3) -> Mat3 {
        *k * *a
    }
    fn const_mul_v3(&mut self, k: &Mat3, v: &Vec3) -> Vec3 {
        k.mul_vec(*v)
    }
    fn m3_inverse(&mut self, a: &Mat3) -> Mat3 {
        a.inverse().unwrap_or(Mat3([f64::NAN; 9]))
    }
    fn m3_dot(&mut self, a: &Mat3, b: &Mat3) -> f64 {
        a.0.iter().zip(b.0.iter()).map(|(x, y)| x * y).sum()
    }
    fn hat(&mut self, v: &Vec3) -> Mat3 {
        hat(*v)
    }
    fn vee(&mut self, m: &Mat3) -> Vec3 {
        vee_unchecked(m)
    }
    fn exp_so3(&mut self, v: &Vec3) -> Mat3 {
        liegroup::exp_so3(*v)
    }
    fn vec_from_v3(&mut self, v: &Vec3) -> Vec<f64> {
        v.to_array().to_vec()
    }
    fn vec_from_m3(&mut self, m: &Mat3) -> Vec<f64> {
        m.0.to_vec()
    }
    fn vec_concat(&mut self, parts: &[Vec<f64>]) -> Vec<f64> {
        parts.concat()
    }
    fn vec_v3(&mut self, v: &Vec<f64>, start: usize) -> Vec3 {
        Vec3::from_slice(&v[start..start + 3])
    }
    fn vec_m3(&mut self, v: &Vec<f64>, start: usize) -> Mat3 {
        Mat3::from_slice(&v[start..start + 9])
    }
    fn vec_slice(&mut self, v: &Vec<f64>, start: usize, len: usize) -> Vec<f64> {
        v[start..start + len].to_vec()
    }
    fn vec_add(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }
    fn vec_mul(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x * y).collect()
    }
    fn vec_affine(
        &mut self,
        w: &Vec<f64>,
        b: &Vec<f64>,
        x: &Vec<f64>,
        out: usize,
        inp: usize,
    ) -> Vec<f64> {
        affine_plain(w, b, x, out, inp)
    }
    fn vec_mat_tvec(&mut self, w: &Vec<f64>, g: &Vec<f64>, out: usize, inp: usize) -> Vec<f64> {
        mat_tvec_plain(w, g, out, inp)
    }
    fn vec_tanh(&mut self, a: &Vec<f64>) -> Vec<f64> {
        a.iter().map(|x| x.tanh()).collect()
    }
    fn vec_relu(&mut self, a: &Vec<f64>) -> Vec<f64> {
        a.iter().map(|x| x.max(0.0)).collect()
    }
    fn vec_one_minus_sq(&mut self, a: &Vec<f64>) -> Vec<f64> {
        a.iter().map(|x| 1.0 - x * x).collect()
    }
    fn vec_step_mask(&mut self, a: &Vec<f64>) -> Vec<f64> {
        a.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Affine { w: Var, b: Var, x: Var, out: usize, inp: usize },
    MatTVec { w: Var, g: Var, out: usize, inp: usize },
    Tanh(Var),
    Relu(Var),
    OneMinusSq(Var),
    Slice(Var, usize),
    Concat(Box<[Var]>),
    MatMul3(Var, Var),
    Transpose3(Var),
    MatVec3(Var, Var),
    MatTVec3(Var, Var),
    MulConstR(Var, Box<Mat3>),
    MulConstL(Box<Mat3>, Var),
    ConstMulV3(Box<Mat3>, Var),
    Inverse3(Var),
    Dot(Var, Var),
    AcosSq(Var),
    Hat(Var),
    Vee(Var),
    ExpSo3(Var),
}

#[derive(Debug, Clone)]
struct Node {
    off: usize,
    len: usize,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is a topological
/// order by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    data: Vec<f64>,
    consumed: bool,
}

/// Adjoints of every node after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<f64>,
    spans: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> &[f64] {
        let (off, len) = self.spans[v.index()];
        &self.grads[off..off + len]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize, values: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(nodes),
            data: Vec::with_capacity(values),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.index()];
        &self.data[n.off..n.off + n.len]
    }

    fn push(&mut self, value: &[f64], op: Op, needs_grad: bool) -> Var {
        let off = self.data.len();
        self.data.extend_from_slice(value);
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node {
            off,
            len: value.len(),
            op,
            needs_grad,
        });
        id
    }

    fn push_with(&mut self, len: usize, op: Op, needs_grad: bool, f: impl FnOnce(&[f64], &mut [f64])) -> Var {
        let off = self.data.len();
        self.data.resize(off + len, 0.0);
        let (head, tail) = self.data.split_at_mut(off);
        f(head, tail);
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node {
            off,
            len,
            op,
            needs_grad,
        });
        id
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.index()].needs_grad
    }

    fn span(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.index()];
        (n.off, n.len)
    }

    /// A differentiable leaf (parameter or input whose gradient is wanted).
    pub fn leaf(&mut self, value: &[f64]) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: &[f64]) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn m3(&self, v: Var) -> Mat3 {
        Mat3::from_slice(self.value(v))
    }

    fn v3(&self, v: Var) -> Vec3 {
        Vec3::from_slice(self.value(v))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ao, al) = self.span(a);
        let (bo, bl) = self.span(b);
        assert_eq!(al, bl, "elementwise operands differ in length");
        let ng = self.ng(a) || self.ng(b);
        self.push_with(al, op, ng, |d, out| {
            for i in 0..al {
                out[i] = f(d[ao + i], d[bo + i]);
            }
        })
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (ao, al) = self.span(a);
        let ng = self.ng(a);
        self.push_with(al, op, ng, |d, out| {
            for i in 0..al {
                out[i] = f(d[ao + i]);
            }
        })
    }

    fn mat3_result(&mut self, m: Mat3, op: Op, ng: bool) -> Var {
        self.push(&m.0, op, ng)
    }

    fn vec3_result(&mut self, v: Vec3, op: Op, ng: bool) -> Var {
        self.push(&v.to_array(), op, ng)
    }

    /// Reverse sweep from `out` seeded with `seed`. A tape supports exactly
    /// one backward pass.
    pub fn backward(&mut self, out: Var, seed: &[f64]) -> Result<Gradients, TapeError> {
        if self.consumed {
            return Err(TapeError::TapeConsumed);
        }
        let (oo, ol) = self.span(out);
        if seed.len() != ol {
            return Err(TapeError::SeedLength {
                expected: ol,
                got: seed.len(),
            });
        }
        self.consumed = true;
        let mut g = vec![0.0; self.data.len()];
        g[oo..oo + ol].copy_from_slice(seed);
        let mut buf: Vec<f64> = Vec::new();
        for idx in (0..=out.index()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            buf.clear();
            buf.extend_from_slice(&g[node.off..node.off + node.len]);
            if buf.iter().all(|&x| x == 0.0) {
                continue;
            }
            self.backprop_node(idx, &buf, &mut g);
        }
        Ok(Gradients {
            grads: g,
            spans: self.nodes.iter().map(|n| (n.off, n.len)).collect(),
        })
    }

    fn backprop_node(&self, idx: usize, gy: &[f64], g: &mut [f64]) {
        let node = &self.nodes[idx];
        let d = &self.data;
        let y = &d[node.off..node.off + node.len];
        let val = |v: &Var| self.value(*v);
        let mut acc = |v: &Var, f: &mut dyn FnMut(usize) -> f64| {
            let n = &self.nodes[v.index()];
            if n.needs_grad {
                for i in 0..n.len {
                    g[n.off + i] += f(i);
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, &mut |i| gy[i]);
                acc(b, &mut |i| gy[i]);
            }
            Op::Sub(a, b) => {
                acc(a, &mut |i| gy[i]);
                acc(b, &mut |i| -gy[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |i| gy[i] * bv[i]);
                acc(b, &mut |i| gy[i] * av[i]);
            }
            Op::Scale(a, c) => acc(a, &mut |i| gy[i] * c),
            Op::Affine { w, b, x, out, inp } => {
                let (wv, xv) = (val(w), val(x));
                let inp = *inp;
                acc(b, &mut |i| gy[i]);
                acc(w, &mut |k| gy[k / inp] * xv[k % inp]);
                if self.ng(*x) {
                    let gx = mat_tvec_plain(wv, gy, *out, inp);
                    acc(x, &mut |i| gx[i]);
                }
            }
            Op::MatTVec { w, g: gv, out, inp } => {
                // y = Wᵀ g  ⇒  dW[r][c] = g[r]·ȳ[c],  dg = W·ȳ
                let (wv, gvv) = (val(w), val(gv));
                let inp = *inp;
                acc(w, &mut |k| gvv[k / inp] * gy[k % inp]);
                if self.ng(*gv) {
                    let zero = vec![0.0; *out];
                    let dg = affine_plain(wv, &zero, gy, *out, inp);
                    acc(gv, &mut |i| dg[i]);
                }
            }
            Op::Tanh(a) => acc(a, &mut |i| gy[i] * (1.0 - y[i] * y[i])),
            Op::Relu(a) => {
                let av = val(a);
                acc(a, &mut |i| if av[i] > 0.0 { gy[i] } else { 0.0 })
            }
            Op::OneMinusSq(a) => {
                let av = val(a);
                acc(a, &mut |i| -2.0 * av[i] * gy[i])
            }
            Op::Slice(a, start) => {
                let n = &self.nodes[a.index()];
                if n.needs_grad {
                    for (i, gi) in gy.iter().enumerate() {
                        g[n.off + start + i] += gi;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut pos = 0;
                for p in parts.iter() {
                    let n = &self.nodes[p.index()];
                    if n.needs_grad {
                        for i in 0..n.len {
                            g[n.off + i] += gy[pos + i];
                        }
                    }
                    pos += n.len;
                }
            }
            Op::MatMul3(a, b) => {
                let gm = Mat3::from_slice(gy);
                let (am, bm) = (self.m3(*a), self.m3(*b));
                let ga = gm * bm.transpose();
                let gb = am.transpose() * gm;
                acc(a, &mut |i| ga.0[i]);
                acc(b, &mut |i| gb.0[i]);
            }
            Op::Transpose3(a) => {
                let gt = Mat3::from_slice(gy).transpose();
                acc(a, &mut |i| gt.0[i]);
            }
            Op::MatVec3(a, v) => {
                let (am, vv) = (self.m3(*a), self.v3(*v));
                let gv = Vec3::from_slice(gy);
                acc(a, &mut |k| gv[k / 3] * vv[k % 3]);
                let gvin = am.tr_mul_vec(gv);
                acc(v, &mut |i| gvin[i]);
            }
            Op::MatTVec3(a, v) => {
                // y = aᵀv ⇒ da[r][c] = v[r]·ȳ[c], dv = a·ȳ
                let (am, vv) = (self.m3(*a), self.v3(*v));
                let gv = Vec3::from_slice(gy);
                acc(a, &mut |k| vv[k / 3] * gv[k % 3]);
                let gvin = am.mul_vec(gv);
                acc(v, &mut |i| gvin[i]);
            }
            Op::MulConstR(a, k) => {
                let ga = Mat3::from_slice(gy) * k.transpose();
                acc(a, &mut |i| ga.0[i]);
            }
            Op::MulConstL(k, a) => {
                let ga = k.transpose() * Mat3::from_slice(gy);
                acc(a, &mut |i| ga.0[i]);
            }
            Op::ConstMulV3(k, v) => {
                let gv = k.tr_mul_vec(Vec3::from_slice(gy));
                acc(v, &mut |i| gv[i]);
            }
            Op::Inverse3(a) => {
                // dA = −A⁻ᵀ·Ȳ·A⁻ᵀ
                let yinv_t = Mat3::from_slice(y).transpose();
                let ga = -(yinv_t * Mat3::from_slice(gy) * yinv_t);
                acc(a, &mut |i| ga.0[i]);
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(a), val(b));
                let s = gy[0];
                acc(a, &mut |i| s * bv[i]);
                acc(b, &mut |i| s * av[i]);
            }
            Op::AcosSq(c) => {
                let dc = acos_sq_derivative(val(c)[0]);
                acc(c, &mut |_| gy[0] * dc);
            }
            Op::Hat(v) => {
                let gv = vee_unchecked(&Mat3::from_slice(gy)).scale(2.0);
                acc(v, &mut |i| gv[i]);
            }
            Op::Vee(m) => {
                // y = ½(m21 − m12, m02 − m20, m10 − m01)
                let gv = Vec3::from_slice(gy);
                let gm = hat(gv).scale(0.5);
                acc(m, &mut |i| gm.0[i]);
            }
            Op::ExpSo3(v) => {
                // dL/dφ = Jr(φ)ᵀ · vee-part of Rᵀ·Ḡ, with <A, hat(u)> = u·2·vee_asym(A)
                let phi = self.v3(*v);
                let r = Mat3::from_slice(y);
                let a = r.transpose() * Mat3::from_slice(gy);
                let w = vee_unchecked(&a).scale(2.0);
                let gphi = right_jacobian(phi).tr_mul_vec(w);
                acc(v, &mut |i| gphi[i]);
            }
        }
    }
}

impl Algebra for Tape {
    type Scalar = Var;
    type V3 = Var;
    type M3 = Var;
    type Vector = Var;

    fn s_const(&mut self, c: f64) -> Var {
        self.constant(&[c])
    }
    fn v3_const(&mut self, v: Vec3) -> Var {
        self.constant(&v.to_array())
    }
    fn m3_const(&mut self, m: Mat3) -> Var {
        self.constant(&m.0)
    }
    fn vec_const(&mut self, v: &[f64]) -> Var {
        self.constant(v)
    }
    fn s_val(&self, s: &Var) -> f64 {
        self.value(*s)[0]
    }
    fn v3_val(&self, v: &Var) -> Vec3 {
        self.v3(*v)
    }
    fn m3_val(&self, m: &Var) -> Mat3 {
        self.m3(*m)
    }
    fn vec_val(&self, v: &Var) -> Vec<f64> {
        self.value(*v).to_vec()
    }
    fn s_add(&mut self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Op::Add(*a, *b), |x, y| x + y)
    }
    fn s_scale(&mut self, a: &Var, c: f64) -> Var {
        self.unary(*a, Op::Scale(*a, c), |x| x * c)
    }
    fn s_acos_sq(&mut self, c: &Var) -> Var {
        self.unary(*c, Op::AcosSq(*c), acos_sq_value)
    }
    fn v3_add(&mut self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Op::Add(*a, *b), |x, y| x + y)
    }
    fn v3_sub(&mut self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Op::Sub(*a, *b), |x, y| x - y)
    }
    fn v3_scale(&mut self, a: &Var, c: f64) -> Var {
        self.unary(*a, Op::Scale(*a, c), |x| x * c)
    }
    fn v3_sqnorm(&mut self, a: &Var) -> Var {
        self.dot(*a, *a)
    }
    fn m3_add(&mut self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Op::Add(*a, *b), |x, y| x + y)
    }
    fn m3_sub(&mut self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Op::Sub(*a, *b), |x, y| x - y)
    }
    fn m3_scale(&mut self, a: &Var, c: f64) -> Var {
        self.unary(*a, Op::Scale(*a, c), |x| x * c)
    }
    fn m3_mul(&mut self, a: &Var, b: &Var) -> Var {
        let m = self.m3(*a) * self.m3(*b);
        let ng = self.ng(*a) || self.ng(*b);
        self.mat3_result(m, Op::MatMul3(*a, *b), ng)
    }
    fn m3_transpose(&mut self, a: &Var) -> Var {
        let m = self.m3(*a).transpose();
        let ng = self.ng(*a);
        self.mat3_result(m, Op::Transpose3(*a), ng)
    }
    fn m3_vec(&mut self, a: &Var, v: &Var) -> Var {
        let r = self.m3(*a).mul_vec(self.v3(*v));
        let ng = self.ng(*a) || self.ng(*v);
        self.vec3_result(r, Op::MatVec3(*a, *v), ng)
    }
    fn m3_tvec(&mut self, a: &Var, v: &Var) -> Var {
        let r = self.m3(*a).tr_mul_vec(self.v3(*v));
        let ng = self.ng(*a) || self.ng(*v);
        self.vec3_result(r, Op::MatTVec3(*a, *v), ng)
    }
    fn m3_mul_const(&mut self, a: &Var, k: &Mat3) -> Var {
        let m = self.m3(*a) * *k;
        let ng = self.ng(*a);
        self.mat3_result(m, Op::MulConstR(*a, Box::new(*k)), ng)
    }
    fn const_mul_m3(&mut self, k: &Mat3, a: &Var) -> Var {
        let m = *k * self.m3(*a);
        let ng = self.ng(*a);
        self.mat3_result(m, Op::MulConstL(Box::new(*k), *a), ng)
    }
    fn const_mul_v3(&mut self, k: &Mat3, v: &Var) -> Var {
        let r = k.mul_vec(self.v3(*v));
        let ng = self.ng(*v);
        self.vec3_result(r, Op::ConstMulV3(Box::new(*k), *v), ng)
    }
    fn m3_inverse(&mut self, a: &Var) -> Var {
        let m = self.m3(*a).inverse().unwrap_or(Mat3([f64::NAN; 9]));
        let ng = self.ng(*a);
        self.mat3_result(m, Op::Inverse3(*a), ng)
    }
    fn m3_dot(&mut self, a: &Var, b: &Var) -> Var {
        self.dot(*a, *b)
    }
    fn hat(&mut self, v: &Var) -> Var {
        let m = hat(self.v3(*v));
        let ng = self.ng(*v);
        self.mat3_result(m, Op::Hat(*v), ng)
    }
    fn vee(&mut self, m: &Var) -> Var {
        let r = vee_unchecked(&self.m3(*m));
        let ng = self.ng(*m);
        self.vec3_result(r, Op::Vee(*m), ng)
    }
    fn exp_so3(&mut self, v: &Var) -> Var {
        let m = liegroup::exp_so3(self.v3(*v));
        let ng = self.ng(*v);
        self.mat3_result(m, Op::ExpSo3(*v), ng)
    }
    fn vec_from_v3(&mut self, v: &Var) -> Var {
        *v
    }
    fn vec_from_m3(&mut self, m: &Var) -> Var {
        *m
    }
    fn vec_concat(&mut self, parts: &[Var]) -> Var {
        let total: usize = parts.iter().map(|p| self.nodes[p.index()].len).sum();
        let ng = parts.iter().any(|p| self.ng(*p));
        let spans: Vec<(usize, usize)> = parts.iter().map(|p| self.span(*p)).collect();
        self.push_with(total, Op::Concat(parts.into()), ng, |d, out| {
            let mut pos = 0;
            for (o, l) in spans {
                out[pos..pos + l].copy_from_slice(&d[o..o + l]);
                pos += l;
            }
        })
    }
    fn vec_v3(&mut self, v: &Var, start: usize) -> Var {
        self.vec_slice(v, start, 3)
    }
    fn vec_m3(&mut self, v: &Var, start: usize) -> Var {
        self.vec_slice(v, start, 9)
    }
    fn vec_slice(&mut self, v: &Var, start: usize, len: usize) -> Var {
        let (o, l) = self.span(*v);
        assert!(start + len <= l, "slice out of range");
        let ng = self.ng(*v);
        self.push_with(len, Op::Slice(*v, start), ng, |d, out| {
            out.copy_from_slice(&d[o + start..o + start + len])
        })
    }
    fn vec_add(&mut self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Op::Add(*a, *b), |x, y| x + y)
    }
    fn vec_mul(&mut self, a: &Var, b: &Var) -> Var {
        self.binary(*a, *b, Op::Mul(*a, *b), |x, y| x * y)
    }
    fn vec_affine(&mut self, w: &Var, b: &Var, x: &Var, out: usize, inp: usize) -> Var {
        let (wo, wl) = self.span(*w);
        let (bo, _) = self.span(*b);
        let (xo, xl) = self.span(*x);
        assert_eq!(wl, out * inp, "weight shape");
        assert_eq!(xl, inp, "input length");
        let ng = self.ng(*w) || self.ng(*b) || self.ng(*x);
        let op = Op::Affine { w: *w, b: *b, x: *x, out, inp };
        self.push_with(out, op, ng, |d, res| {
            let xs = &d[xo..xo + inp];
            for r in 0..out {
                let row = &d[wo + r * inp..wo + (r + 1) * inp];
                res[r] = d[bo + r] + row.iter().zip(xs).map(|(a, c)| a * c).sum::<f64>();
            }
        })
    }
    fn vec_mat_tvec(&mut self, w: &Var, g: &Var, out: usize, inp: usize) -> Var {
        let r = mat_tvec_plain(self.value(*w), self.value(*g), out, inp);
        let ng = self.ng(*w) || self.ng(*g);
        self.push(&r, Op::MatTVec { w: *w, g: *g, out, inp }, ng)
    }
    fn vec_tanh(&mut self, a: &Var) -> Var {
        self.unary(*a, Op::Tanh(*a), f64::tanh)
    }
    fn vec_relu(&mut self, a: &Var) -> Var {
        self.unary(*a, Op::Relu(*a), |x| x.max(0.0))
    }
    fn vec_one_minus_sq(&mut self, a: &Var) -> Var {
        self.unary(*a, Op::OneMinusSq(*a), |x| 1.0 - x * x)
    }
    fn vec_step_mask(&mut self, a: &Var) -> Var {
        let v: Vec<f64> = self
            .value(*a)
            .iter()
            .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
            .collect();
        self.constant(&v)
    }
}

impl Tape {
    fn dot(&mut self, a: Var, b: Var) -> Var {
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        let ng = self.ng(a) || self.ng(b);
        self.push(&[s], Op::Dot(a, b), ng)
    }
}

/// Plain evaluation that tallies forward FLOPs per primitive.
#[derive(Debug, Default, Clone, Copy)]
pub struct FlopCounter {
    pub flops: u64,
}

impl FlopCounter {
    fn add(&mut self, n: u64) {
        self.flops += n;
    }
}

macro_rules! counted {
    ($self:ident, $n:expr, $e:expr) => {{
        $self.add($n);
        $e
    }};
}

impl Algebra for FlopCounter {
    type Scalar = f64;
    type V3 = Vec3;
    type M3 = Mat3;
    type Vector = Vec<f64>;

    fn s_const(&mut self, c: f64) -> f64 {
        c
    }
    fn v3_const(&mut self, v: Vec3) -> Vec3 {
        v
    }
    fn m3_const(&mut self, m: Mat3) -> Mat3 {
        m
    }
    fn vec_const(&mut self, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }
    fn s_val(&self, s: &f64) -> f64 {
        *s
    }
    fn v3_val(&self, v: &Vec3) -> Vec3 {
        *v
    }
    fn m3_val(&self, m: &Mat3) -> Mat3 {
        *m
    }
    fn vec_val(&self, v: &Vec<f64>) -> Vec<f64> {
        v.clone()
    }
    fn s_add(&mut self, a: &f64, b: &f64) -> f64 {
        counted!(self, 1, a + b)
    }
    fn s_scale(&mut self, a: &f64, c: f64) -> f64 {
        counted!(self, 1, a * c)
    }
    fn s_acos_sq(&mut self, c: &f64) -> f64 {
        counted!(self, 2, acos_sq_value(*c))
    }
    fn v3_add(&mut self, a: &Vec3, b: &Vec3) -> Vec3 {
        counted!(self, 3, *a + *b)
    }
    fn v3_sub(&mut self, a: &Vec3, b: &Vec3) -> Vec3 {
        counted!(self, 3, *a - *b)
    }
    fn v3_scale(&mut self, a: &Vec3, c: f64) -> Vec3 {
        counted!(self, 3, a.scale(c))
    }
    fn v3_sqnorm(&mut self, a: &Vec3) -> f64 {
        counted!(self, 6, a.norm_squared())
    }
    fn m3_add(&mut self, a: &Mat3, b: &Mat3) -> Mat3 {
        counted!(self, 9, *a + *b)
    }
    fn m3_sub(&mut self, a: &Mat3, b: &Mat3) -> Mat3 {
        counted!(self, 9, *a - *b)
    }
    fn m3_scale(&mut self, a: &Mat3, c: f64) -> Mat3 {
        counted!(self, 9, a.scale(c))
    }
    fn m3_mul(&mut self, a: &Mat3, b: &Mat3) -> Mat3 {
        counted!(self, 45, *a * *b)
    }
    fn m3_transpose(&mut self, a: &Mat3) -> Mat3 {
        a.transpose()
    }
    fn m3_vec(&mut self, a: &Mat3, v: &Vec3) -> Vec3 {
        counted!(self, 15, a.mul_vec(*v))
    }
    fn m3_tvec(&mut self, a: &Mat3, v: &Vec3) -> Vec3 {
        counted!(self, 15, a.tr_mul_vec(*v))
    }
    fn m3_mul_const(&mut self, a: &Mat3, k: &Mat3) -> Mat3 {
        counted!(self, 45, *a * *k)
    }
    fn const_mul_m3(&mut self, k: &Mat3, a: &Mat3) -> Mat3 {
        counted!(self, 45, *k * *a)
    }
    fn const_mul_v3(&mut self, k: &Mat3, v: &Vec3) -> Vec3 {
        counted!(self, 15, k.mul_vec(*v))
    }
    fn m3_inverse(&mut self, a: &Mat3) -> Mat3 {
        counted!(self, 40, Plain.m3_inverse(a))
    }
    fn m3_dot(&mut self, a: &Mat3, b: &Mat3) -> f64 {
        counted!(self, 18, Plain.m3_dot(a, b))
    }
    fn hat(&mut self, v: &Vec3) -> Mat3 {
        hat(*v)
    }
    fn vee(&mut self, m: &Mat3) -> Vec3 {
        counted!(self, 6, vee_unchecked(m))
    }
    fn exp_so3(&mut self, v: &Vec3) -> Mat3 {
        counted!(self, 70, liegroup::exp_so3(*v))
    }
    fn vec_from_v3(&mut self, v: &Vec3) -> Vec<f64> {
        Plain.vec_from_v3(v)
    }
    fn vec_from_m3(&mut self, m: &Mat3) -> Vec<f64> {
        Plain.vec_from_m3(m)
    }
    fn vec_concat(&mut self, parts: &[Vec<f64>]) -> Vec<f64> {
        parts.concat()
    }
    fn vec_v3(&mut self, v: &Vec<f64>, start: usize) -> Vec3 {
        Plain.vec_v3(v, start)
    }
    fn vec_m3(&mut self, v: &Vec<f64>, start: usize) -> Mat3 {
        Plain.vec_m3(v, start)
    }
    fn vec_slice(&mut self, v: &Vec<f64>, start: usize, len: usize) -> Vec<f64> {
        v[start..start + len].to_vec()
    }
    fn vec_add(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        counted!(self, a.len() as u64, Plain.vec_add(a, b))
    }
    fn vec_mul(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        counted!(self, a.len() as u64, Plain.vec_mul(a, b))
    }
    fn vec_affine(&mut self, w: &Vec<f64>, b: &Vec<f64>, x: &Vec<f64>, out: usize, inp: usize) -> Vec<f64> {
        counted!(self, (2 * out * inp) as u64, affine_plain(w, b, x, out, inp))
    }
    fn vec_mat_tvec(&mut self, w: &Vec<f64>, g: &Vec<f64>, out: usize, inp: usize) -> Vec<f64> {
        counted!(self, (2 * out * inp) as u64, mat_tvec_plain(w, g, out, inp))
    }
    fn vec_tanh(&mut self, a: &Vec<f64>) -> Vec<f64> {
        counted!(self, a.len() as u64, Plain.vec_tanh(a))
    }
    fn vec_relu(&mut self, a: &Vec<f64>) -> Vec<f64> {
        counted!(self, a.len() as u64, Plain.vec_relu(a))
    }
    fn vec_one_minus_sq(&mut self, a: &Vec<f64>) -> Vec<f64> {
        counted!(self, 2 * a.len() as u64, Plain.vec_one_minus_sq(a))
    }
    fn vec_step_mask(&mut self, a: &Vec<f64>) -> Vec<f64> {
        Plain.vec_step_mask(a)
    }
    fn note_flops(&mut self, flops: u64) {
        self.add(flops);
    }
}
