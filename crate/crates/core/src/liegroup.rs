//! Double-precision SO(3) primitives.
//!
//! Rotations are plain row-major 3×3 matrices. Positions integrate additively,
//! so only the rotation part of SE(3) needs exponential and logarithm maps.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this angle exp/log switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Frobenius tolerance for `‖RᵀR − I‖` and `|det R − 1|`.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("matrix is not skew-symmetric (‖M + Mᵀ‖_F = {0:e})")]
    NotSkew(f64),
    #[error("matrix is singular or has non-positive determinant (det = {0:e})")]
    Degenerate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn scale(self, c: f64) -> Vec3 {
        Vec3::new(c * self.x, c * self.y, c * self.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl IndexMut<usize> for Vec3 {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        match i {
            0 => &mut self.x,
            1 => &mut self.y,
            2 => &mut self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v.scale(self)
    }
}

/// Row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [f64; 9]);

impl Default for Mat3 {
    fn default() -> Self {
        Mat3::ZERO
    }
}

impl Mat3 {
    pub const ZERO: Mat3 = Mat3([0.0; 9]);
    pub const IDENTITY: Mat3 = Mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn from_rows(r: [[f64; 3]; 3]) -> Self {
        Mat3([
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        ])
    }

    pub fn from_slice(s: &[f64]) -> Self {
        let mut m = [0.0; 9];
        m.copy_from_slice(&s[..9]);
        Mat3(m)
    }

    pub fn diag(d: [f64; 3]) -> Self {
        Mat3([d[0], 0.0, 0.0, 0.0, d[1], 0.0, 0.0, 0.0, d[2]])
    }

    pub fn scalar(c: f64) -> Self {
        Mat3::diag([c, c, c])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[3 * r + c]
    }

    pub fn row(&self, r: usize) -> Vec3 {
        Vec3::new(self.0[3 * r], self.0[3 * r + 1], self.0[3 * r + 2])
    }

    pub fn col(&self, c: usize) -> Vec3 {
        Vec3::new(self.0[c], self.0[3 + c], self.0[6 + c])
    }

    pub fn from_cols(a: Vec3, b: Vec3, c: Vec3) -> Self {
        Mat3([a.x, b.x, c.x, a.y, b.y, c.y, a.z, b.z, c.z])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]])
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[4] + self.0[8]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    /// Inverse by cofactors; `None` when |det| is below `1e-300`.
    pub fn inverse(&self) -> Option<Mat3> {
        let m = &self.0;
        let det = self.det();
        if det.abs() < 1e-300 || !det.is_finite() {
            return None;
        }
        let inv = 1.0 / det;
        Some(Mat3([
            (m[4] * m[8] - m[5] * m[7]) * inv,
            (m[2] * m[7] - m[1] * m[8]) * inv,
            (m[1] * m[5] - m[2] * m[4]) * inv,
            (m[5] * m[6] - m[3] * m[8]) * inv,
            (m[0] * m[8] - m[2] * m[6]) * inv,
            (m[2] * m[3] - m[0] * m[5]) * inv,
            (m[3] * m[7] - m[4] * m[6]) * inv,
            (m[1] * m[6] - m[0] * m[7]) * inv,
            (m[0] * m[4] - m[1] * m[3]) * inv,
        ]))
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z,
        )
    }

    /// `selfᵀ · v` without forming the transpose.
    pub fn tr_mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0] * v.x + m[3] * v.y + m[6] * v.z,
            m[1] * v.x + m[4] * v.y + m[7] * v.z,
            m[2] * v.x + m[5] * v.y + m[8] * v.z,
        )
    }

    pub fn scale(&self, c: f64) -> Mat3 {
        let mut out = self.0;
        out.iter_mut().for_each(|e| *e *= c);
        Mat3(out)
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|e| e.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (*self - self.transpose()).frobenius() <= tol
    }

    /// `‖MᵀM − I‖_F`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.transpose() * *self - Mat3::IDENTITY).frobenius()
    }

    pub fn is_rotation(&self) -> bool {
        self.is_finite()
            && self.orthogonality_error() <= ROTATION_TOL
            && (self.det() - 1.0).abs() <= ROTATION_TOL
    }
}

impl Add for Mat3 {
    type Output = Mat3;
    fn add(self, o: Mat3) -> Mat3 {
        let mut out = self.0;
        out.iter_mut().zip(o.0).for_each(|(a, b)| *a += b);
        Mat3(out)
    }
}

impl Sub for Mat3 {
    type Output = Mat3;
    fn sub(self, o: Mat3) -> Mat3 {
        let mut out = self.0;
        out.iter_mut().zip(o.0).for_each(|(a, b)| *a -= b);
        Mat3(out)
    }
}

impl Neg for Mat3 {
    type Output = Mat3;
    fn neg(self) -> Mat3 {
        self.scale(-1.0)
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        let a = &self.0;
        let b = &o.0;
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] =
                    a[3 * r] * b[c] + a[3 * r + 1] * b[3 + c] + a[3 * r + 2] * b[6 + c];
            }
        }
        Mat3(out)
    }
}

impl Mul<Vec3> for Mat3 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        self.mul_vec(v)
    }
}

/// Skew-symmetric matrix with `hat(v)·w = v × w`.
pub fn hat(v: Vec3) -> Mat3 {
    Mat3([0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0])
}

/// Inverse of [`hat`]. Near-skew input is antisymmetrized first.
pub fn vee(m: &Mat3) -> Result<Vec3, LieError> {
    let sym = (*m + m.transpose()).frobenius();
    if !(sym <= 1e-8) {
        return Err(LieError::NotSkew(sym));
    }
    Ok(vee_unchecked(m))
}

/// Vee of the antisymmetric part, `vee((M − Mᵀ)/2)`, with no precondition.
#[inline]
pub fn vee_unchecked(m: &Mat3) -> Vec3 {
    let a = &m.0;
    Vec3::new(
        0.5 * (a[7] - a[5]),
        0.5 * (a[2] - a[6]),
        0.5 * (a[3] - a[1]),
    )
}

/// Rodrigues coefficients `(sin θ/θ, (1 − cos θ)/θ²)`.
fn rodrigues_coeffs(theta2: f64) -> (f64, f64) {
    let theta = theta2.sqrt();
    if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    }
}

pub fn exp_so3(phi: Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let (a, b) = rodrigues_coeffs(theta2);
    let k = hat(phi);
    Mat3::IDENTITY + k.scale(a) + (k * k).scale(b)
}

/// Right Jacobian of the exponential: `exp(φ + δ) ≈ exp(φ)·exp(Jr(φ)·δ)`.
pub fn right_jacobian(phi: Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let (b, c) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let k = hat(phi);
    Mat3::IDENTITY - k.scale(b) + (k * k).scale(c)
}

/// Principal logarithm, angle in `[0, π]`.
pub fn log_so3(r: &Mat3) -> Vec3 {
    let skew = vee_unchecked(r); // = sin θ · axis
    let theta = skew.norm().atan2((r.trace() - 1.0) * 0.5);
    if theta < SMALL_ANGLE.sqrt() {
        // θ/sin θ ≈ 1 + θ²/6
        return skew.scale(1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        return log_near_pi(r, theta);
    }
    skew.scale(theta / theta.sin())
}

/// Near θ = π the skew part vanishes; recover the axis from `R + I ≈ 2aaᵀ`.
fn log_near_pi(r: &Mat3, theta: f64) -> Vec3 {
    let diag = [r.get(0, 0), r.get(1, 1), r.get(2, 2)];
    let k = (0..3)
        .max_by(|&i, &j| diag[i].total_cmp(&diag[j]))
        .unwrap_or(0);
    let mut axis = Vec3::ZERO;
    let akk = ((diag[k] + 1.0) * 0.5).max(0.0).sqrt();
    axis[k] = akk;
    for i in 0..3 {
        if i != k {
            axis[i] = (r.get(i, k) + r.get(k, i)) / (4.0 * akk);
        }
    }
    let axis = axis.scale(1.0 / axis.norm());
    // resolve the sign with the residual skew part
    let skew = vee_unchecked(r);
    let sign = if skew.dot(axis) < 0.0 { -1.0 } else { 1.0 };
    axis.scale(sign * theta)
}

/// Minimal rotation angle between two orientations, in `[0, π]`.
pub fn geodesic_angle(ra: &Mat3, rb: &Mat3) -> f64 {
    // atan2 of the skew and trace parts stays accurate near 0 and π.
    let m = ra.transpose() * *rb;
    let sin = 0.5 * Vec3::new(m.get(2, 1) - m.get(1, 2), m.get(0, 2) - m.get(2, 0), m.get(1, 0) - m.get(0, 1)).norm();
    let cos = 0.5 * (m.trace() - 1.0);
    sin.atan2(cos)
}

/// Nearest rotation in Frobenius norm via the polar iteration `M ← ½(M + M⁻ᵀ)`.
pub fn project_to_rotation(m: &Mat3) -> Result<Mat3, LieError> {
    let det = m.det();
    if !(det > 1e-12) {
        return Err(LieError::Degenerate(det));
    }
    let mut cur = *m;
    for _ in 0..100 {
        let inv_t = cur
            .inverse()
            .ok_or(LieError::Degenerate(cur.det()))?
            .transpose();
        let next = (cur + inv_t).scale(0.5);
        let delta = (next - cur).frobenius();
        cur = next;
        if delta <= 1e-12 {
            break;
        }
    }
    Ok(cur)
}

pub fn rot_x(a: f64) -> Mat3 {
    exp_so3(Vec3::new(a, 0.0, 0.0))
}

pub fn rot_y(a: f64) -> Mat3 {
    exp_so3(Vec3::new(0.0, a, 0.0))
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3([c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0])
}
