//! Forced discrete Euler-Lagrange step on SE(3).
//!
//! One step advances `(x, R, v, ω)` by `h`:
//!
//! ```text
//! x'  = x + h·v − (1−α)·h²/m·∂U/∂x + h/m·R·f⁻ₓ
//! S(h·J·ω + h·f⁻_R + (1−α)·h²·ξ) = Z·J_d − J_d·Zᵀ        (solved for Z)
//! R'  = R·Z
//! m·v' = m·v − (1−α)·h·∂U/∂x − α·h·∂U'/∂x' + R·f⁻ₓ + R'·f⁺ₓ
//! J·ω' = Zᵀ·J·ω + (1−α)·h·Zᵀ·ξ + α·h·ξ' + Zᵀ·f⁻_R + f⁺_R
//! ```
//!
//! with `J_d = ½·tr(J)·I − J` and `S(ξ) = ∂Uᵀ/∂R·R − Rᵀ·∂U/∂R`. The potential
//! gradient at `t+1` is evaluated at the new pose before the velocity update.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Algebra, Plain};
use crate::liegroup::{hat, right_jacobian, vee_unchecked, Mat3, Vec3};
use crate::models::{Action, Observation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegratorError {
    #[error("Newton solve for the rotation increment did not converge (residual {residual:e} after {iterations} iterations)")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
    #[error("rollout failed at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<IntegratorError>,
    },
    #[error("need {needed} actions, got {got}")]
    TooFewActions { needed: usize, got: usize },
    #[error("non-finite state after step")]
    NonFinite,
}

/// Vehicle state `(x, R, v, ω)`: world-frame position and velocity, body→world
/// rotation, body-frame angular velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateOf<V, M> {
    pub x: V,
    pub r: M,
    pub v: V,
    pub w: V,
}

pub type State = StateOf<Vec3, Mat3>;

impl State {
    pub fn at_rest(x: Vec3, r: Mat3) -> Self {
        Self {
            x,
            r,
            v: Vec3::ZERO,
            w: Vec3::ZERO,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.v.is_finite() && self.w.is_finite() && self.r.is_rotation()
    }

    pub fn lift<A: Algebra>(&self, alg: &mut A) -> StateOf<A::V3, A::M3> {
        StateOf {
            x: alg.v3_const(self.x),
            r: alg.m3_const(self.r),
            v: alg.v3_const(self.v),
            w: alg.v3_const(self.w),
        }
    }

    /// The 12-dim pose vector `[x, R row-major]`.
    pub fn pose_vector(&self) -> [f64; 12] {
        let mut p = [0.0; 12];
        p[..3].copy_from_slice(&self.x.to_array());
        p[3..].copy_from_slice(&self.r.0);
        p
    }
}

impl<V, M> StateOf<V, M> {
    pub fn value<A: Algebra<V3 = V, M3 = M>>(&self, alg: &A) -> State {
        State {
            x: alg.v3_val(&self.x),
            r: alg.m3_val(&self.r),
            v: alg.v3_val(&self.v),
            w: alg.v3_val(&self.w),
        }
    }
}

/// Discrete force pair entering one step. All four vectors are body-frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceWrenchOf<V> {
    pub fx_minus: V,
    pub fx_plus: V,
    pub fr_minus: V,
    pub fr_plus: V,
}

pub type ForceWrench = ForceWrenchOf<Vec3>;

impl ForceWrench {
    pub fn zero() -> Self {
        Self {
            fx_minus: Vec3::ZERO,
            fx_plus: Vec3::ZERO,
            fr_minus: Vec3::ZERO,
            fr_plus: Vec3::ZERO,
        }
    }
}

impl<V: Clone> ForceWrenchOf<V> {
    /// Discretizes a continuous body-frame force/torque held over one step:
    /// `f⁻ = (1−α)·h·f`, `f⁺ = α·h·f`.
    pub fn split<A: Algebra<V3 = V>>(alg: &mut A, force: &V, torque: &V, alpha: f64, h: f64) -> Self {
        Self {
            fx_minus: alg.v3_scale(force, (1.0 - alpha) * h),
            fx_plus: alg.v3_scale(force, alpha * h),
            fr_minus: alg.v3_scale(torque, (1.0 - alpha) * h),
            fr_plus: alg.v3_scale(torque, alpha * h),
        }
    }
}

/// `∂U/∂x` and `∂U/∂R` at one pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialGradOf<V, M> {
    pub du_dx: V,
    pub du_dr: M,
}

pub type PotentialGrad = PotentialGradOf<Vec3, Mat3>;

impl PotentialGrad {
    pub fn zero() -> Self {
        Self {
            du_dx: Vec3::ZERO,
            du_dr: Mat3::ZERO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub m: f64,
    pub j: Mat3,
    pub jd: Mat3,
    pub alpha: f64,
    pub h: f64,
    #[serde(skip)]
    j_inv: Option<Mat3>,
}

/// `J_d = ½·tr(J)·I − J`.
pub fn compute_jd(j: &Mat3) -> Mat3 {
    Mat3::scalar(0.5 * j.trace()) - *j
}

impl VehicleParams {
    pub fn new(m: f64, j: Mat3, alpha: f64, h: f64) -> Result<Self, IntegratorError> {
        let bad = |msg: String| Err(IntegratorError::InvalidParams(msg));
        if !(m > 0.0 && m.is_finite()) {
            return bad(format!("mass must be positive, got {m}"));
        }
        if !(h > 0.0 && h.is_finite()) {
            return bad(format!("timestep must be positive, got {h}"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return bad(format!("alpha must lie in [0, 1], got {alpha}"));
        }
        if !j.is_finite() || !j.is_symmetric(1e-12) {
            return bad("inertia must be finite and symmetric".into());
        }
        // Sylvester's criterion
        let m11 = j.get(0, 0);
        let m22 = j.get(0, 0) * j.get(1, 1) - j.get(0, 1) * j.get(1, 0);
        if !(m11 > 0.0 && m22 > 0.0 && j.det() > 0.0) {
            return bad("inertia must be positive definite".into());
        }
        Ok(Self {
            m,
            j,
            jd: compute_jd(&j),
            alpha,
            h,
            j_inv: j.inverse(),
        })
    }

    pub fn with_h(&self, h: f64) -> Result<Self, IntegratorError> {
        Self::new(self.m, self.j, self.alpha, h)
    }

    pub fn j_inv(&self) -> Mat3 {
        self.j_inv
            .or_else(|| self.j.inverse())
            .expect("validated inertia is invertible")
    }

    /// Deserialized params lose the cached inverse; this restores it.
    pub fn revalidate(self) -> Result<Self, IntegratorError> {
        Self::new(self.m, self.j, self.alpha, self.h)
    }
}

impl Default for VehicleParams {
    /// Unit mass, an elongated-body inertia, α = ½, h = 0.1 s.
    fn default() -> Self {
        Self::new(1.0, Mat3::diag([0.2, 0.4, 0.5]), 0.5, 0.1).expect("default params are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    pub max_iters: usize,
    /// Early exit once `‖g(φ)‖ ≤ tol`.
    pub tol: f64,
    /// Solves ending above this residual are rejected.
    pub fail_tol: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            max_iters: 5,
            tol: 1e-10,
            fail_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub solve: SolveStats,
    pub reprojected: bool,
}

/// Ground-truth or learned physics supplying `∂U/∂q` and the continuous
/// body-frame force/torque for one step.
pub trait Dynamics<A: Algebra> {
    fn potential(&self, alg: &mut A, x: &A::V3, r: &A::M3) -> PotentialGradOf<A::V3, A::M3>;

    fn force(
        &self,
        alg: &mut A,
        state: &StateOf<A::V3, A::M3>,
        action: &Action,
        b0: &Observation,
    ) -> (A::V3, A::V3);
}

/// Work of one analytic Newton Jacobian and its 3×3 inverse.
const NEWTON_JACOBIAN_FLOPS: u64 = 3 * (2 * 45 + 9 + 6) + 45 + 70 + 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Integrator {
    pub params: VehicleParams,
    pub newton: NewtonConfig,
    /// Rotations drifting further than this from SO(3) are re-projected.
    pub reproject_tol: f64,
}

impl Integrator {
    pub fn new(params: VehicleParams) -> Self {
        Self {
            params,
            newton: NewtonConfig::default(),
            reproject_tol: 1e-9,
        }
    }

    pub fn h(&self) -> f64 {
        self.params.h
    }

    /// `ξ = vee(∂Uᵀ/∂R·R − Rᵀ·∂U/∂R)`.
    pub fn potential_xi<A: Algebra>(alg: &mut A, r: &A::M3, du_dr: &A::M3) -> A::V3 {
        let dt = alg.m3_transpose(du_dr);
        let a = alg.m3_mul(&dt, r);
        let at = alg.m3_transpose(&a);
        let s = alg.m3_sub(&a, &at);
        alg.vee(&s)
    }

    /// Right-hand side vector of the rotation equation, `h·J·ω + h·f⁻_R + (1−α)·h²·ξ`.
    fn rotation_rhs<A: Algebra>(&self, alg: &mut A, w: &A::V3, fr_minus: &A::V3, xi: &A::V3) -> A::V3 {
        let p = &self.params;
        let jw = alg.const_mul_v3(&p.j, w);
        let a = alg.v3_scale(&jw, p.h);
        let b = alg.v3_scale(fr_minus, p.h);
        let c = alg.v3_scale(xi, (1.0 - p.alpha) * p.h * p.h);
        let ab = alg.v3_add(&a, &b);
        alg.v3_add(&ab, &c)
    }

    /// `vee(Z·J_d − J_d·Zᵀ)`.
    fn rotation_lhs<A: Algebra>(&self, alg: &mut A, z: &A::M3) -> A::V3 {
        let jd = &self.params.jd;
        let zj = alg.m3_mul_const(z, jd);
        let zt = alg.m3_transpose(z);
        let jz = alg.const_mul_m3(jd, &zt);
        let d = alg.m3_sub(&zj, &jz);
        alg.vee(&d)
    }

    /// Analytic Jacobian of `φ ↦ vee(exp(φ)·J_d − J_d·exp(φ)ᵀ)`.
    pub fn newton_jacobian(&self, phi: Vec3, z: &Mat3) -> Mat3 {
        let jd = self.params.jd;
        let zt = z.transpose();
        let mut cols = [Vec3::ZERO; 3];
        for (k, col) in cols.iter_mut().enumerate() {
            let mut e = Vec3::ZERO;
            e[k] = 1.0;
            let he = hat(e);
            let d = *z * he * jd + jd * he * zt;
            *col = vee_unchecked(&d);
        }
        Mat3::from_cols(cols[0], cols[1], cols[2]) * right_jacobian(phi)
    }

    /// Solves the implicit rotation equation for `Z` by Newton's method on
    /// `φ` with `Z = exp(φ)`, starting from `φ₀ = h·ω`.
    ///
    /// The iterations are recorded in `alg`; the Jacobian enters each update as
    /// a constant.
    pub fn solve_z<A: Algebra>(
        &self,
        alg: &mut A,
        w: &A::V3,
        fr_minus: &A::V3,
        xi: &A::V3,
    ) -> Result<(A::M3, SolveStats), IntegratorError> {
        let rhs = self.rotation_rhs(alg, w, fr_minus, xi);
        let mut phi = alg.v3_scale(w, self.params.h);
        let mut iterations = 0;
        loop {
            let z = alg.exp_so3(&phi);
            let lhs = self.rotation_lhs(alg, &z);
            let g = alg.v3_sub(&lhs, &rhs);
            let residual = alg.v3_val(&g).norm();
            if residual <= self.newton.tol || iterations == self.newton.max_iters || !residual.is_finite() {
                if residual > self.newton.fail_tol || !residual.is_finite() {
                    return Err(IntegratorError::NoConvergence {
                        residual,
                        iterations,
                    });
                }
                return Ok((z, SolveStats { iterations, residual }));
            }
            let jac = self.newton_jacobian(alg.v3_val(&phi), &alg.m3_val(&z));
            let jinv = jac.inverse().ok_or(IntegratorError::NoConvergence {
                residual,
                iterations,
            })?;
            alg.note_flops(NEWTON_JACOBIAN_FLOPS);
            let delta = alg.const_mul_v3(&jinv, &g);
            phi = alg.v3_sub(&phi, &delta);
            iterations += 1;
        }
    }

    /// Polar re-projection `M ← ½(M + M⁻ᵀ)` recorded in `alg`.
    pub fn reproject<A: Algebra>(alg: &mut A, r: &A::M3) -> A::M3 {
        let mut cur = r.clone();
        for _ in 0..50 {
            let inv = alg.m3_inverse(&cur);
            let inv_t = alg.m3_transpose(&inv);
            let sum = alg.m3_add(&cur, &inv_t);
            let next = alg.m3_scale(&sum, 0.5);
            let delta = (alg.m3_val(&next) - alg.m3_val(&cur)).frobenius();
            cur = next;
            if delta <= 1e-12 {
                break;
            }
        }
        cur
    }

    /// One step. `du` is `∂U/∂q` at the current pose; `du_next` is queried at the
    /// new pose and its result is returned for reuse in the following step.
    #[allow(clippy::type_complexity)]
    pub fn step<A: Algebra>(
        &self,
        alg: &mut A,
        s: &StateOf<A::V3, A::M3>,
        du: &PotentialGradOf<A::V3, A::M3>,
        du_next: impl FnOnce(&mut A, &A::V3, &A::M3) -> PotentialGradOf<A::V3, A::M3>,
        f: &ForceWrenchOf<A::V3>,
    ) -> Result<(StateOf<A::V3, A::M3>, PotentialGradOf<A::V3, A::M3>, StepStats), IntegratorError> {
        let p = &self.params;
        let (h, m, alpha) = (p.h, p.m, p.alpha);

        // position
        let hv = alg.v3_scale(&s.v, h);
        let pot = alg.v3_scale(&du.du_dx, (1.0 - alpha) * h * h / m);
        let rf = alg.m3_vec(&s.r, &f.fx_minus);
        let rf_h = alg.v3_scale(&rf, h / m);
        let x1 = alg.v3_add(&s.x, &hv);
        let x1 = alg.v3_sub(&x1, &pot);
        let x_next = alg.v3_add(&x1, &rf_h);

        // rotation
        let xi = Self::potential_xi(alg, &s.r, &du.du_dr);
        let (z, solve) = self.solve_z(alg, &s.w, &f.fr_minus, &xi)?;
        let mut r_next = alg.m3_mul(&s.r, &z);
        let drift = alg.m3_val(&r_next).orthogonality_error();
        let reprojected = drift > self.reproject_tol;
        if reprojected {
            r_next = Self::reproject(alg, &r_next);
        }

        let du1 = du_next(alg, &x_next, &r_next);

        // linear velocity
        let a = alg.v3_scale(&du.du_dx, (1.0 - alpha) * h / m);
        let b = alg.v3_scale(&du1.du_dx, alpha * h / m);
        let rf_next = alg.m3_vec(&r_next, &f.fx_plus);
        let forces = alg.v3_add(&rf, &rf_next);
        let forces = alg.v3_scale(&forces, 1.0 / m);
        let v1 = alg.v3_sub(&s.v, &a);
        let v1 = alg.v3_sub(&v1, &b);
        let v_next = alg.v3_add(&v1, &forces);

        // angular velocity
        let xi1 = Self::potential_xi(alg, &r_next, &du1.du_dr);
        let jw = alg.const_mul_v3(&p.j, &s.w);
        let xi_term = alg.v3_scale(&xi, (1.0 - alpha) * h);
        let inner = alg.v3_add(&jw, &xi_term);
        let inner = alg.v3_add(&inner, &f.fr_minus);
        let rotated = alg.m3_tvec(&z, &inner);
        let xi1_term = alg.v3_scale(&xi1, alpha * h);
        let mom = alg.v3_add(&rotated, &xi1_term);
        let mom = alg.v3_add(&mom, &f.fr_plus);
        let w_next = alg.const_mul_v3(&p.j_inv(), &mom);

        let next = StateOf {
            x: x_next,
            r: r_next,
            v: v_next,
            w: w_next,
        };
        Ok((next, du1, StepStats { solve, reprojected }))
    }

    /// Plain-`f64` step with a potential provider and a ready discrete wrench.
    pub fn step_plain(
        &self,
        s: &State,
        du: &PotentialGrad,
        du_next: impl FnOnce(&Vec3, &Mat3) -> PotentialGrad,
        f: &ForceWrench,
    ) -> Result<(State, PotentialGrad, StepStats), IntegratorError> {
        self.step(&mut Plain, s, du, |_, x, r| du_next(x, r), f)
    }

    /// `n` steps driven by `dynamics`. Returns `ŝ₁ … ŝₙ`.
    pub fn rollout<A: Algebra, D: Dynamics<A> + ?Sized>(
        &self,
        alg: &mut A,
        dynamics: &D,
        s0: &StateOf<A::V3, A::M3>,
        actions: &[Action],
        b0: &Observation,
        n: usize,
    ) -> Result<Rollout<A::V3, A::M3>, IntegratorError> {
        if actions.len() < n {
            return Err(IntegratorError::TooFewActions {
                needed: n,
                got: actions.len(),
            });
        }
        let mut states = Vec::with_capacity(n);
        let mut stats = RolloutStats::default();
        if n == 0 {
            return Ok(Rollout { states, stats });
        }
        let mut s = s0.clone();
        let mut du = dynamics.potential(alg, &s.x, &s.r);
        for (t, action) in actions.iter().take(n).enumerate() {
            let (force, torque) = dynamics.force(alg, &s, action, b0);
            let f = ForceWrenchOf::split(alg, &force, &torque, self.params.alpha, self.params.h);
            let (next, du_next, st) = self
                .step(alg, &s, &du, |a, x, r| dynamics.potential(a, x, r), &f)
                .map_err(|e| IntegratorError::AtStep {
                    step: t,
                    source: Box::new(e),
                })?;
            stats.record(&st);
            states.push(next.clone());
            s = next;
            du = du_next;
        }
        Ok(Rollout { states, stats })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RolloutStats {
    pub steps: usize,
    pub reprojections: usize,
    pub newton_iterations: usize,
    pub max_residual: f64,
}

impl RolloutStats {
    pub fn record(&mut self, st: &StepStats) {
        self.steps += 1;
        self.reprojections += st.reprojected as usize;
        self.newton_iterations += st.solve.iterations;
        self.max_residual = self.max_residual.max(st.solve.residual);
    }
}

#[derive(Debug, Clone)]
pub struct Rollout<V, M> {
    pub states: Vec<StateOf<V, M>>,
    pub stats: RolloutStats,
}

/// Dynamics with no potential and no force: a free rigid body.
#[derive(Debug, Default, Clone, Copy)]
pub struct FreeBody;

impl<A: Algebra> Dynamics<A> for FreeBody {
    fn potential(&self, alg: &mut A, _x: &A::V3, _r: &A::M3) -> PotentialGradOf<A::V3, A::M3> {
        PotentialGradOf {
            du_dx: alg.v3_const(Vec3::ZERO),
            du_dr: alg.m3_const(Mat3::ZERO),
        }
    }

    fn force(&self, alg: &mut A, _s: &StateOf<A::V3, A::M3>, _a: &Action, _b: &Observation) -> (A::V3, A::V3) {
        (alg.v3_const(Vec3::ZERO), alg.v3_const(Vec3::ZERO))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::liegroup::{exp_so3, geodesic_angle, rot_z};
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn rvec(rng: &mut impl Rng, s: f64) -> Vec3 {
        Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn integ() -> Integrator {
        Integrator::new(VehicleParams::default())
    }

    #[test]
    fn jd_examples() {
        assert_eq!(compute_jd(&Mat3::IDENTITY), Mat3::scalar(0.5));
        assert_eq!(compute_jd(&Mat3::diag([1.0, 2.0, 3.0])), Mat3::diag([2.0, 1.0, 0.0]));
        assert_eq!(compute_jd(&Mat3::ZERO), Mat3::ZERO);
        let p = VehicleParams::default();
        assert_eq!(p.jd, Mat3::scalar(0.5 * p.j.trace()) - p.j);
    }

    #[test]
    fn params_validation() {
        let j = Mat3::diag([1.0, 1.0, 1.0]);
        assert!(VehicleParams::new(0.0, j, 0.5, 0.1).is_err());
        assert!(VehicleParams::new(1.0, j, 1.5, 0.1).is_err());
        assert!(VehicleParams::new(1.0, j, 0.5, 0.0).is_err());
        assert!(VehicleParams::new(1.0, Mat3::diag([1.0, -1.0, 1.0]), 0.5, 0.1).is_err());
        let mut asym = j;
        asym.0[1] = 0.1;
        assert!(VehicleParams::new(1.0, asym, 0.5, 0.1).is_err());
    }

    #[test]
    fn xi_examples() {
        let r = exp_so3(Vec3::new(0.3, -0.2, 1.0));
        let xi = Integrator::potential_xi(&mut Plain, &r, &Mat3::ZERO);
        assert_eq!(xi, Vec3::ZERO);
        let xi = Integrator::potential_xi(&mut Plain, &r, &r);
        assert!(xi.norm() < 1e-15);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        for _ in 0..100 {
            let r = exp_so3(rvec(&mut rng, 3.0));
            let d = Mat3(std::array::from_fn(|_| rng.random_range(-5.0..5.0)));
            let a = d.transpose() * r;
            let s = a - a.transpose();
            assert!((s + s.transpose()).frobenius() < 1e-14);
            let xi = Integrator::potential_xi(&mut Plain, &r, &d);
            assert!((hat(xi) - s).frobenius() < 1e-13);
        }
    }

    #[test]
    fn solve_z_trivial_and_closed_form() {
        let it = integ();
        let (z, st) = it
            .solve_z(&mut Plain, &Vec3::ZERO, &Vec3::ZERO, &Vec3::ZERO)
            .unwrap();
        assert_eq!(z, Mat3::IDENTITY);
        assert_eq!(st.iterations, 0);

        let unit = Integrator::new(VehicleParams::new(1.0, Mat3::IDENTITY, 0.5, 0.1).unwrap());
        let (z, st) = unit
            .solve_z(&mut Plain, &Vec3::new(0.0, 0.0, 1.0), &Vec3::ZERO, &Vec3::ZERO)
            .unwrap();
        let expect = rot_z(0.1f64.asin());
        assert!(geodesic_angle(&z, &expect) <= 1e-10);
        assert!(st.residual <= 1e-10);
    }

    #[test]
    fn newton_jacobian_matches_finite_differences() {
        let it = integ();
        let phi = Vec3::new(0.05, -0.1, 0.2);
        let jac = it.newton_jacobian(phi, &exp_so3(phi));
        let g = |p: Vec3| it.rotation_lhs(&mut Plain, &exp_so3(p));
        let eps = 1e-7;
        for k in 0..3 {
            let mut d = Vec3::ZERO;
            d[k] = eps;
            let col = (g(phi + d) - g(phi - d)).scale(0.5 / eps);
            assert!((col - jac.col(k)).norm() < 1e-8);
        }
    }

    #[test]
    fn solve_residual_over_random_draws() {
        let it = integ();
        let p = it.params;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let mut n = 0;
        while n < 1000 {
            let w = rvec(&mut rng, 6.0);
            if (w.scale(p.h)).norm() >= 0.5 {
                continue;
            }
            let f = rvec(&mut rng, 0.05);
            let xi = rvec(&mut rng, 1.0);
            let (z, _) = it.solve_z(&mut Plain, &w, &f, &xi).unwrap();
            let lhs_m = z * p.jd - p.jd * z.transpose();
            let rhs = (p.j * w).scale(p.h) + f.scale(p.h) + xi.scale((1.0 - p.alpha) * p.h * p.h);
            assert!((lhs_m - hat(rhs)).frobenius() <= 1e-9);
            n += 1;
        }
    }

    #[test]
    fn free_particle_step() {
        let it = integ();
        let s = State {
            x: Vec3::new(1.0, 2.0, 3.0),
            r: exp_so3(Vec3::new(0.1, 0.2, 0.3)),
            v: Vec3::new(0.5, -1.0, 2.0),
            w: Vec3::ZERO,
        };
        let (n, _, _) = it
            .step_plain(&s, &PotentialGrad::zero(), |_, _| PotentialGrad::zero(), &ForceWrench::zero())
            .unwrap();
        assert_eq!(n.x, s.x + s.v.scale(0.1));
        assert_eq!(n.r, s.r);
        assert_eq!(n.v, s.v);
        assert_eq!(n.w, Vec3::ZERO);
    }

    #[test]
    fn torque_free_step_conserves_momenta() {
        let it = integ();
        let p = it.params;
        let s = State {
            x: Vec3::ZERO,
            r: exp_so3(Vec3::new(-0.4, 0.2, 0.9)),
            v: Vec3::new(1.0, 0.0, -0.5),
            w: Vec3::new(0.7, -1.3, 2.1),
        };
        let (n, _, _) = it
            .step_plain(&s, &PotentialGrad::zero(), |_, _| PotentialGrad::zero(), &ForceWrench::zero())
            .unwrap();
        assert_eq!(n.v.scale(p.m), s.v.scale(p.m));
        let l0 = s.r * (p.j * s.w);
        let l1 = n.r * (p.j * n.w);
        assert!((l0 - l1).norm() < 1e-14);
    }

    #[test]
    fn uniform_gravity_telescopes() {
        let it = integ();
        let p = it.params;
        let g = 9.81;
        let grad = PotentialGrad {
            du_dx: Vec3::new(0.0, 0.0, p.m * g),
            du_dr: Mat3::ZERO,
        };
        let mut s = State::at_rest(Vec3::ZERO, Mat3::IDENTITY);
        s.v = Vec3::new(0.0, 0.0, 3.0);
        let vz0 = s.v.z;
        for n in 1..=50 {
            let g2 = grad.clone();
            let (next, _, _) = it
                .step_plain(&s, &grad, move |_, _| g2, &ForceWrench::zero())
                .unwrap();
            s = next;
            assert!((s.v.z - (vz0 - n as f64 * p.h * g)).abs() <= 1e-12);
        }
    }

    #[test]
    fn tape_and_plain_steps_agree_bitwise() {
        let it = integ();
        let s = State {
            x: Vec3::new(0.1, 0.2, 0.3),
            r: exp_so3(Vec3::new(0.3, -0.1, 0.5)),
            v: Vec3::new(1.0, 0.5, 0.0),
            w: Vec3::new(0.2, -0.4, 0.9),
        };
        let grad = PotentialGrad {
            du_dx: Vec3::new(0.1, 0.0, 9.8),
            du_dr: Mat3::from_rows([[0.1, 0.0, 0.3], [0.0, -0.2, 0.0], [0.5, 0.0, 0.1]]),
        };
        let f = ForceWrench {
            fx_minus: Vec3::new(0.05, 0.0, 0.0),
            fx_plus: Vec3::new(0.05, 0.01, 0.0),
            fr_minus: Vec3::new(0.0, 0.0, 0.02),
            fr_plus: Vec3::new(0.0, 0.01, 0.02),
        };
        let g2 = grad.clone();
        let (plain, _, _) = it.step_plain(&s, &grad, move |_, _| g2, &f).unwrap();

        let mut tape = Tape::new();
        let st = s.lift(&mut tape);
        let du = PotentialGradOf {
            du_dx: tape.v3_const(grad.du_dx),
            du_dr: tape.m3_const(grad.du_dr),
        };
        let fw = ForceWrenchOf {
            fx_minus: tape.v3_const(f.fx_minus),
            fx_plus: tape.v3_const(f.fx_plus),
            fr_minus: tape.v3_const(f.fr_minus),
            fr_plus: tape.v3_const(f.fr_plus),
        };
        let g3 = grad.clone();
        let (taped, _, _) = it
            .step(
                &mut tape,
                &st,
                &du,
                move |a: &mut Tape, _, _| PotentialGradOf {
                    du_dx: a.v3_const(g3.du_dx),
                    du_dr: a.m3_const(g3.du_dr),
                },
                &fw,
            )
            .unwrap();
        let tv = taped.value(&tape);
        assert_eq!(tv, plain);
    }

    #[test]
    fn rollout_edge_cases() {
        let it = integ();
        let s0 = State {
            x: Vec3::ZERO,
            r: Mat3::IDENTITY,
            v: Vec3::new(1.0, 0.0, 0.0),
            w: Vec3::ZERO,
        };
        let acts = vec![Action::default(); 20];
        let b0 = Observation::default();
        let empty = it.rollout(&mut Plain, &FreeBody, &s0, &acts, &b0, 0).unwrap();
        assert!(empty.states.is_empty());
        let out = it.rollout(&mut Plain, &FreeBody, &s0, &acts, &b0, 20).unwrap();
        let xf = out.states.last().unwrap().x;
        assert!((xf - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(matches!(
            it.rollout(&mut Plain, &FreeBody, &s0, &acts, &b0, 21),
            Err(IntegratorError::TooFewActions { needed: 21, got: 20 })
        ));
    }

    #[test]
    fn step_is_deterministic() {
        let it = integ();
        let s = State {
            x: Vec3::new(0.3, 0.2, 0.1),
            r: exp_so3(Vec3::new(1.0, 0.5, -0.5)),
            v: Vec3::new(2.0, 0.1, 0.0),
            w: Vec3::new(1.0, 2.0, -3.0),
        };
        let run = || {
            it.step_plain(&s, &PotentialGrad::zero(), |_, _| PotentialGrad::zero(), &ForceWrench::zero())
                .unwrap()
                .0
        };
        let a = run();
        let b = run();
        assert_eq!(a.r.0.map(f64::to_bits), b.r.0.map(f64::to_bits));
        assert_eq!(a.w.to_array().map(f64::to_bits), b.w.to_array().map(f64::to_bits));
    }

    #[test]
    fn huge_spin_fails_to_converge() {
        let it = integ();
        let err = it
            .solve_z(&mut Plain, &Vec3::new(400.0, -300.0, 900.0), &Vec3::ZERO, &Vec3::ZERO)
            .unwrap_err();
        assert!(matches!(err, IntegratorError::NoConvergence { .. }));
    }
}
