//! Learned physics components: the potential-derivative network `dU_θ(q)`, the
//! force network `f_θ(q̇, a, b₀)`, and the ablation variants.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Algebra, Gradients, Plain, Tape, Var};
use crate::integrator::{
    Dynamics, ForceWrenchOf, Integrator, IntegratorError, PotentialGradOf, RolloutStats, State, StateOf,
    VehicleParams,
};
use crate::liegroup::{Mat3, Vec3};
use crate::nn::{self, Activation, BoundMlp, Mlp, MlpSpec, NnError};

/// Driver command. Values are clamped on construction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub throttle: f64,
    pub steering: f64,
    pub brake: f64,
}

impl Action {
    pub fn new(throttle: f64, steering: f64, brake: f64) -> Self {
        Self {
            throttle: throttle.clamp(0.0, 1.0),
            steering: steering.clamp(-1.0, 1.0),
            brake: brake.clamp(0.0, 1.0),
        }
    }

    pub fn clamped(self) -> Self {
        Self::new(self.throttle, self.steering, self.brake)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.throttle, self.steering, self.brake]
    }
}

/// Initial observation: per-wheel speed minus vehicle speed (m/s).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub wheel_disc: [f64; 4],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Derivative MLP potential and MLP force.
    #[default]
    Full,
    /// Pure neural state deltas from the same two networks.
    Phys,
    /// Force from the action with three learned gains.
    F,
    /// Scalar potential MLP differentiated w.r.t. its input.
    U,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Phys, Variant::F, Variant::U, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "PhysORD",
            Variant::Phys => "Ours-Phys",
            Variant::F => "Ours-F",
            Variant::U => "Ours-U",
        }
    }

    pub fn force_mode(self) -> ForceMode {
        match self {
            Variant::F => ForceMode::ScaledAction,
            _ => ForceMode::Mlp,
        }
    }

    pub fn potential_mode(self) -> PotentialMode {
        match self {
            Variant::U => PotentialMode::ScalarMlp,
            _ => PotentialMode::DerivativeMlp,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "physord" => Ok(Variant::Full),
            "phys" | "ours-phys" => Ok(Variant::Phys),
            "f" | "ours-f" => Ok(Variant::F),
            "u" | "ours-u" => Ok(Variant::U),
            other => Err(format!("unknown variant '{other}' (expected full, phys, f or u)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceMode {
    Mlp,
    ScaledAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialMode {
    DerivativeMlp,
    ScalarMlp,
}

pub const POSE_DIM: usize = 12;
pub const FORCE_INPUT_DIM: usize = 13;

pub fn du_spec(activation: Activation) -> MlpSpec {
    MlpSpec::new(vec![(12, 10), (10, 12)], activation).expect("valid spec")
}

pub fn du_scalar_spec(activation: Activation) -> MlpSpec {
    MlpSpec::new(vec![(12, 10), (10, 1)], activation).expect("valid spec")
}

pub fn f_spec(activation: Activation) -> MlpSpec {
    MlpSpec::new(vec![(13, 64), (64, 64), (64, 6)], activation).expect("valid spec")
}

/// Per-channel `(input − mean) / scale`, fit on training data and never trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub pose_mean: Vec<f64>,
    pub pose_scale: Vec<f64>,
    pub force_mean: Vec<f64>,
    pub force_scale: Vec<f64>,
}

impl InputNorm {
    /// Fits mean and standard deviation per channel. Channels with spread below
    /// `1e-6` keep unit scale.
    pub fn fit(pose_rows: &[[f64; POSE_DIM]], force_rows: &[[f64; FORCE_INPUT_DIM]]) -> Self {
        fn stats<const N: usize>(rows: &[[f64; N]]) -> (Vec<f64>, Vec<f64>) {
            let n = rows.len().max(1) as f64;
            let mut mean = vec![0.0; N];
            for r in rows {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v / n;
                }
            }
            let mut var = vec![0.0; N];
            for r in rows {
                for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                    *s += (v - m) * (v - m) / n;
                }
            }
            let scale = var.iter().map(|v| if v.sqrt() > 1e-6 { v.sqrt() } else { 1.0 }).collect();
            (mean, scale)
        }
        let (pose_mean, pose_scale) = stats(pose_rows);
        let (force_mean, force_scale) = stats(force_rows);
        Self {
            pose_mean,
            pose_scale,
            force_mean,
            force_scale,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
}

/// The trainable model: networks, optional action gains, and fixed vehicle constants.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModels {
    pub variant: Variant,
    pub du_net: Mlp,
    pub f_net: Option<Mlp>,
    /// `[k_t, k_b, k_s]` for [`Variant::F`].
    pub gains: Option<[f64; 3]>,
    pub norm: Option<InputNorm>,
}

/// Describes everything about a model except its parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub variant: Variant,
    pub du_spec: MlpSpec,
    pub f_spec: Option<MlpSpec>,
    pub scaled_action_gains: bool,
}

/// JSON written next to a weight container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub format: String,
    pub descriptor: ModelDescriptor,
    pub param_count: usize,
    pub force_mode: ForceMode,
    pub potential_mode: PotentialMode,
    pub vehicle: VehicleParams,
    pub norm: Option<InputNorm>,
}

impl DynamicsModels {
    pub fn zeros(variant: Variant, activation: Activation) -> Self {
        let du = match variant.potential_mode() {
            PotentialMode::DerivativeMlp => du_spec(activation),
            PotentialMode::ScalarMlp => du_scalar_spec(activation),
        };
        let (f_net, gains) = match variant.force_mode() {
            ForceMode::Mlp => (Some(Mlp::zeros(f_spec(activation))), None),
            ForceMode::ScaledAction => (None, Some([0.0; 3])),
        };
        Self {
            variant,
            du_net: Mlp::zeros(du),
            f_net,
            gains,
            norm: None,
        }
    }

    pub fn init<R: Rng + ?Sized>(variant: Variant, activation: Activation, rng: &mut R) -> Self {
        let mut m = Self::zeros(variant, activation);
        m.du_net = Mlp::init(m.du_net.spec.clone(), rng);
        if let Some(f) = &mut m.f_net {
            *f = Mlp::init(f.spec.clone(), rng);
        }
        m
    }

    pub fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor {
            variant: self.variant,
            du_spec: self.du_net.spec.clone(),
            f_spec: self.f_net.as_ref().map(|f| f.spec.clone()),
            scaled_action_gains: self.gains.is_some(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.du_net.param_count()
            + self.f_net.as_ref().map_or(0, Mlp::param_count)
            + self.gains.map_or(0, |g| g.len())
    }

    /// All trainable values: `dU` layers, then `f` layers or the three gains.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.du_net.flatten_into(&mut out);
        if let Some(f) = &self.f_net {
            f.flatten_into(&mut out);
        }
        if let Some(g) = &self.gains {
            out.extend_from_slice(g);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.param_count() {
            return Err(ModelError::ParamCount {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut rest = self.du_net.load_flat(flat);
        if let Some(f) = &mut self.f_net {
            rest = f.load_flat(rest);
        }
        if let Some(g) = &mut self.gains {
            g.copy_from_slice(&rest[..3]);
        }
        Ok(())
    }

    /// Number of leading flat parameters that belong to the potential network.
    pub fn potential_param_count(&self) -> usize {
        self.du_net.param_count()
    }

    pub fn bind_plain(&self) -> BoundModels<Vec<f64>> {
        BoundModels {
            variant: self.variant,
            du: BoundMlp::bind_plain(&self.du_net),
            f: self.f_net.as_ref().map(BoundMlp::bind_plain),
            gains: self.gains.map(|g| g.to_vec()),
            norm: self.norm.clone(),
        }
    }

    /// Registers every trainable value as a tape leaf, in flat-parameter order.
    pub fn bind_tape(&self, tape: &mut Tape) -> BoundModels<Var> {
        let du = BoundMlp::bind_tape(&self.du_net, tape);
        let f = self.f_net.as_ref().map(|f| BoundMlp::bind_tape(f, tape));
        let gains = self.gains.map(|g| tape.leaf(&g));
        BoundModels {
            variant: self.variant,
            du,
            f,
            gains,
            norm: self.norm.clone(),
        }
    }

    pub fn du_theta(&self, x: Vec3, r: &Mat3) -> crate::integrator::PotentialGrad {
        let bound = self.bind_plain();
        Dynamics::<Plain>::potential(&bound, &mut Plain, &x, r)
    }

    /// Continuous body-frame force and torque.
    pub fn f_theta(&self, state: &State, a: &Action, b0: &Observation) -> (Vec3, Vec3) {
        let bound = self.bind_plain();
        Dynamics::<Plain>::force(&bound, &mut Plain, state, a, b0)
    }

    pub fn sidecar(&self, vehicle: &VehicleParams) -> ModelSidecar {
        ModelSidecar {
            format: String::from_utf8_lossy(nn::CONTAINER_MAGIC).into_owned(),
            descriptor: self.descriptor(),
            param_count: self.param_count(),
            force_mode: self.variant.force_mode(),
            potential_mode: self.variant.potential_mode(),
            vehicle: *vehicle,
            norm: self.norm.clone(),
        }
    }

    /// Writes `<path>` (binary weights) and `<path>.json` (descriptor sidecar).
    pub fn save(&self, path: &Path, vehicle: &VehicleParams) -> Result<(), ModelError> {
        let digest = nn::spec_digest(&self.descriptor());
        let mut arrays: Vec<&[f64]> = Vec::new();
        for l in &self.du_net.layers {
            arrays.push(&l.w);
            arrays.push(&l.b);
        }
        if let Some(f) = &self.f_net {
            for l in &f.layers {
                arrays.push(&l.w);
                arrays.push(&l.b);
            }
        }
        if let Some(g) = &self.gains {
            arrays.push(g);
        }
        let file = File::create(path).map_err(NnError::Io)?;
        let mut w = BufWriter::new(file);
        nn::write_container(&mut w, &digest, &arrays)?;
        std::io::Write::flush(&mut w).map_err(NnError::Io)?;
        let side = serde_json::to_string_pretty(&self.sidecar(vehicle)).expect("sidecar serializes");
        std::fs::write(sidecar_path(path), side).map_err(NnError::Io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, VehicleParams), ModelError> {
        let bad = |msg: String| ModelError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let side_path = sidecar_path(path);
        let text = std::fs::read_to_string(&side_path)
            .map_err(|e| bad(format!("cannot read sidecar {}: {e}", side_path.display())))?;
        let side: ModelSidecar = serde_json::from_str(&text).map_err(|e| bad(format!("bad sidecar: {e}")))?;
        let file = File::open(path).map_err(NnError::Io)?;
        let (digest, arrays) = nn::read_container(BufReader::new(file))?;
        if digest != nn::spec_digest(&side.descriptor) {
            return Err(bad("weight container digest does not match sidecar descriptor".into()));
        }
        let d = side.descriptor;
        let mut model = DynamicsModels {
            variant: d.variant,
            du_net: Mlp::zeros(d.du_spec),
            f_net: d.f_spec.map(Mlp::zeros),
            gains: d.scaled_action_gains.then_some([0.0; 3]),
            norm: side.norm,
        };
        let expected_arrays = 2 * model.du_net.layers.len()
            + model.f_net.as_ref().map_or(0, |f| 2 * f.layers.len())
            + model.gains.map_or(0, |_| 1);
        if arrays.len() != expected_arrays {
            return Err(bad(format!("expected {expected_arrays} arrays, found {}", arrays.len())));
        }
        let flat: Vec<f64> = arrays.concat();
        model.set_flat_params(&flat)?;
        if model.param_count() != side.param_count {
            return Err(bad("parameter count disagrees with sidecar".into()));
        }
        let vehicle = side.vehicle.revalidate()?;
        Ok((model, vehicle))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// A [`DynamicsModels`] whose trainable values live in an [`Algebra`].
#[derive(Debug, Clone)]
pub struct BoundModels<V> {
    pub variant: Variant,
    pub du: BoundMlp<V>,
    pub f: Option<BoundMlp<V>>,
    pub gains: Option<V>,
    pub norm: Option<InputNorm>,
}

impl BoundModels<Var> {
    /// Parameter gradients in flat-parameter order.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        self.du.collect_grads(grads, &mut out);
        if let Some(f) = &self.f {
            f.collect_grads(grads, &mut out);
        }
        if let Some(g) = self.gains {
            out.extend_from_slice(grads.wrt(g));
        }
        out
    }
}

/// Maps the three gains `[k_t, k_b, k_s]` to `(f^x, f^R)`.
const GAIN_MAP_ROWS: usize = 6;

impl<V: Clone> BoundModels<V> {
    fn normalize<A: Algebra<Vector = V>>(alg: &mut A, input: V, mean: &[f64], scale: &[f64]) -> V {
        let neg: Vec<f64> = mean.iter().map(|m| -m).collect();
        let inv: Vec<f64> = scale.iter().map(|s| 1.0 / s).collect();
        let neg = alg.vec_const(&neg);
        let inv = alg.vec_const(&inv);
        let shifted = alg.vec_add(&input, &neg);
        alg.vec_mul(&shifted, &inv)
    }

    pub fn pose_input<A: Algebra<Vector = V>>(&self, alg: &mut A, x: &A::V3, r: &A::M3) -> V {
        let xv = alg.vec_from_v3(x);
        let rv = alg.vec_from_m3(r);
        let input = alg.vec_concat(&[xv, rv]);
        match &self.norm {
            Some(n) => Self::normalize(alg, input, &n.pose_mean, &n.pose_scale),
            None => input,
        }
    }

    /// `[Rᵀv, ω, throttle, steering, brake, wheel_disc]`.
    pub fn force_input<A: Algebra<Vector = V>>(
        &self,
        alg: &mut A,
        s: &StateOf<A::V3, A::M3>,
        a: &Action,
        b0: &Observation,
    ) -> V {
        let vb = alg.m3_tvec(&s.r, &s.v);
        let vb = alg.vec_from_v3(&vb);
        let w = alg.vec_from_v3(&s.w);
        let mut rest = a.to_array().to_vec();
        rest.extend_from_slice(&b0.wheel_disc);
        let rest = alg.vec_const(&rest);
        let input = alg.vec_concat(&[vb, w, rest]);
        match &self.norm {
            Some(n) => Self::normalize(alg, input, &n.force_mean, &n.force_scale),
            None => input,
        }
    }

    /// Raw 12-vector from the potential network for the current pose.
    pub fn du_raw<A: Algebra<Vector = V>>(&self, alg: &mut A, x: &A::V3, r: &A::M3) -> V {
        let input = self.pose_input(alg, x, r);
        self.du.forward(alg, &input)
    }

    /// Raw 6-vector `(f^x, f^R)` for the current state.
    pub fn f_raw<A: Algebra<Vector = V>>(
        &self,
        alg: &mut A,
        s: &StateOf<A::V3, A::M3>,
        a: &Action,
        b0: &Observation,
    ) -> V {
        match (&self.f, &self.gains) {
            (Some(f), _) => {
                let input = self.force_input(alg, s, a, b0);
                f.forward(alg, &input)
            }
            (None, Some(g)) => {
                let mut m = [0.0; GAIN_MAP_ROWS * 3];
                m[0] = a.throttle;
                m[1] = -a.brake;
                m[5 * 3 + 2] = a.steering;
                let m = alg.vec_const(&m);
                let zero = alg.vec_const(&[0.0; GAIN_MAP_ROWS]);
                alg.vec_affine(&m, &zero, g, GAIN_MAP_ROWS, 3)
            }
            (None, None) => alg.vec_const(&[0.0; 6]),
        }
    }
}

impl<A: Algebra> Dynamics<A> for BoundModels<A::Vector> {
    fn potential(&self, alg: &mut A, x: &A::V3, r: &A::M3) -> PotentialGradOf<A::V3, A::M3> {
        let g = match self.variant.potential_mode() {
            PotentialMode::DerivativeMlp => self.du_raw(alg, x, r),
            PotentialMode::ScalarMlp => {
                let input = self.pose_input(alg, x, r);
                let seed = alg.vec_const(&[1.0]);
                let (_, g) = self.du.forward_with_input_grad(alg, &input, &seed);
                match &self.norm {
                    Some(n) => {
                        let inv: Vec<f64> = n.pose_scale.iter().map(|s| 1.0 / s).collect();
                        let inv = alg.vec_const(&inv);
                        alg.vec_mul(&g, &inv)
                    }
                    None => g,
                }
            }
        };
        PotentialGradOf {
            du_dx: alg.vec_v3(&g, 0),
            du_dr: alg.vec_m3(&g, 3),
        }
    }

    fn force(
        &self,
        alg: &mut A,
        s: &StateOf<A::V3, A::M3>,
        a: &Action,
        b0: &Observation,
    ) -> (A::V3, A::V3) {
        let out = self.f_raw(alg, s, a, b0);
        (alg.vec_v3(&out, 0), alg.vec_v3(&out, 3))
    }
}

/// One step of the pure-neural variant: `x' = x + δx`, `R' = R·exp(δθ)`,
/// `v' = v + δv`, `ω' = ω + δω`, where `(δx, δθ)` are the first six outputs of the
/// potential network and `(δv, δω)` the force network's output. `R'` is always
/// re-projected.
pub fn pure_neural_step<A: Algebra>(
    alg: &mut A,
    bound: &BoundModels<A::Vector>,
    s: &StateOf<A::V3, A::M3>,
    a: &Action,
    b0: &Observation,
) -> StateOf<A::V3, A::M3> {
    let pose = bound.du_raw(alg, &s.x, &s.r);
    let vel = bound.f_raw(alg, s, a, b0);
    let dx = alg.vec_v3(&pose, 0);
    let dth = alg.vec_v3(&pose, 3);
    let dv = alg.vec_v3(&vel, 0);
    let dw = alg.vec_v3(&vel, 3);
    let z = alg.exp_so3(&dth);
    let r = alg.m3_mul(&s.r, &z);
    let r = Integrator::reproject(alg, &r);
    StateOf {
        x: alg.v3_add(&s.x, &dx),
        r,
        v: alg.v3_add(&s.v, &dv),
        w: alg.v3_add(&s.w, &dw),
    }
}

/// Predicts `ŝ₁ … ŝₙ` with whichever path the variant selects.
#[allow(clippy::type_complexity)]
pub fn predict<A: Algebra>(
    alg: &mut A,
    bound: &BoundModels<A::Vector>,
    integ: &Integrator,
    s0: &StateOf<A::V3, A::M3>,
    actions: &[Action],
    b0: &Observation,
    n: usize,
) -> Result<(Vec<StateOf<A::V3, A::M3>>, RolloutStats), IntegratorError> {
    if bound.variant == Variant::Phys {
        if actions.len() < n {
            return Err(IntegratorError::TooFewActions {
                needed: n,
                got: actions.len(),
            });
        }
        let mut out = Vec::with_capacity(n);
        let mut s = s0.clone();
        for a in &actions[..n] {
            s = pure_neural_step(alg, bound, &s, a, b0);
            out.push(s.clone());
        }
        let stats = RolloutStats {
            steps: n,
            ..Default::default()
        };
        return Ok((out, stats));
    }
    let r = integ.rollout(alg, bound, s0, actions, b0, n)?;
    Ok((r.states, r.stats))
}

/// Plain-`f64` convenience wrapper around [`predict`].
pub fn predict_plain(
    models: &DynamicsModels,
    integ: &Integrator,
    s0: &State,
    actions: &[Action],
    b0: &Observation,
    n: usize,
) -> Result<Vec<State>, IntegratorError> {
    let bound = models.bind_plain();
    predict(&mut Plain, &bound, integ, s0, actions, b0, n).map(|(s, _)| s)
}

/// The discrete wrench the integrator would use for a continuous force.
pub fn discrete_wrench(force: Vec3, torque: Vec3, params: &VehicleParams) -> ForceWrenchOf<Vec3> {
    ForceWrenchOf::split(&mut Plain, &force, &torque, params.alpha, params.h)
}
