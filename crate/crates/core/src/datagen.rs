//! Synthetic ground-truth trajectories and the trajectory file format.
//!
//! The true vehicle rides a spring-supported, terrain-aligned potential over a
//! height field made of Gaussian bumps and is pushed by an action-driven body
//! force with damping. It is integrated with the same variational step at a
//! `substeps`-times finer resolution and subsampled to `dt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Plain;
use crate::integrator::{Dynamics, Integrator, IntegratorError, PotentialGrad, State, VehicleParams};
use crate::liegroup::{exp_so3, project_to_rotation, rot_z, Mat3, Vec3, ROTATION_TOL};
use crate::models::{Action, Observation};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("need at least {min} steps per trajectory, got {got}")]
    TooFewSteps { min: usize, got: usize },
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("trajectory {index}: {source}")]
    Integrator {
        index: usize,
        #[source]
        source: IntegratorError,
    },
    #[error("{path}: line {line}: {msg}")]
    ParseError { path: PathBuf, line: usize, msg: String },
    #[error("{path}: missing column '{column}'")]
    SchemaMismatch { path: PathBuf, column: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const MIN_STEPS: usize = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub bumps: usize,
    /// Bump centres are drawn from `[-extent, extent]²`.
    pub extent: f64,
    pub max_amplitude: f64,
    pub min_width: f64,
    pub max_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSpec {
    /// Vertical spring towards `ride_height` above the terrain.
    pub stiffness: f64,
    pub ride_height: f64,
    /// Pulls the body z-axis onto the terrain normal.
    pub align_stiffness: f64,
}

/// Body-frame force law. The action terms are the ones the learned force must
/// reproduce; the damping terms keep the vehicle on its wheels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceLaw {
    pub k_throttle: f64,
    pub k_brake: f64,
    pub k_steer: f64,
    /// Longitudinal drag `c`.
    pub drag: f64,
    pub lateral_damping: f64,
    pub vertical_damping: f64,
    pub roll_pitch_damping: f64,
    pub yaw_damping: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Std-dev of the force/torque jitter, redrawn every `dt`.
    pub sigma_f: f64,
    pub sigma_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainClass {
    pub name: String,
    /// Multiplies the bump heights.
    pub roughness: f64,
    /// Fraction of throttle force transmitted.
    pub grip: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionPolicy {
    #[default]
    RandomWalk,
    ScriptedTurns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub gravity: f64,
    pub mass: f64,
    pub inertia: [f64; 3],
    pub alpha: f64,
    pub dt: f64,
    pub substeps: usize,
    pub terrain: TerrainSpec,
    pub support: SupportSpec,
    pub force: ForceLaw,
    pub noise: NoiseSpec,
    pub tags: Vec<TerrainClass>,
    pub initial_speed: [f64; 2],
    /// Coarse steps simulated and discarded before recording starts.
    pub burn_in: usize,
    pub seed: u64,
}

pub const TERRAIN_TAGS: [&str; 7] = ["Gravel", "Plant", "Dirt", "Mud", "Puddle", "Rock", "Cement"];

impl Default for WorldSpec {
    fn default() -> Self {
        let classes = [
            (1.0, 0.8),
            (0.8, 0.7),
            (1.2, 0.75),
            (0.6, 0.5),
            (0.3, 0.6),
            (1.5, 0.9),
            (0.0, 1.0),
        ];
        Self {
            gravity: 9.81,
            mass: 1.0,
            inertia: [0.2, 0.4, 0.5],
            alpha: 0.5,
            dt: 0.1,
            substeps: 100,
            terrain: TerrainSpec {
                bumps: 60,
                extent: 80.0,
                max_amplitude: 0.4,
                min_width: 3.0,
                max_width: 8.0,
            },
            support: SupportSpec {
                stiffness: 20.0,
                ride_height: 0.5,
                align_stiffness: 2.0,
            },
            force: ForceLaw {
                k_throttle: 3.0,
                k_brake: 4.0,
                k_steer: 0.6,
                drag: 0.5,
                lateral_damping: 3.0,
                vertical_damping: 4.0,
                roll_pitch_damping: 0.5,
                yaw_damping: 0.4,
            },
            noise: NoiseSpec {
                sigma_f: 0.05,
                sigma_b: 0.05,
            },
            tags: TERRAIN_TAGS
                .iter()
                .zip(classes)
                .map(|(name, (roughness, grip))| TerrainClass {
                    name: name.to_string(),
                    roughness,
                    grip,
                })
                .collect(),
            initial_speed: [1.0, 4.0],
            burn_in: 20,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidWorld(m.to_string()));
        if !(self.gravity > 0.0) {
            return bad("gravity must be positive");
        }
        if !(self.noise.sigma_f >= 0.0 && self.noise.sigma_b >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(self.dt > 0.0) || self.substeps == 0 {
            return bad("dt must be positive and substeps at least 1");
        }
        if self.tags.is_empty() {
            return bad("at least one terrain class is required");
        }
        if self.initial_speed[0] > self.initial_speed[1] {
            return bad("initial_speed must be [min, max]");
        }
        if self.terrain.min_width <= 0.0 || self.terrain.min_width > self.terrain.max_width {
            return bad("bump widths must satisfy 0 < min_width <= max_width");
        }
        self.vehicle_params()
            .map_err(|e| DatagenError::InvalidWorld(e.to_string()))?;
        Ok(())
    }

    /// Vehicle constants at the recorded step `dt`.
    pub fn vehicle_params(&self) -> Result<VehicleParams, IntegratorError> {
        VehicleParams::new(self.mass, Mat3::diag(self.inertia), self.alpha, self.dt)
    }

    pub fn fine_h(&self) -> f64 {
        self.dt / self.substeps as f64
    }

    /// A flat, damped, noiseless world whose action force has exactly the
    /// three-gain form.
    pub fn gains_only(mut self) -> Self {
        self.terrain.max_amplitude = 0.0;
        self.force.drag = 0.0;
        self.force.lateral_damping = 0.0;
        self.force.yaw_damping = 0.0;
        self.noise = NoiseSpec {
            sigma_f: 0.0,
            sigma_b: 0.0,
        };
        for t in &mut self.tags {
            t.grip = 1.0;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bump {
    cx: f64,
    cy: f64,
    amp: f64,
    inv_s2: f64,
}

/// Height field `T(x, y) = Σ aᵢ·exp(−|p − cᵢ|² / 2sᵢ²)` scaled by a roughness.
#[derive(Debug, Clone, PartialEq)]
pub struct Terrain {
    bumps: Vec<Bump>,
}

/// Height, gradient and Hessian `(T, [Tx, Ty], [Txx, Txy, Tyy])`.
pub type TerrainJet = (f64, [f64; 2], [f64; 3]);

impl Terrain {
    pub fn new(spec: &TerrainSpec, roughness: f64, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x7e77a1);
        let amp = spec.max_amplitude * roughness;
        let bumps = (0..spec.bumps)
            .map(|_| {
                let s: f64 = rng.random_range(spec.min_width..=spec.max_width);
                Bump {
                    cx: rng.random_range(-spec.extent..=spec.extent),
                    cy: rng.random_range(-spec.extent..=spec.extent),
                    amp: amp * rng.random_range(-1.0..=1.0),
                    inv_s2: 1.0 / (s * s),
                }
            })
            .filter(|b| b.amp != 0.0)
            .collect();
        Self { bumps }
    }

    pub fn flat() -> Self {
        Self { bumps: Vec::new() }
    }

    pub fn jet(&self, x: f64, y: f64) -> TerrainJet {
        let mut t = 0.0;
        let mut g = [0.0; 2];
        let mut hs = [0.0; 3];
        for b in &self.bumps {
            let dx = x - b.cx;
            let dy = y - b.cy;
            let e = b.amp * (-0.5 * (dx * dx + dy * dy) * b.inv_s2).exp();
            let k = b.inv_s2;
            t += e;
            g[0] -= e * dx * k;
            g[1] -= e * dy * k;
            hs[0] += e * (dx * dx * k * k - k);
            hs[1] += e * dx * dy * k * k;
            hs[2] += e * (dy * dy * k * k - k);
        }
        (t, g, hs)
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.jet(x, y).0
    }

    /// Unit upward normal.
    pub fn normal(&self, x: f64, y: f64) -> Vec3 {
        let (_, g, _) = self.jet(x, y);
        Vec3::new(-g[0], -g[1], 1.0).scale(1.0 / (1.0 + g[0] * g[0] + g[1] * g[1]).sqrt())
    }
}

/// The generator's physics for one trajectory, with the force jitter of the
/// current coarse interval.
#[derive(Debug, Clone)]
pub struct TrueDynamics<'a> {
    pub world: &'a WorldSpec,
    pub terrain: &'a Terrain,
    pub grip: f64,
    pub jitter_force: Vec3,
    pub jitter_torque: Vec3,
}

impl<'a> TrueDynamics<'a> {
    pub fn new(world: &'a WorldSpec, terrain: &'a Terrain, grip: f64) -> Self {
        Self {
            world,
            terrain,
            grip,
            jitter_force: Vec3::ZERO,
            jitter_torque: Vec3::ZERO,
        }
    }

    pub fn potential_energy(&self, x: Vec3, r: &Mat3) -> f64 {
        let w = self.world;
        let (t, g, _) = self.terrain.jet(x.x, x.y);
        let d = x.z - t - w.support.ride_height;
        let n = Vec3::new(-g[0], -g[1], 1.0).scale(1.0 / (1.0 + g[0] * g[0] + g[1] * g[1]).sqrt());
        w.mass * w.gravity * x.z + 0.5 * w.support.stiffness * d * d + w.support.align_stiffness * (1.0 - n.dot(r.col(2)))
    }

    pub fn potential_grad(&self, x: Vec3, r: &Mat3) -> PotentialGrad {
        let w = self.world;
        let k_n = w.support.stiffness;
        let k_r = w.support.align_stiffness;
        let (t, g, hs) = self.terrain.jet(x.x, x.y);
        let d = x.z - t - w.support.ride_height;
        let p = Vec3::new(-g[0], -g[1], 1.0);
        let l = p.norm();
        let n = p.scale(1.0 / l);
        let up = r.col(2);
        // ∂n/∂x and ∂n/∂y
        let dn = |dp: Vec3, dl: f64| dp.scale(1.0 / l) - p.scale(dl / (l * l));
        let dn_dx = dn(Vec3::new(-hs[0], -hs[1], 0.0), (g[0] * hs[0] + g[1] * hs[1]) / l);
        let dn_dy = dn(Vec3::new(-hs[1], -hs[2], 0.0), (g[0] * hs[1] + g[1] * hs[2]) / l);
        let du_dx = Vec3::new(
            -k_n * d * g[0] - k_r * dn_dx.dot(up),
            -k_n * d * g[1] - k_r * dn_dy.dot(up),
            w.mass * w.gravity + k_n * d,
        );
        let mut du_dr = Mat3::ZERO;
        for i in 0..3 {
            du_dr.0[3 * i + 2] = -k_r * n[i];
        }
        PotentialGrad { du_dx, du_dr }
    }

    /// Continuous body-frame force and torque.
    pub fn wrench(&self, s: &State, a: &Action) -> (Vec3, Vec3) {
        let f = &self.world.force;
        let vb = s.r.tr_mul_vec(s.v);
        let force = Vec3::new(
            self.grip * f.k_throttle * a.throttle - f.k_brake * a.brake - f.drag * vb.x,
            -f.lateral_damping * vb.y,
            -f.vertical_damping * vb.z,
        ) + self.jitter_force;
        let torque = Vec3::new(
            -f.roll_pitch_damping * s.w.x,
            -f.roll_pitch_damping * s.w.y,
            f.k_steer * a.steering - f.yaw_damping * s.w.z,
        ) + self.jitter_torque;
        (force, torque)
    }

    pub fn energy(&self, s: &State) -> f64 {
        let j = Mat3::diag(self.world.inertia);
        0.5 * self.world.mass * s.v.dot(s.v) + 0.5 * s.w.dot(j * s.w) + self.potential_energy(s.x, &s.r)
    }
}

impl Dynamics<Plain> for TrueDynamics<'_> {
    fn potential(&self, _alg: &mut Plain, x: &Vec3, r: &Mat3) -> PotentialGrad {
        self.potential_grad(*x, r)
    }

    fn force(&self, _alg: &mut Plain, s: &State, a: &Action, _b0: &Observation) -> (Vec3, Vec3) {
        self.wrench(s, a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub dt: f64,
    pub terrain_tag: String,
    pub b0: Observation,
    pub seed: u64,
    pub states: Vec<State>,
    /// `actions[t]` is applied between `states[t]` and `states[t + 1]`.
    pub actions: Vec<Action>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

struct Policy {
    kind: ActionPolicy,
    current: Action,
    brake_left: usize,
    period: f64,
    phase: f64,
}

impl Policy {
    fn new(kind: ActionPolicy, rng: &mut impl Rng) -> Self {
        Self {
            kind,
            current: Action::new(rng.random_range(0.2..0.7), rng.random_range(-0.3..0.3), 0.0),
            brake_left: 0,
            period: rng.random_range(4.0..8.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn next(&mut self, t: f64, s: &State, rng: &mut impl Rng) -> Action {
        match self.kind {
            ActionPolicy::ScriptedTurns => {
                let steer = 0.6 * (std::f64::consts::TAU * t / self.period + self.phase).sin();
                self.current = Action::new(0.5, steer, 0.0);
            }
            ActionPolicy::RandomWalk => {
                let c = self.current;
                let throttle = c.throttle + 0.1 * (0.45 - c.throttle) + 0.12 * rng.sample::<f64, _>(StandardNormal);
                let steering = 0.9 * c.steering + 0.2 * rng.sample::<f64, _>(StandardNormal);
                let speed = s.r.tr_mul_vec(s.v).x;
                let brake = if self.brake_left > 0 {
                    self.brake_left -= 1;
                    c.brake
                } else if speed > 3.0 && rng.random::<f64>() < 0.04 {
                    self.brake_left = 4;
                    rng.random_range(0.3..0.8)
                } else {
                    0.0
                };
                let throttle = if brake > 0.0 { 0.0 } else { throttle };
                self.current = Action::new(throttle, steering, brake);
            }
        }
        self.current
    }
}

fn trajectory_seed(master: u64, index: usize) -> u64 {
    master ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Rotation taking `e_z` onto the unit vector `n`.
fn align_up(n: Vec3) -> Mat3 {
    let ez = Vec3::new(0.0, 0.0, 1.0);
    let axis = ez.cross(n);
    let s = axis.norm();
    if s < 1e-15 {
        return Mat3::IDENTITY;
    }
    exp_so3(axis.scale(s.atan2(ez.dot(n)) / s))
}

/// Synthetic trajectories, one terrain tag each (assigned round-robin).
pub fn generate(
    world: &WorldSpec,
    n_traj: usize,
    steps: usize,
    policy: ActionPolicy,
) -> Result<Vec<TrajectoryRecord>, DatagenError> {
    if steps < MIN_STEPS {
        return Err(DatagenError::TooFewSteps {
            min: MIN_STEPS,
            got: steps,
        });
    }
    world.validate()?;
    (0..n_traj)
        .into_par_iter()
        .map(|i| generate_one(world, i, steps, policy))
        .collect()
}

fn generate_one(world: &WorldSpec, index: usize, steps: usize, policy: ActionPolicy) -> Result<TrajectoryRecord, DatagenError> {
    let seed = trajectory_seed(world.seed, index);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let class = &world.tags[index % world.tags.len()];
    let terrain = Terrain::new(&world.terrain, class.roughness, world.seed);
    let fine = Integrator::new(
        VehicleParams::new(world.mass, Mat3::diag(world.inertia), world.alpha, world.fine_h())
            .map_err(|e| DatagenError::InvalidWorld(e.to_string()))?,
    );
    let mut dynamics = TrueDynamics::new(world, &terrain, class.grip);

    let x0 = rng.random_range(-20.0..20.0);
    let y0 = rng.random_range(-20.0..20.0);
    let z0 = terrain.height(x0, y0) + world.support.ride_height - world.mass * world.gravity / world.support.stiffness;
    let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let r0 = align_up(terrain.normal(x0, y0)) * rot_z(yaw);
    let speed = rng.random_range(world.initial_speed[0]..=world.initial_speed[1]);
    let mut s = State {
        x: Vec3::new(x0, y0, z0),
        r: r0,
        v: r0 * Vec3::new(speed, 0.0, 0.0),
        w: Vec3::ZERO,
    };

    let mut pol = Policy::new(policy, &mut rng);
    let mut states = Vec::with_capacity(steps);
    let mut actions = Vec::with_capacity(steps);
    let mut b0 = Observation::default();
    let no_obs = Observation::default();
    let total = world.burn_in + steps;
    for k in 0..total {
        let t = k as f64 * world.dt;
        let a = pol.next(t, &s, &mut rng);
        if k == world.burn_in {
            b0 = wheel_observation(&s, &a, class.grip, world.noise.sigma_b, &mut rng);
        }
        if k >= world.burn_in {
            states.push(s.clone());
            actions.push(a);
        }
        if k + 1 == total {
            break;
        }
        let mut draw = || world.noise.sigma_f * rng.sample::<f64, _>(StandardNormal);
        dynamics.jitter_force = Vec3::new(draw(), draw(), draw());
        dynamics.jitter_torque = Vec3::new(draw(), draw(), draw());
        let held = vec![a; world.substeps];
        let out = fine
            .rollout(&mut Plain, &dynamics, &s, &held, &no_obs, world.substeps)
            .map_err(|source| DatagenError::Integrator { index, source })?;
        s = out.states.last().expect("substeps >= 1").clone();
    }
    Ok(TrajectoryRecord {
        dt: world.dt,
        terrain_tag: class.name.clone(),
        b0,
        seed,
        states,
        actions,
    })
}

/// Wheel-speed discrepancies: slip from lost grip under throttle, rear wheels
/// slipping more, plus the left/right split from yaw rate.
fn wheel_observation(s: &State, a: &Action, grip: f64, sigma: f64, rng: &mut impl Rng) -> Observation {
    let base = (1.0 - grip) * (0.5 + 1.5 * a.throttle);
    let yaw = 0.3 * s.w.z;
    let mut wheel_disc = [base - yaw, base + yaw, 1.2 * base - yaw, 1.2 * base + yaw];
    for w in &mut wheel_disc {
        *w += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    Observation { wheel_disc }
}

pub const CSV_COLUMNS: [&str; 22] = [
    "t", "x", "y", "z", "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22", "vx", "vy", "vz", "wx", "wy",
    "wz", "throttle", "steering", "brake",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dt: f64,
    pub terrain_tag: String,
    pub b0: Observation,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub csv: String,
    pub sidecar: String,
    pub terrain_tag: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
    pub tags: Vec<String>,
    pub world: Option<WorldSpec>,
    pub policy: Option<ActionPolicy>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn sidecar_for(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes one trajectory as `<path>` plus its `.json` sidecar.
pub fn write_record(path: &Path, rec: &TrajectoryRecord) -> Result<(), DatagenError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(CSV_COLUMNS).map_err(|e| csv_io(path, e))?;
    let mut row: Vec<String> = Vec::with_capacity(CSV_COLUMNS.len());
    for (k, (s, a)) in rec.states.iter().zip(&rec.actions).enumerate() {
        row.clear();
        row.push((k as f64 * rec.dt).to_string());
        row.extend(s.x.to_array().iter().map(f64::to_string));
        row.extend(s.r.0.iter().map(f64::to_string));
        row.extend(s.v.to_array().iter().map(f64::to_string));
        row.extend(s.w.to_array().iter().map(f64::to_string));
        row.extend(a.to_array().iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(io_err(path))?;
    let side = Sidecar {
        dt: rec.dt,
        terrain_tag: rec.terrain_tag.clone(),
        b0: rec.b0,
        seed: rec.seed,
    };
    let side_path = sidecar_for(path);
    fs::write(&side_path, serde_json::to_string_pretty(&side).expect("sidecar serializes")).map_err(io_err(&side_path))
}

fn csv_io(path: &Path, e: csv::Error) -> DatagenError {
    DatagenError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Reads a trajectory CSV and its sidecar. Columns are located by header name;
/// extra columns are ignored. Rotations off SO(3) by more than `1e-9` but less
/// than `1e-6` are re-projected; worse ones are rejected.
pub fn read_record(path: &Path) -> Result<TrajectoryRecord, DatagenError> {
    let side_path = sidecar_for(path);
    let side_text = fs::read_to_string(&side_path).map_err(io_err(&side_path))?;
    let side: Sidecar = serde_json::from_str(&side_text).map_err(|e| DatagenError::ParseError {
        path: side_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers = rdr.headers().map_err(|e| parse_err(path, 1, e))?.clone();
    let mut idx = [0usize; 22];
    for (slot, col) in idx.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == col)
            .ok_or_else(|| DatagenError::SchemaMismatch {
                path: path.to_path_buf(),
                column: col.to_string(),
            })?;
    }
    let mut states = Vec::new();
    let mut actions = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| parse_err(path, line, e))?;
        let mut vals = [0.0; 22];
        for (v, (&i, col)) in vals.iter_mut().zip(idx.iter().zip(CSV_COLUMNS)) {
            let field = row.get(i).ok_or_else(|| DatagenError::ParseError {
                path: path.to_path_buf(),
                line,
                msg: format!("missing field '{col}'"),
            })?;
            *v = field.trim().parse::<f64>().map_err(|e| DatagenError::ParseError {
                path: path.to_path_buf(),
                line,
                msg: format!("column '{col}': {e}"),
            })?;
            if !v.is_finite() {
                return Err(DatagenError::ParseError {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("column '{col}' is not finite"),
                });
            }
        }
        let mut r = Mat3::from_slice(&vals[4..13]);
        let drift = r.orthogonality_error();
        if drift > 1e-6 || r.det() <= 0.0 {
            return Err(DatagenError::ParseError {
                path: path.to_path_buf(),
                line,
                msg: format!("rotation is not orthonormal (error {drift:e})"),
            });
        }
        if drift > ROTATION_TOL {
            r = project_to_rotation(&r).map_err(|e| DatagenError::ParseError {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            })?;
        }
        states.push(State {
            x: Vec3::from_slice(&vals[1..4]),
            r,
            v: Vec3::from_slice(&vals[13..16]),
            w: Vec3::from_slice(&vals[16..19]),
        });
        actions.push(Action::new(vals[19], vals[20], vals[21]));
    }
    Ok(TrajectoryRecord {
        dt: side.dt,
        terrain_tag: side.terrain_tag,
        b0: side.b0,
        seed: side.seed,
        states,
        actions,
    })
}

fn parse_err(path: &Path, line: usize, e: csv::Error) -> DatagenError {
    DatagenError::ParseError {
        path: path.to_path_buf(),
        line: e.position().map_or(line, |p| p.line() as usize),
        msg: e.to_string(),
    }
}

/// Writes `traj_NNNN.csv` files, their sidecars and `manifest.json` into `dir`.
pub fn write_dataset(
    dir: &Path,
    records: &[TrajectoryRecord],
    world: Option<&WorldSpec>,
    policy: Option<ActionPolicy>,
) -> Result<Manifest, DatagenError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let name = format!("traj_{i:04}.csv");
        let path = dir.join(&name);
        write_record(&path, rec)?;
        files.push(ManifestEntry {
            sidecar: sidecar_for(Path::new(&name)).to_string_lossy().into_owned(),
            csv: name,
            terrain_tag: rec.terrain_tag.clone(),
            rows: rec.len(),
        });
    }
    let mut tags: Vec<String> = Vec::new();
    for r in records {
        if !tags.contains(&r.terrain_tag) {
            tags.push(r.terrain_tag.clone());
        }
    }
    let manifest = Manifest {
        files,
        tags,
        world: world.cloned(),
        policy,
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&mpath))?;
    Ok(manifest)
}

/// Loads every trajectory listed in `dir/manifest.json`, or every `*.csv` in
/// name order when there is no manifest.
pub fn read_dataset(dir: &Path) -> Result<Vec<TrajectoryRecord>, DatagenError> {
    if !dir.is_dir() {
        return Err(DatagenError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
        });
    }
    let mpath = dir.join(MANIFEST_FILE);
    let files: Vec<PathBuf> = if mpath.exists() {
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| DatagenError::ParseError {
            path: mpath.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        m.files.iter().map(|f| dir.join(&f.csv)).collect()
    } else {
        let mut v: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        v.sort();
        v
    };
    files.iter().map(|p| read_record(p)).collect()
}

/// Trajectory counts per terrain tag.
pub fn tag_counts(records: &[TrajectoryRecord]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.terrain_tag.clone()).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world() -> WorldSpec {
        WorldSpec {
            burn_in: 5,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn too_few_steps() {
        assert!(matches!(
            generate(&small_world(), 1, 10, ActionPolicy::RandomWalk),
            Err(DatagenError::TooFewSteps { min: 21, got: 10 })
        ));
    }

    #[test]
    fn invalid_world() {
        let mut w = small_world();
        w.gravity = 0.0;
        assert!(matches!(generate(&w, 1, 30, ActionPolicy::RandomWalk), Err(DatagenError::InvalidWorld(_))));
        let mut w = small_world();
        w.noise.sigma_b = -1.0;
        assert!(w.validate().is_err());
    }

    #[test]
    fn terrain_derivatives_match_fd() {
        let spec = WorldSpec::default().terrain;
        let t = Terrain::new(&spec, 1.0, 3);
        let eps = 1e-5;
        for &(x, y) in &[(0.3, -1.2), (5.0, 7.5), (-12.0, 3.3)] {
            let (_, g, hs) = t.jet(x, y);
            let gx = (t.height(x + eps, y) - t.height(x - eps, y)) / (2.0 * eps);
            let gy = (t.height(x, y + eps) - t.height(x, y - eps)) / (2.0 * eps);
            assert!((gx - g[0]).abs() < 1e-8 && (gy - g[1]).abs() < 1e-8);
            let hxx = (t.jet(x + eps, y).1[0] - t.jet(x - eps, y).1[0]) / (2.0 * eps);
            let hxy = (t.jet(x, y + eps).1[0] - t.jet(x, y - eps).1[0]) / (2.0 * eps);
            let hyy = (t.jet(x, y + eps).1[1] - t.jet(x, y - eps).1[1]) / (2.0 * eps);
            assert!((hxx - hs[0]).abs() < 1e-7 && (hxy - hs[1]).abs() < 1e-7 && (hyy - hs[2]).abs() < 1e-7);
        }
    }

    #[test]
    fn potential_gradient_matches_fd() {
        let world = WorldSpec::default();
        let terrain = Terrain::new(&world.terrain, 1.5, 8);
        let d = TrueDynamics::new(&world, &terrain, 1.0);
        let x = Vec3::new(2.0, -3.0, 0.4);
        let r = exp_so3(Vec3::new(0.1, -0.2, 0.7));
        let g = d.potential_grad(x, &r);
        let eps = 1e-6;
        for k in 0..3 {
            let mut e = Vec3::ZERO;
            e[k] = eps;
            let fd = (d.potential_energy(x + e, &r) - d.potential_energy(x - e, &r)) / (2.0 * eps);
            assert!((fd - g.du_dx[k]).abs() < 1e-7, "{k}: {fd} {}", g.du_dx[k]);
        }
        for k in 0..9 {
            let mut rp = r;
            let mut rq = r;
            rp.0[k] += eps;
            rq.0[k] -= eps;
            let fd = (d.potential_energy(x, &rp) - d.potential_energy(x, &rq)) / (2.0 * eps);
            assert!((fd - g.du_dr.0[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn level_rest_is_equilibrium() {
        let mut world = small_world().gains_only();
        world.noise = NoiseSpec {
            sigma_f: 0.0,
            sigma_b: 0.0,
        };
        let terrain = Terrain::flat();
        let d = TrueDynamics::new(&world, &terrain, 1.0);
        let fine = Integrator::new(VehicleParams::new(1.0, Mat3::diag(world.inertia), 0.5, world.fine_h()).unwrap());
        let z = world.support.ride_height - world.mass * world.gravity / world.support.stiffness;
        let s0 = State::at_rest(Vec3::new(1.0, 2.0, z), Mat3::IDENTITY);
        let acts = vec![Action::default(); 1000];
        let out = fine.rollout(&mut Plain, &d, &s0, &acts, &Observation::default(), 1000).unwrap();
        for s in &out.states {
            assert!(s.v.norm() < 1e-12);
            assert!((s.x - s0.x).norm() < 1e-12);
        }
    }

    #[test]
    fn straight_line_on_flat_frictionless_ground() {
        let world = small_world().gains_only();
        let terrain = Terrain::flat();
        let d = TrueDynamics::new(&world, &terrain, 1.0);
        let fine = Integrator::new(VehicleParams::new(1.0, Mat3::diag(world.inertia), 0.5, world.fine_h()).unwrap());
        let z = world.support.ride_height - world.mass * world.gravity / world.support.stiffness;
        let mut s = State::at_rest(Vec3::new(0.0, 0.0, z), Mat3::IDENTITY);
        s.v = Vec3::new(1.0, 0.0, 0.0);
        let acts = vec![Action::default(); 100];
        for step in 1..=20 {
            let out = fine.rollout(&mut Plain, &d, &s, &acts, &Observation::default(), 100).unwrap();
            s = out.states.last().unwrap().clone();
            assert!((s.x.x - world.dt * step as f64).abs() < 1e-10);
            assert!(s.x.y.abs() < 1e-12 && (s.x.z - z).abs() < 1e-12);
        }
    }

    #[test]
    fn conservative_energy_is_bounded() {
        let mut world = small_world();
        world.force = ForceLaw {
            k_throttle: 0.0,
            k_brake: 0.0,
            k_steer: 0.0,
            drag: 0.0,
            lateral_damping: 0.0,
            vertical_damping: 0.0,
            roll_pitch_damping: 0.0,
            yaw_damping: 0.0,
        };
        let terrain = Terrain::new(&world.terrain, 1.0, 5);
        let d = TrueDynamics::new(&world, &terrain, 1.0);
        let fine = Integrator::new(VehicleParams::new(1.0, Mat3::diag(world.inertia), 0.5, world.fine_h()).unwrap());
        let (x0, y0) = (3.0, -4.0);
        let z0 = terrain.height(x0, y0) + world.support.ride_height - world.gravity / world.support.stiffness;
        let s0 = State {
            x: Vec3::new(x0, y0, z0 + 0.02),
            r: exp_so3(Vec3::new(0.05, -0.03, 0.4)),
            v: Vec3::new(0.8, 0.3, 0.0),
            w: Vec3::new(0.1, -0.1, 0.3),
        };
        let e0 = d.energy(&s0);
        let acts = vec![Action::default(); 10_000];
        let out = fine.rollout(&mut Plain, &d, &s0, &acts, &Observation::default(), 10_000).unwrap();
        let dev: Vec<f64> = out.states.iter().map(|s| (d.energy(s) - e0).abs()).collect();
        let max_dev = dev.iter().cloned().fold(0.0, f64::max);
        assert!(max_dev <= 1e-6, "energy deviation {max_dev:e}");
        let first = dev[..5000].iter().cloned().fold(0.0, f64::max);
        let second = dev[5000..].iter().cloned().fold(0.0, f64::max);
        assert!(second <= 2.0 * first + 1e-9, "energy drift grows: {first:e} → {second:e}");
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let w = small_world();
        let a = generate(&w, 7, 25, ActionPolicy::RandomWalk).unwrap();
        let b = generate(&w, 7, 25, ActionPolicy::RandomWalk).unwrap();
        assert_eq!(a, b);
        assert_eq!(tag_counts(&a).len(), 7);
        for rec in &a {
            assert_eq!(rec.len(), 25);
            assert!(rec.states.iter().all(State::is_valid));
            assert!(TERRAIN_TAGS.contains(&rec.terrain_tag.as_str()));
        }
        let s = generate(&w, 2, 25, ActionPolicy::ScriptedTurns).unwrap();
        assert!(s[0].states.iter().all(State::is_valid));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let recs = generate(&small_world(), 3, 22, ActionPolicy::RandomWalk).unwrap();
        write_dataset(dir.path(), &recs, Some(&small_world()), Some(ActionPolicy::RandomWalk)).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let header: Vec<&str> = CSV_COLUMNS.iter().copied().filter(|c| *c != "wy").collect();
        fs::write(&path, header.join(",") + "\n").unwrap();
        let side = Sidecar {
            dt: 0.1,
            terrain_tag: "Dirt".into(),
            b0: Observation::default(),
            seed: 0,
        };
        fs::write(sidecar_for(&path), serde_json::to_string(&side).unwrap()).unwrap();
        match read_record(&path) {
            Err(DatagenError::SchemaMismatch { column, .. }) => assert_eq!(column, "wy"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_number_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let mut text = CSV_COLUMNS.join(",") + "\n";
        let good = "0,0,0,0,1,0,0,0,1,0,0,0,1,0,0,0,0,0,0,0,0,0\n";
        text.push_str(good);
        text.push_str(&good.replacen("0,0,0,0,1", "0,abc,0,0,1", 1));
        fs::write(&path, text).unwrap();
        let side = Sidecar {
            dt: 0.1,
            terrain_tag: "Dirt".into(),
            b0: Observation::default(),
            seed: 0,
        };
        fs::write(sidecar_for(&path), serde_json::to_string(&side).unwrap()).unwrap();
        match read_record(&path) {
            Err(DatagenError::ParseError { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("'x'"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
