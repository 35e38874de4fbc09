//! Comparison models: constant velocity, a Kalman filter with a learned
//! measurement network (KF-NS), and the pure-neural variant.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{SMatrix, SVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Algebra, Tape};
use crate::datagen::TrajectoryRecord;
use crate::integrator::State;
use crate::liegroup::{exp_so3, right_jacobian, Vec3};
use crate::models::{f_spec, sidecar_path, Action, Observation, FORCE_INPUT_DIM};
use crate::nn::{self, adam_step, clip_global_norm, Activation, AdamConfig, AdamState, BoundMlp, Mlp, MlpSpec, NnError};
use crate::training::{self, Split, Window};

pub use crate::models::pure_neural_step;

type Mat12 = SMatrix<f64, 12, 12>;
type Mat6 = SMatrix<f64, 6, 6>;
type Mat12x6 = SMatrix<f64, 12, 6>;
type Vec12 = SVector<f64, 12>;
type Vec6 = SVector<f64, 6>;

/// Eigenvalues below this (after symmetrization) count as a PSD violation.
pub const PSD_TOL: f64 = -1e-10;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("covariance not positive semidefinite at step {step} (min eigenvalue {min_eig:e})")]
    CovarianceNotPSD { step: usize, min_eig: f64 },
    #[error("need {needed} actions, got {got}")]
    TooFewActions { needed: usize, got: usize },
    #[error("invalid KF-NS config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: std::path::PathBuf, msg: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// `x' = x + h·v`, `R' = R·exp(h·ω)`, velocities held.
pub fn constant_velocity_step(s: &State, h: f64) -> State {
    State {
        x: s.x + s.v.scale(h),
        r: s.r * exp_so3(s.w.scale(h)),
        v: s.v,
        w: s.w,
    }
}

pub fn constant_velocity_rollout(s0: &State, h: f64, n: usize) -> Vec<State> {
    let mut out = Vec::with_capacity(n);
    let mut s = s0.clone();
    for _ in 0..n {
        s = constant_velocity_step(&s, h);
        out.push(s.clone());
    }
    out
}

/// Diagonal noise over the tangent coordinates `(δx, δθ, δv, δω)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfNoise {
    /// Process noise added every predict step.
    pub q: [f64; 12],
    /// Measurement noise on `(v, ω)`.
    pub rm: [f64; 6],
    /// Initial covariance.
    pub p0: [f64; 12],
}

impl KfNoise {
    /// `q_scale` on every process channel and `rm_scale` on every measurement channel.
    pub fn isotropic(q_scale: f64, rm_scale: f64) -> Self {
        Self {
            q: [q_scale; 12],
            rm: [rm_scale; 6],
            p0: [q_scale; 12],
        }
    }

    fn validate(&self) -> Result<(), BaselineError> {
        let ok = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x >= 0.0);
        if ok(&self.q) && ok(&self.rm) && ok(&self.p0) {
            Ok(())
        } else {
            Err(BaselineError::Config("noise entries must be finite and ≥ 0".into()))
        }
    }
}

impl Default for KfNoise {
    fn default() -> Self {
        Self::isotropic(1e-2, 1e-2)
    }
}

/// Filter estimate: mean state and 12×12 tangent covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct KfState {
    pub mean: State,
    pub covariance: Mat12,
}

/// Measurement network `m_θ(s, a, b₀)` with the same input and shape as `f_θ`.
/// Its output is the body-frame change `(R_tᵀ(v_{t+1} − v_t), ω_{t+1} − ω_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KfnsModel {
    pub net: Mlp,
    pub noise: KfNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct KfnsDescriptor {
    kind: String,
    net: MlpSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfnsSidecar {
    pub format: String,
    pub kind: String,
    pub net: MlpSpec,
    pub param_count: usize,
    pub noise: KfNoise,
    pub dt: f64,
}

pub fn measurement_input(s: &State, a: &Action, b0: &Observation) -> [f64; FORCE_INPUT_DIM] {
    let mut f = [0.0; FORCE_INPUT_DIM];
    f[..3].copy_from_slice(&s.r.tr_mul_vec(s.v).to_array());
    f[3..6].copy_from_slice(&s.w.to_array());
    f[6..9].copy_from_slice(&a.to_array());
    f[9..].copy_from_slice(&b0.wheel_disc);
    f
}

fn measurement_target(s: &State, next: &State) -> [f64; 6] {
    let dv = s.r.tr_mul_vec(next.v - s.v);
    let dw = next.w - s.w;
    [dv.x, dv.y, dv.z, dw.x, dw.y, dw.z]
}

impl KfnsModel {
    pub fn zeros(activation: Activation) -> Self {
        Self {
            net: Mlp::zeros(f_spec(activation)),
            noise: KfNoise::default(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Pseudo-measurement of `(v, ω)` at `t + 1`.
    pub fn measure(&self, s: &State, a: &Action, b0: &Observation) -> Vec6 {
        let out = self
            .net
            .forward(&measurement_input(s, a, b0))
            .expect("input width matches spec");
        let dv = s.r.mul_vec(Vec3::new(out[0], out[1], out[2]));
        let v = s.v + dv;
        let w = s.w + Vec3::new(out[3], out[4], out[5]);
        Vec6::new(v.x, v.y, v.z, w.x, w.y, w.z)
    }

    pub fn initial(&self, s0: &State) -> KfState {
        KfState {
            mean: s0.clone(),
            covariance: Mat12::from_diagonal(&Vec12::from_row_slice(&self.noise.p0)),
        }
    }

    /// Predict with constant velocity, then fuse the measured `(v, ω)`.
    pub fn step(
        &self,
        kf: &KfState,
        a: &Action,
        b0: &Observation,
        h: f64,
        step: usize,
    ) -> Result<KfState, BaselineError> {
        let s = &kf.mean;
        let z = self.measure(s, a, b0);
        let pred = constant_velocity_step(s, h);

        // Transition Jacobian with right-perturbed rotation.
        let mut f = Mat12::identity();
        let ad = exp_so3(s.w.scale(h)).transpose();
        let jr = right_jacobian(s.w.scale(h)).scale(h);
        for i in 0..3 {
            f[(i, 6 + i)] = h;
            for j in 0..3 {
                f[(3 + i, 3 + j)] = ad.get(i, j);
                f[(3 + i, 9 + j)] = jr.get(i, j);
            }
        }
        let q = Mat12::from_diagonal(&Vec12::from_row_slice(&self.noise.q));
        let p = repair(f * kf.covariance * f.transpose() + q, step)?;

        let mut hm = SMatrix::<f64, 6, 12>::zeros();
        for i in 0..6 {
            hm[(i, 6 + i)] = 1.0;
        }
        let rm = Mat6::from_diagonal(&Vec6::from_row_slice(&self.noise.rm));
        let s_mat = hm * p * hm.transpose() + rm;
        let gain: Mat12x6 = match s_mat.try_inverse() {
            Some(inv) => p * hm.transpose() * inv,
            None => Mat12x6::zeros(),
        };
        let y = z - Vec6::new(pred.v.x, pred.v.y, pred.v.z, pred.w.x, pred.w.y, pred.w.z);
        let dx = gain * y;
        let ikh = Mat12::identity() - gain * hm;
        let p = repair(ikh * p * ikh.transpose() + gain * rm * gain.transpose(), step)?;

        let mean = State {
            x: pred.x,
            r: pred.r,
            v: pred.v + Vec3::new(dx[6], dx[7], dx[8]),
            w: pred.w + Vec3::new(dx[9], dx[10], dx[11]),
        };
        Ok(KfState { mean, covariance: p })
    }

    pub fn rollout_filter(
        &self,
        s0: &State,
        actions: &[Action],
        b0: &Observation,
        h: f64,
        n: usize,
    ) -> Result<Vec<KfState>, BaselineError> {
        if actions.len() < n {
            return Err(BaselineError::TooFewActions {
                needed: n,
                got: actions.len(),
            });
        }
        let mut kf = self.initial(s0);
        let mut out = Vec::with_capacity(n);
        for (t, a) in actions[..n].iter().enumerate() {
            kf = self.step(&kf, a, b0, h, t)?;
            out.push(kf.clone());
        }
        Ok(out)
    }

    pub fn rollout(
        &self,
        s0: &State,
        actions: &[Action],
        b0: &Observation,
        h: f64,
        n: usize,
    ) -> Result<Vec<State>, BaselineError> {
        Ok(self
            .rollout_filter(s0, actions, b0, h, n)?
            .into_iter()
            .map(|k| k.mean)
            .collect())
    }

    fn descriptor(&self) -> KfnsDescriptor {
        KfnsDescriptor {
            kind: "kfns".into(),
            net: self.net.spec.clone(),
        }
    }

    pub fn save(&self, path: &Path, dt: f64) -> Result<(), BaselineError> {
        let digest = nn::spec_digest(&self.descriptor());
        let mut arrays: Vec<&[f64]> = Vec::new();
        for l in &self.net.layers {
            arrays.push(&l.w);
            arrays.push(&l.b);
        }
        let file = File::create(path).map_err(NnError::Io)?;
        let mut w = BufWriter::new(file);
        nn::write_container(&mut w, &digest, &arrays)?;
        std::io::Write::flush(&mut w).map_err(NnError::Io)?;
        let side = KfnsSidecar {
            format: String::from_utf8_lossy(nn::CONTAINER_MAGIC).into_owned(),
            kind: "kfns".into(),
            net: self.net.spec.clone(),
            param_count: self.param_count(),
            noise: self.noise.clone(),
            dt,
        };
        let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
        std::fs::write(sidecar_path(path), text).map_err(NnError::Io)?;
        Ok(())
    }

    /// Returns the model and the timestep it was trained for.
    pub fn load(path: &Path) -> Result<(Self, f64), BaselineError> {
        let bad = |msg: String| BaselineError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let text = std::fs::read_to_string(sidecar_path(path)).map_err(|e| bad(format!("cannot read sidecar: {e}")))?;
        let side: KfnsSidecar = serde_json::from_str(&text).map_err(|e| bad(format!("bad sidecar: {e}")))?;
        if side.kind != "kfns" {
            return Err(bad(format!("not a KF-NS checkpoint (kind {})", side.kind)));
        }
        let file = File::open(path).map_err(NnError::Io)?;
        let (digest, arrays) = nn::read_container(BufReader::new(file))?;
        let mut model = KfnsModel {
            net: Mlp::zeros(side.net),
            noise: side.noise,
        };
        if digest != nn::spec_digest(&model.descriptor()) {
            return Err(bad("weight container digest does not match sidecar".into()));
        }
        let flat = arrays.concat();
        if flat.len() != model.param_count() {
            return Err(bad(format!("expected {} values, found {}", model.param_count(), flat.len())));
        }
        model.net.load_flat(&flat);
        model.noise.validate()?;
        Ok((model, side.dt))
    }
}

/// Symmetrizes and floors negative eigenvalues at zero. Fails when the input is
/// not finite or an eigenvalue is below [`PSD_TOL`] by more than round-off can explain.
fn repair(p: Mat12, step: usize) -> Result<Mat12, BaselineError> {
    let sym = (p + p.transpose()) * 0.5;
    if !sym.iter().all(|v| v.is_finite()) {
        return Err(BaselineError::CovarianceNotPSD {
            step,
            min_eig: f64::NAN,
        });
    }
    let eig = SymmetricEigen::new(sym);
    let min_eig = eig.eigenvalues.min();
    if min_eig >= 0.0 {
        return Ok(sym);
    }
    let scale = eig.eigenvalues.amax().max(1.0);
    if min_eig < -1e-6 * scale {
        return Err(BaselineError::CovarianceNotPSD { step, min_eig });
    }
    let floored = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(eig.eigenvectors * Mat12::from_diagonal(&floored) * eig.eigenvectors.transpose())
}

pub fn min_eigenvalue(p: &Mat12) -> f64 {
    SymmetricEigen::new((p + p.transpose()) * 0.5).eigenvalues.min()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KfnsConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub activation: Activation,
    /// Candidate scalar process-noise levels.
    pub q_grid: Vec<f64>,
    /// Candidate scalar measurement-noise levels.
    pub rm_grid: Vec<f64>,
    /// Rollout length and window stride for the noise search.
    pub horizon: usize,
    pub stride: usize,
}

impl Default for KfnsConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
            activation: Activation::Tanh,
            q_grid: vec![1e-4, 1e-3, 1e-2, 1e-1],
            rm_grid: vec![1e-4, 1e-3, 1e-2, 1e-1],
            horizon: 20,
            stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfnsLog {
    pub config: KfnsConfig,
    pub train_samples: usize,
    /// Mean squared measurement error per epoch.
    pub epoch_mse: Vec<f64>,
    /// `(q, rm, validation loss)` for each grid point.
    pub grid: Vec<(f64, f64, f64)>,
    pub chosen: (f64, f64),
}

/// One transition `(t → t + 1)` of one trajectory.
#[derive(Debug, Clone, Copy)]
struct Transition {
    traj: usize,
    t: usize,
}

fn transitions(records: &[TrajectoryRecord], trajs: &[usize]) -> Vec<Transition> {
    let mut out = Vec::new();
    for &traj in trajs {
        let r = &records[traj];
        let len = r.states.len().min(r.actions.len() + 1);
        out.extend((0..len.saturating_sub(1)).map(|t| Transition { traj, t }));
    }
    out
}

fn sample_grad(net: &Mlp, records: &[TrajectoryRecord], tr: &Transition) -> (f64, Vec<f64>) {
    let r = &records[tr.traj];
    let s = &r.states[tr.t];
    let input = measurement_input(s, &r.actions[tr.t], &r.b0);
    let target = measurement_target(s, &r.states[tr.t + 1]);
    let mut tape = Tape::with_capacity(64, 1 << 14);
    let bound = BoundMlp::bind_tape(net, &mut tape);
    let x = tape.vec_const(&input);
    let out = bound.forward(&mut tape, &x);
    let pred = tape.vec_val(&out);
    let seed: Vec<f64> = pred.iter().zip(&target).map(|(p, t)| 2.0 * (p - t)).collect();
    let se: f64 = pred.iter().zip(&target).map(|(p, t)| (p - t).powi(2)).sum();
    let grads = tape.backward(out, &seed).expect("fresh tape");
    let mut g = Vec::with_capacity(net.param_count());
    bound.collect_grads(&grads, &mut g);
    (se, g)
}

fn validation_loss(
    model: &KfnsModel,
    records: &[TrajectoryRecord],
    wins: &[Window],
    horizon: usize,
    h: f64,
) -> f64 {
    let losses: Vec<f64> = wins
        .par_iter()
        .map(|w| {
            let s = training::sample(records, w, horizon);
            model
                .rollout(s.s0, s.actions, s.b0, h, horizon)
                .ok()
                .and_then(|p| training::loss(&p, s.gt).ok())
                .map_or(f64::INFINITY, |l| l.total)
        })
        .collect();
    losses.iter().sum::<f64>() / losses.len().max(1) as f64
}

/// Fits the measurement net by one-step regression on the training
/// trajectories, then picks `(Q, Rm)` on validation rollouts.
pub fn train_kfns(
    records: &[TrajectoryRecord],
    split: &Split,
    cfg: &KfnsConfig,
) -> Result<(KfnsModel, KfnsLog), BaselineError> {
    if cfg.batch_size == 0 || cfg.q_grid.is_empty() || cfg.rm_grid.is_empty() || cfg.horizon == 0 {
        return Err(BaselineError::Config("batch_size, horizon and both grids must be non-empty".into()));
    }
    let h = records
        .first()
        .map(|r| r.dt)
        .ok_or_else(|| BaselineError::Config("no trajectories".into()))?;
    let samples = transitions(records, &split.train);
    if samples.is_empty() {
        return Err(BaselineError::Config("no training transitions".into()));
    }
    let pool = training::thread_pool();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut model = KfnsModel {
        net: Mlp::init(f_spec(cfg.activation), &mut rng),
        noise: KfNoise::default(),
    };
    let n_params = model.param_count();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut opt = AdamState::new(n_params);
    let mut flat = Vec::with_capacity(n_params);
    model.net.flatten_into(&mut flat);
    let mut order = samples.clone();
    let mut epoch_mse = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut se_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<f64>)> =
                pool.install(|| batch.par_iter().map(|tr| sample_grad(&model.net, records, tr)).collect());
            let mut grad = vec![0.0; n_params];
            for (se, g) in &results {
                se_sum += se;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            clip_global_norm(&mut grad, 10.0);
            adam_step(&mut flat, &grad, &mut opt, &adam);
            model.net.load_flat(&flat);
        }
        epoch_mse.push(se_sum / (6.0 * samples.len() as f64));
    }

    let mut val = training::windows(records, &split.val, cfg.horizon, cfg.stride);
    if val.is_empty() {
        val = training::windows(records, &split.train, cfg.horizon, cfg.stride);
    }
    let mut grid = Vec::new();
    let mut best = (f64::INFINITY, cfg.q_grid[0], cfg.rm_grid[0]);
    for &q in &cfg.q_grid {
        for &rm in &cfg.rm_grid {
            let candidate = KfnsModel {
                net: model.net.clone(),
                noise: KfNoise::isotropic(q, rm),
            };
            candidate.noise.validate()?;
            let l = pool.install(|| validation_loss(&candidate, records, &val, cfg.horizon, h));
            grid.push((q, rm, l));
            if l < best.0 {
                best = (l, q, rm);
            }
        }
    }
    model.noise = KfNoise::isotropic(best.1, best.2);
    let log = KfnsLog {
        config: cfg.clone(),
        train_samples: samples.len(),
        epoch_mse,
        grid,
        chosen: (best.1, best.2),
    };
    Ok((model, log))
}
