//! Multi-step rollout losses and minibatch BPTT training.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Algebra, Tape};
use crate::datagen::TrajectoryRecord;
use crate::integrator::{Integrator, IntegratorError, State, StateOf, VehicleParams};
use crate::liegroup::{geodesic_angle, project_to_rotation, Mat3};
use crate::models::{self, Action, DynamicsModels, InputNorm, Observation, Variant, FORCE_INPUT_DIM};
use crate::nn::{adam_step, clip_global_norm, Activation, AdamConfig, AdamState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("prediction has {pred} states but ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("no training windows of length {needed} (horizon {horizon} + 1) in the selected trajectories")]
    DataTooShort { needed: usize, horizon: usize },
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ed: f64,
    pub l_gd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_ed: f64, l_gd: f64) -> Self {
        Self {
            l_ed,
            l_gd,
            total: l_ed + l_gd,
        }
    }

    fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let ed = items.iter().map(|l| l.l_ed).sum::<f64>() / n;
        let gd = items.iter().map(|l| l.l_gd).sum::<f64>() / n;
        Self::new(ed, gd)
    }
}

fn check_lengths(pred: usize, gt: usize) -> Result<(), TrainError> {
    if pred != gt || pred == 0 {
        return Err(TrainError::LengthMismatch { pred, gt });
    }
    Ok(())
}

/// `(1/n)·Σ (‖x̂−x‖² + ‖v̂−v‖² + ‖ω̂−ω‖²)`.
pub fn loss_ed(pred: &[State], gt: &[State]) -> Result<f64, TrainError> {
    check_lengths(pred.len(), gt.len())?;
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let dx = p.x - g.x;
            let dv = p.v - g.v;
            let dw = p.w - g.w;
            dx.dot(dx) + dv.dot(dv) + dw.dot(dw)
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// `(1/n)·Σ angle(proj(R̂), R)²`.
pub fn loss_gd(pred: &[State], gt: &[State]) -> Result<f64, TrainError> {
    check_lengths(pred.len(), gt.len())?;
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let r = project_to_rotation(&p.r).unwrap_or(p.r);
            geodesic_angle(&r, &g.r).powi(2)
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn loss(pred: &[State], gt: &[State]) -> Result<LossBreakdown, TrainError> {
    Ok(LossBreakdown::new(loss_ed(pred, gt)?, loss_gd(pred, gt)?))
}

/// Both loss terms recorded in `alg`. Predicted rotations are re-projected only
/// when they have drifted by more than `1e-9`.
pub fn loss_terms<A: Algebra>(
    alg: &mut A,
    pred: &[StateOf<A::V3, A::M3>],
    gt: &[State],
) -> Result<(A::Scalar, A::Scalar), TrainError> {
    check_lengths(pred.len(), gt.len())?;
    let inv_n = 1.0 / pred.len() as f64;
    let mut ed = alg.s_const(0.0);
    let mut gd = alg.s_const(0.0);
    let minus_half = alg.s_const(-0.5);
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in [(&p.x, g.x), (&p.v, g.v), (&p.w, g.w)] {
            let b = alg.v3_const(b);
            let d = alg.v3_sub(a, &b);
            let sq = alg.v3_sqnorm(&d);
            ed = alg.s_add(&ed, &sq);
        }
        let r = if alg.m3_val(&p.r).orthogonality_error() > 1e-9 {
            Integrator::reproject(alg, &p.r)
        } else {
            p.r.clone()
        };
        let rg = alg.m3_const(g.r);
        let tr = alg.m3_dot(&r, &rg);
        let half = alg.s_scale(&tr, 0.5);
        let c = alg.s_add(&half, &minus_half);
        let a2 = alg.s_acos_sq(&c);
        gd = alg.s_add(&gd, &a2);
    }
    Ok((alg.s_scale(&ed, inv_n), alg.s_scale(&gd, inv_n)))
}

/// A training sample: `states[start]` plus `horizon` actions and targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
}

/// Sliding windows with `horizon + 1` states over the listed trajectories, in
/// trajectory order.
pub fn windows(records: &[TrajectoryRecord], trajs: &[usize], horizon: usize, stride: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for &t in trajs {
        let len = records[t].states.len().min(records[t].actions.len() + 1);
        if len < horizon + 1 {
            continue;
        }
        let mut s = 0;
        while s + horizon < len {
            out.push(Window { traj: t, start: s });
            s += stride.max(1);
        }
    }
    out
}

/// The first `⌈fraction·W⌉` windows.
pub fn select_fraction(windows: &[Window], fraction: f64) -> Vec<Window> {
    let k = ((fraction * windows.len() as f64).ceil() as usize).clamp(1.min(windows.len()), windows.len());
    windows[..k].to_vec()
}

pub struct Sample<'a> {
    pub s0: &'a State,
    pub actions: &'a [Action],
    pub gt: &'a [State],
    pub b0: &'a Observation,
}

pub fn sample<'a>(records: &'a [TrajectoryRecord], w: &Window, horizon: usize) -> Sample<'a> {
    let r = &records[w.traj];
    Sample {
        s0: &r.states[w.start],
        actions: &r.actions[w.start..w.start + horizon],
        gt: &r.states[w.start + 1..=w.start + horizon],
        b0: &r.b0,
    }
}

/// Trajectory-level split into train, validation and test sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Shuffles trajectory indices with `seed`, then takes `val_frac` and
    /// `test_frac` of them (at least one each when there are ≥ 3).
    pub fn new(n: usize, val_frac: f64, test_frac: f64, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5b117));
        let min = usize::from(n >= 3);
        let n_val = ((val_frac * n as f64).round() as usize).max(min);
        let n_test = ((test_frac * n as f64).round() as usize).max(min);
        let test = idx[..n_test].to_vec();
        let val = idx[n_test..n_test + n_val].to_vec();
        let mut train = idx[n_test + n_val..].to_vec();
        train.sort_unstable();
        let mut val = val;
        val.sort_unstable();
        let mut test = test;
        test.sort_unstable();
        Self { train, val, test }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trainable {
    pub potential: bool,
    pub force: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self {
            potential: true,
            force: true,
        }
    }
}

/// Mass, principal inertia and quadrature weight of the vehicle being learned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub mass: f64,
    pub inertia: [f64; 3],
    pub alpha: f64,
}

impl Default for VehicleSpec {
    fn default() -> Self {
        Self {
            mass: 1.0,
            inertia: [0.2, 0.4, 0.5],
            alpha: 0.5,
        }
    }
}

impl VehicleSpec {
    pub fn params(&self, h: f64) -> Result<VehicleParams, IntegratorError> {
        VehicleParams::new(self.mass, Mat3::diag(self.inertia), self.alpha, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub horizon: usize,
    pub lr: f64,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub stride: usize,
    pub clip_norm: f64,
    pub data_fraction: f64,
    pub variant: Variant,
    pub activation: Activation,
    pub vehicle: VehicleSpec,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub normalize_inputs: bool,
    pub trainable: Trainable,
    /// Evaluate validation every this many epochs (the last epoch always is).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            lr: 1e-3,
            lr_decay: 1.0,
            batch_size: 64,
            epochs: 60,
            seed: 0,
            stride: 10,
            clip_norm: 10.0,
            data_fraction: 1.0,
            variant: Variant::Full,
            activation: Activation::Tanh,
            vehicle: VehicleSpec::default(),
            val_fraction: 0.15,
            test_fraction: 0.15,
            normalize_inputs: false,
            trainable: Trainable::default(),
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!("data_fraction must lie in (0, 1], got {}", self.data_fraction));
        }
        if self.batch_size == 0 || self.stride == 0 || self.val_every == 0 {
            return bad("batch_size, stride and val_every must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr and clip_norm must be positive".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&(self.val_fraction + self.test_fraction)) {
            return bad("val_fraction + test_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    /// Windows whose rollout failed (Newton did not converge) and were skipped.
    pub skipped: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub param_count: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: LossBreakdown,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub models: DynamicsModels,
    pub params: VehicleParams,
    pub log: TrainLog,
}

/// Worker pool sized by `PHYSORD_THREADS` (default: all cores).
pub fn thread_pool() -> rayon::ThreadPool {
    let n = std::env::var("PHYSORD_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool builds")
}

/// Loss on one window and its gradient w.r.t. every trainable value in flat order.
pub fn window_grad(
    models: &DynamicsModels,
    integ: &Integrator,
    s: &Sample<'_>,
) -> Result<(LossBreakdown, Vec<f64>), TrainError> {
    let mut tape = Tape::with_capacity(8192, 1 << 16);
    let bound = models.bind_tape(&mut tape);
    let s0 = s.s0.lift(&mut tape);
    let (pred, _) = models::predict(&mut tape, &bound, integ, &s0, s.actions, s.b0, s.gt.len())?;
    let (ed, gd) = loss_terms(&mut tape, &pred, s.gt)?;
    let total = tape.s_add(&ed, &gd);
    let lb = LossBreakdown::new(tape.s_val(&ed), tape.s_val(&gd));
    let grads = tape.backward(total, &[1.0]).expect("fresh tape");
    Ok((lb, bound.collect_grads(&grads)))
}

pub fn window_loss(models: &DynamicsModels, integ: &Integrator, s: &Sample<'_>) -> Result<LossBreakdown, TrainError> {
    let pred = models::predict_plain(models, integ, s.s0, s.actions, s.b0, s.gt.len())?;
    loss(&pred, s.gt)
}

/// Mean loss over windows; failed rollouts are counted and left out.
pub fn evaluate_loss(
    models: &DynamicsModels,
    integ: &Integrator,
    records: &[TrajectoryRecord],
    wins: &[Window],
    horizon: usize,
) -> (LossBreakdown, usize) {
    let losses: Vec<Option<LossBreakdown>> = wins
        .par_iter()
        .map(|w| window_loss(models, integ, &sample(records, w, horizon)).ok())
        .collect();
    let ok: Vec<LossBreakdown> = losses.iter().flatten().copied().filter(|l| l.total.is_finite()).collect();
    let failed = losses.len() - ok.len();
    if ok.is_empty() {
        return (LossBreakdown::new(f64::INFINITY, f64::INFINITY), failed);
    }
    (LossBreakdown::mean(&ok), failed)
}

/// Per-channel normalization fitted on every state of the training windows.
pub fn fit_norm(records: &[TrajectoryRecord], wins: &[Window], horizon: usize) -> InputNorm {
    let mut pose = Vec::new();
    let mut force = Vec::new();
    for w in wins {
        let r = &records[w.traj];
        for t in w.start..w.start + horizon {
            let s = &r.states[t];
            let a = &r.actions[t];
            pose.push(s.pose_vector());
            let vb = s.r.tr_mul_vec(s.v);
            let mut f = [0.0; FORCE_INPUT_DIM];
            f[..3].copy_from_slice(&vb.to_array());
            f[3..6].copy_from_slice(&s.w.to_array());
            f[6..9].copy_from_slice(&a.to_array());
            f[9..].copy_from_slice(&r.b0.wheel_disc);
            force.push(f);
        }
    }
    InputNorm::fit(&pose, &force)
}

pub fn initial_models(cfg: &TrainConfig) -> DynamicsModels {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    DynamicsModels::init(cfg.variant, cfg.activation, &mut rng)
}

/// Trains from the seeded default initialization.
pub fn train(records: &[TrajectoryRecord], split: &Split, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_from(records, split, cfg, initial_models(cfg))
}

/// Minibatch Adam on `L_ED + L_GD` of `horizon`-step rollouts, keeping the
/// parameters with the best validation loss.
pub fn train_from(
    records: &[TrajectoryRecord],
    split: &Split,
    cfg: &TrainConfig,
    mut models: DynamicsModels,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let h = records
        .first()
        .map(|r| r.dt)
        .ok_or(TrainError::DataTooShort {
            needed: cfg.horizon + 1,
            horizon: cfg.horizon,
        })?;
    let params = cfg.vehicle.params(h)?;
    let integ = Integrator::new(params);

    let all_train = windows(records, &split.train, cfg.horizon, cfg.stride);
    let train_wins = select_fraction(&all_train, cfg.data_fraction);
    if train_wins.is_empty() {
        return Err(TrainError::DataTooShort {
            needed: cfg.horizon + 1,
            horizon: cfg.horizon,
        });
    }
    let mut val_wins = windows(records, &split.val, cfg.horizon, cfg.stride);
    if val_wins.is_empty() {
        val_wins = train_wins.clone();
    }
    if cfg.normalize_inputs && models.norm.is_none() {
        models.norm = Some(fit_norm(records, &train_wins, cfg.horizon));
    }

    let pool = thread_pool();
    let n_params = models.param_count();
    let n_pot = models.potential_param_count();
    let mut adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut opt = AdamState::new(n_params);
    let mut flat = models.flat_params();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order = train_wins.clone();

    let (init_val, _) = pool.install(|| evaluate_loss(&models, &integ, records, &val_wins, cfg.horizon));
    let mut best = (0usize, init_val, flat.clone());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        adam.lr = cfg.lr * cfg.lr_decay.powi(epoch as i32 - 1);
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::with_capacity(order.len());
        let mut skipped = 0;
        for (batch_id, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(LossBreakdown, Vec<f64>), TrainError>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|w| window_grad(&models, &integ, &sample(records, w, cfg.horizon)))
                    .collect()
            });
            let mut grad = vec![0.0; n_params];
            let mut used = 0usize;
            for r in results {
                match r {
                    Ok((lb, g)) if lb.total.is_finite() && g.iter().all(|v| v.is_finite()) => {
                        for (acc, v) in grad.iter_mut().zip(&g) {
                            *acc += v;
                        }
                        epoch_losses.push(lb);
                        used += 1;
                    }
                    Ok(_) => return Err(TrainError::NonFiniteLoss { epoch, batch: batch_id }),
                    Err(TrainError::Integrator(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            if used == 0 {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_id });
            }
            let inv = 1.0 / used as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if !cfg.trainable.potential {
                grad[..n_pot].iter_mut().for_each(|g| *g = 0.0);
            }
            if !cfg.trainable.force {
                grad[n_pot..].iter_mut().for_each(|g| *g = 0.0);
            }
            clip_global_norm(&mut grad, cfg.clip_norm);
            adam_step(&mut flat, &grad, &mut opt, &adam);
            models.set_flat_params(&flat).expect("param count is fixed");
        }
        let val = if epoch % cfg.val_every == 0 || epoch == cfg.epochs {
            let (v, _) = pool.install(|| evaluate_loss(&models, &integ, records, &val_wins, cfg.horizon));
            if v.total < best.1.total {
                best = (epoch, v, flat.clone());
            }
            Some(v)
        } else {
            None
        };
        epochs.push(EpochLog {
            epoch,
            train: LossBreakdown::mean(&epoch_losses),
            val,
            skipped,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    models.set_flat_params(&best.2).expect("param count is fixed");
    let log = TrainLog {
        config: cfg.clone(),
        param_count: n_params,
        train_windows: train_wins.len(),
        val_windows: val_wins.len(),
        epochs,
        best_epoch: best.0,
        best_val: best.1,
    };
    Ok(TrainOutcome { models, params, log })
}

/// Plain rollouts of `n` steps from each window start.
pub fn predict_windows(
    models: &DynamicsModels,
    integ: &Integrator,
    records: &[TrajectoryRecord],
    wins: &[Window],
    n: usize,
) -> Vec<Result<Vec<State>, IntegratorError>> {
    wins.par_iter()
        .map(|w| {
            let s = sample(records, w, n);
            models::predict_plain(models, integ, s.s0, s.actions, s.b0, n)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Plain;
    use crate::liegroup::{exp_so3, rot_z, Vec3};

    fn st(x: Vec3, r: Mat3) -> State {
        State {
            x,
            r,
            v: Vec3::ZERO,
            w: Vec3::ZERO,
        }
    }

    #[test]
    fn loss_examples() {
        let g = vec![st(Vec3::ZERO, Mat3::IDENTITY); 3];
        assert_eq!(loss_ed(&g, &g).unwrap(), 0.0);
        assert_eq!(loss_gd(&g, &g).unwrap(), 0.0);
        let p = vec![st(Vec3::new(1.0, 0.0, 0.0), Mat3::IDENTITY)];
        assert_eq!(loss_ed(&p, &g[..1]).unwrap(), 1.0);
        let p2 = vec![st(Vec3::new(2.0, 0.0, 0.0), Mat3::IDENTITY)];
        assert_eq!(loss_ed(&p2, &g[..1]).unwrap(), 4.0);
        let rot = vec![st(Vec3::ZERO, rot_z(std::f64::consts::FRAC_PI_2)); 3];
        let l = loss_gd(&rot, &g).unwrap();
        assert!((l - std::f64::consts::FRAC_PI_2.powi(2)).abs() < 1e-12);
        assert!((l - 2.4674).abs() < 1e-4);
        assert!(matches!(loss_ed(&g[..2], &g), Err(TrainError::LengthMismatch { pred: 2, gt: 3 })));
        assert!(loss_gd(&g[..1], &g).is_err());
    }

    #[test]
    fn geodesic_loss_is_left_invariant() {
        let a = exp_so3(Vec3::new(0.3, -0.2, 0.5));
        let b = exp_so3(Vec3::new(-0.1, 0.4, 0.2));
        let q = exp_so3(Vec3::new(1.0, 2.0, -0.5));
        let l1 = loss_gd(&[st(Vec3::ZERO, a)], &[st(Vec3::ZERO, b)]).unwrap();
        let l2 = loss_gd(&[st(Vec3::ZERO, q * a)], &[st(Vec3::ZERO, q * b)]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn generic_loss_matches_plain() {
        let g: Vec<State> = (0..4)
            .map(|i| State {
                x: Vec3::new(i as f64, 0.5, 0.0),
                r: exp_so3(Vec3::new(0.1 * i as f64, 0.2, 0.0)),
                v: Vec3::new(1.0, 0.0, 0.1),
                w: Vec3::new(0.0, 0.3, 0.0),
            })
            .collect();
        let p: Vec<State> = g
            .iter()
            .map(|s| State {
                x: s.x + Vec3::new(0.1, -0.2, 0.3),
                r: s.r * exp_so3(Vec3::new(0.05, 0.0, -0.1)),
                v: s.v.scale(1.1),
                w: s.w + Vec3::new(0.2, 0.0, 0.0),
            })
            .collect();
        let (ed, gd) = loss_terms(&mut Plain, &p, &g).unwrap();
        assert!((ed - loss_ed(&p, &g).unwrap()).abs() < 1e-12);
        assert!((gd - loss_gd(&p, &g).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn window_construction() {
        let rec = TrajectoryRecord {
            dt: 0.1,
            terrain_tag: "Dirt".into(),
            b0: Observation::default(),
            seed: 0,
            states: vec![st(Vec3::ZERO, Mat3::IDENTITY); 30],
            actions: vec![Action::default(); 30],
        };
        let recs = vec![rec.clone(), rec];
        let w = windows(&recs, &[0, 1], 20, 1);
        assert_eq!(w.len(), 20);
        assert_eq!(w[0], Window { traj: 0, start: 0 });
        assert_eq!(w[10], Window { traj: 1, start: 0 });
        assert_eq!(windows(&recs, &[0], 20, 5).len(), 2);
        assert!(windows(&recs, &[0], 30, 1).is_empty());
        let sel = select_fraction(&w, 0.01);
        assert_eq!(sel, vec![Window { traj: 0, start: 0 }]);
        assert_eq!(select_fraction(&w, 0.5).len(), 10);
        assert_eq!(select_fraction(&w, 1.0).len(), 20);
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let s = Split::new(60, 0.15, 0.15, 3);
        assert_eq!(s.val.len(), 9);
        assert_eq!(s.test.len(), 9);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        assert_eq!(s, Split::new(60, 0.15, 0.15, 3));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.data_fraction = 0.0;
        assert!(c.validate().is_err());
        c.data_fraction = 1.0;
        c.horizon = 0;
        assert!(c.validate().is_err());
        let json = r#"{"horizon": 5, "lr": 0.01}"#;
        let parsed: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.horizon, 5);
        assert_eq!(parsed.batch_size, 64);
    }
}
