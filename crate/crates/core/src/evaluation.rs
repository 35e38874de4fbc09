//! Accuracy metrics, per-terrain grouping and compute accounting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::FlopCounter;
use crate::integrator::{Integrator, IntegratorError, State};
use crate::liegroup::{geodesic_angle, project_to_rotation};
use crate::models::{self, Action, DynamicsModels, Observation};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("step {step} out of range 1..={len}")]
    StepOutOfRange { step: usize, len: usize },
    #[error("no sequences to evaluate")]
    Empty,
    #[error("{preds} predictions for {gts} ground-truth sequences")]
    CountMismatch { preds: usize, gts: usize },
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
}

/// Predicted and ground-truth states at `step` (1-based: `seq[step - 1]` is `s_step`).
fn pair_at<'a>(pred: &'a [State], gt: &'a [State], step: usize) -> Result<(&'a State, &'a State), EvalError> {
    let len = pred.len().min(gt.len());
    if step == 0 || step > len {
        return Err(EvalError::StepOutOfRange { step, len });
    }
    Ok((&pred[step - 1], &gt[step - 1]))
}

fn check(preds: &[Vec<State>], gts: &[Vec<State>]) -> Result<(), EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::CountMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Sum of squared errors over the 12-dim pose vector `[x, R row-major]`.
pub fn pose_sq_error(pred: &State, gt: &State) -> f64 {
    pred.pose_vector()
        .iter()
        .zip(gt.pose_vector())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

pub fn rotation_error(pred: &State, gt: &State) -> f64 {
    let r = project_to_rotation(&pred.r).unwrap_or(pred.r);
    geodesic_angle(&r, &gt.r)
}

/// `sqrt(mean over sequences and the 12 pose components of squared error)`.
pub fn rmse_at(preds: &[Vec<State>], gts: &[Vec<State>], step: usize) -> Result<f64, EvalError> {
    check(preds, gts)?;
    let mut sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let (p, g) = pair_at(p, g, step)?;
        sum += pose_sq_error(p, g);
    }
    Ok((sum / (12.0 * preds.len() as f64)).sqrt())
}

/// Mean Euclidean position error at `step`.
pub fn position_distance(preds: &[Vec<State>], gts: &[Vec<State>], step: usize) -> Result<f64, EvalError> {
    check(preds, gts)?;
    let mut sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let (p, g) = pair_at(p, g, step)?;
        sum += (p.x - g.x).norm();
    }
    Ok(sum / preds.len() as f64)
}

/// Mean geodesic angle at `step`, after projecting predictions onto SO(3).
pub fn angular_distance(preds: &[Vec<State>], gts: &[Vec<State>], step: usize) -> Result<f64, EvalError> {
    check(preds, gts)?;
    let mut sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let (p, g) = pair_at(p, g, step)?;
        sum += rotation_error(p, g);
    }
    Ok(sum / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerrainMetrics {
    pub rmse: f64,
    pub pos_dist: f64,
    pub ang_dist: f64,
    pub n_sequences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub pos_dist: f64,
    pub ang_dist: f64,
    pub per_terrain: BTreeMap<String, TerrainMetrics>,
    pub eval_step: usize,
    pub n_sequences: usize,
    /// Rollouts that failed and are excluded from every metric.
    pub n_failed: usize,
}

impl MetricsReport {
    /// Metrics over sequences grouped by terrain tag.
    pub fn compute(
        preds: &[Vec<State>],
        gts: &[Vec<State>],
        tags: &[String],
        step: usize,
        n_failed: usize,
    ) -> Result<Self, EvalError> {
        check(preds, gts)?;
        if tags.len() != preds.len() {
            return Err(EvalError::CountMismatch {
                preds: tags.len(),
                gts: preds.len(),
            });
        }
        let mut groups: BTreeMap<String, (f64, f64, f64, usize)> = BTreeMap::new();
        for ((p, g), tag) in preds.iter().zip(gts).zip(tags) {
            let (p, g) = pair_at(p, g, step)?;
            let e = groups.entry(tag.clone()).or_default();
            e.0 += pose_sq_error(p, g);
            e.1 += (p.x - g.x).norm();
            e.2 += rotation_error(p, g);
            e.3 += 1;
        }
        let per_terrain = groups
            .iter()
            .map(|(k, &(se, pos, ang, n))| {
                let nf = n as f64;
                (
                    k.clone(),
                    TerrainMetrics {
                        rmse: (se / (12.0 * nf)).sqrt(),
                        pos_dist: pos / nf,
                        ang_dist: ang / nf,
                        n_sequences: n,
                    },
                )
            })
            .collect();
        Ok(Self {
            rmse: rmse_at(preds, gts, step)?,
            pos_dist: position_distance(preds, gts, step)?,
            ang_dist: angular_distance(preds, gts, step)?,
            per_terrain,
            eval_step: step,
            n_sequences: preds.len(),
            n_failed,
        })
    }

    /// Overall metrics rebuilt from the per-terrain groups: count-weighted means,
    /// with RMSE recombined on squared errors.
    pub fn recombined(&self) -> (f64, f64, f64) {
        let n: usize = self.per_terrain.values().map(|t| t.n_sequences).sum();
        let nf = n.max(1) as f64;
        let mut se = 0.0;
        let mut pos = 0.0;
        let mut ang = 0.0;
        for t in self.per_terrain.values() {
            let w = t.n_sequences as f64;
            se += w * t.rmse * t.rmse;
            pos += w * t.pos_dist;
            ang += w * t.ang_dist;
        }
        (
            (se / nf).sqrt(),
            pos / nf,
            ang / nf,
        )
    }
}

/// Trainable scalar count.
pub fn count_params(models: &DynamicsModels) -> usize {
    models.param_count()
}

/// Forward FLOPs of an `n_steps` prediction from rest: every MLP affine layer
/// (two per multiply-add), integrator arithmetic and Newton iterations.
pub fn count_flops(models: &DynamicsModels, integ: &Integrator, n_steps: usize) -> Result<u64, EvalError> {
    let mut alg = FlopCounter::default();
    let bound = models.bind_plain();
    let s0 = State {
        v: crate::liegroup::Vec3::new(1.0, 0.0, 0.0),
        ..State::at_rest(crate::liegroup::Vec3::ZERO, crate::liegroup::Mat3::IDENTITY)
    };
    let actions = vec![Action::new(0.5, 0.0, 0.0); n_steps];
    models::predict(&mut alg, &bound, integ, &s0, &actions, &Observation::default(), n_steps)?;
    Ok(alg.flops)
}

/// One row of the Table-I style summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub terrain: String,
    pub rmse: f64,
    pub pos_dist: f64,
    pub ang_dist: f64,
    pub n_sequences: usize,
}

/// Rows for every terrain plus an `All` row per model.
pub fn table_rows(entries: &[(&str, &MetricsReport)]) -> Vec<TableRow> {
    let mut rows = Vec::new();
    for (model, m) in entries {
        for (tag, t) in &m.per_terrain {
            rows.push(TableRow {
                model: model.to_string(),
                terrain: tag.clone(),
                rmse: t.rmse,
                pos_dist: t.pos_dist,
                ang_dist: t.ang_dist,
                n_sequences: t.n_sequences,
            });
        }
        rows.push(TableRow {
            model: model.to_string(),
            terrain: "All".into(),
            rmse: m.rmse,
            pos_dist: m.pos_dist,
            ang_dist: m.ang_dist,
            n_sequences: m.n_sequences,
        });
    }
    rows
}

pub fn write_table_csv(path: &Path, entries: &[(&str, &MetricsReport)]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in table_rows(entries) {
        w.serialize(row)?;
    }
    w.flush().map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Ground truth and prediction side by side, with speed and acceleration
/// columns for plotting.
pub fn write_prediction_csv(path: &Path, s0: &State, gt: &[State], pred: &[State], dt: f64) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "t", "gt_x", "gt_y", "gt_z", "pred_x", "pred_y", "pred_z", "gt_speed", "pred_speed", "gt_accel", "pred_accel",
        "ang_err",
    ])?;
    let mut prev_gt = s0.v.norm();
    let mut prev_pred = s0.v.norm();
    for (k, (g, p)) in gt.iter().zip(pred).enumerate() {
        let gs = g.v.norm();
        let ps = p.v.norm();
        let row = [
            (k + 1) as f64 * dt,
            g.x.x,
            g.x.y,
            g.x.z,
            p.x.x,
            p.x.y,
            p.x.z,
            gs,
            ps,
            (gs - prev_gt) / dt,
            (ps - prev_pred) / dt,
            rotation_error(p, g),
        ];
        w.write_record(row.iter().map(|v| v.to_string()))?;
        prev_gt = gs;
        prev_pred = ps;
    }
    w.flush().map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{rot_z, Mat3, Vec3};
    use crate::models::Variant;
    use crate::nn::Activation;

    fn st(x: Vec3, r: Mat3) -> State {
        State::at_rest(x, r)
    }

    #[test]
    fn rmse_examples() {
        let g = vec![vec![st(Vec3::ZERO, Mat3::IDENTITY); 3]];
        assert_eq!(rmse_at(&g, &g, 3).unwrap(), 0.0);
        let p = vec![vec![st(Vec3::new(1.0, 0.0, 0.0), Mat3::IDENTITY); 3]];
        assert!((rmse_at(&p, &g, 2).unwrap() - (1.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert!(matches!(rmse_at(&p, &g, 4), Err(EvalError::StepOutOfRange { step: 4, len: 3 })));
        assert!(matches!(rmse_at(&p, &g, 0), Err(EvalError::StepOutOfRange { .. })));
    }

    #[test]
    fn distance_examples() {
        let g = vec![vec![st(Vec3::ZERO, Mat3::IDENTITY)]; 2];
        let p = vec![
            vec![st(Vec3::new(1.0, 0.0, 0.0), rot_z(0.0893))],
            vec![st(Vec3::new(0.0, 3.0, 0.0), rot_z(-0.0893))],
        ];
        assert!((position_distance(&p, &g, 1).unwrap() - 2.0).abs() < 1e-15);
        assert!((angular_distance(&p, &g, 1).unwrap() - 0.0893).abs() < 1e-12);
        assert_eq!(position_distance(&g, &g, 1).unwrap(), 0.0);
        assert!(position_distance(&[], &[], 1).is_err());
    }

    #[test]
    fn per_terrain_recombines() {
        let g: Vec<Vec<State>> = (0..5).map(|_| vec![st(Vec3::ZERO, Mat3::IDENTITY)]).collect();
        let p: Vec<Vec<State>> = (0..5)
            .map(|i| vec![st(Vec3::new(i as f64, 0.5, 0.0), rot_z(0.1 * i as f64))])
            .collect();
        let tags: Vec<String> = ["a", "b", "a", "c", "b"].iter().map(|s| s.to_string()).collect();
        let m = MetricsReport::compute(&p, &g, &tags, 1, 0).unwrap();
        assert_eq!(m.per_terrain.len(), 3);
        let (r, pos, ang) = m.recombined();
        assert!((r - m.rmse).abs() < 1e-12);
        assert!((pos - m.pos_dist).abs() < 1e-12);
        assert!((ang - m.ang_dist).abs() < 1e-12);
    }

    #[test]
    fn default_model_accounting() {
        let m = DynamicsModels::zeros(Variant::Full, Activation::Tanh);
        assert_eq!(count_params(&m), 5708);
        let integ = Integrator::new(Default::default());
        let f = count_flops(&m, &integ, 20).unwrap();
        assert!((12_710..=1_271_000).contains(&f), "{f}");
    }

    #[test]
    fn prediction_csv_writes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let s = vec![st(Vec3::ZERO, Mat3::IDENTITY); 4];
        write_prediction_csv(&p, &s[0], &s, &s, 0.1).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 5);
    }
}
