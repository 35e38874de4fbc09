//! End-to-end experiments: accuracy, generalization, data efficiency and ablation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineError, KfnsConfig, KfnsModel};
use crate::datagen::{self, ActionPolicy, DatagenError, TrajectoryRecord, WorldSpec};
use crate::evaluation::{self, EvalError, MetricsReport};
use crate::integrator::{Integrator, State};
use crate::models::{ModelError, Variant};
use crate::training::{self, sample, Split, TrainConfig, TrainError, TrainOutcome, Window};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid protocol config: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolName {
    Accuracy,
    Generalization,
    DataEfficiency,
    Ablation,
}

impl std::str::FromStr for ProtocolName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "accuracy" => Ok(Self::Accuracy),
            "generalization" => Ok(Self::Generalization),
            "data_efficiency" => Ok(Self::DataEfficiency),
            "ablation" => Ok(Self::Ablation),
            other => Err(format!(
                "unknown protocol '{other}' (expected accuracy, generalization, data_efficiency or ablation)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    /// Dataset directory; generated from `world` when absent.
    pub data: Option<PathBuf>,
    pub world: WorldSpec,
    pub trajectories: usize,
    pub steps: usize,
    pub policy: ActionPolicy,
    pub split_seed: u64,
    pub train: TrainConfig,
    pub kfns: KfnsConfig,
    pub eval_step: usize,
    pub eval_stride: usize,
    pub generalization_horizon: usize,
    pub fractions: Vec<f64>,
    pub data_efficiency_variants: Vec<Variant>,
    /// Pool for the data-efficiency sweep; generated with
    /// `data_efficiency_trajectories` when absent.
    pub data_efficiency_data: Option<PathBuf>,
    pub data_efficiency_trajectories: usize,
    /// Optimizer updates given to every fraction.
    pub update_budget: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            data: None,
            world: WorldSpec::default(),
            trajectories: 60,
            steps: 300,
            policy: ActionPolicy::RandomWalk,
            split_seed: 0,
            train: TrainConfig::default(),
            kfns: KfnsConfig::default(),
            eval_step: 20,
            eval_stride: 5,
            generalization_horizon: 5,
            fractions: vec![0.01, 0.1, 0.5, 0.8, 1.0],
            data_efficiency_variants: vec![Variant::Full, Variant::Phys],
            data_efficiency_data: None,
            data_efficiency_trajectories: 3000,
            update_budget: 1140,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        self.world.validate()?;
        self.train.validate()?;
        let bad = |m: &str| Err(ProtocolError::Config(m.into()));
        if self.eval_step == 0 || self.eval_stride == 0 || self.generalization_horizon == 0 {
            return bad("eval_step, eval_stride and generalization_horizon must be positive");
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("fractions must lie in (0, 1]");
        }
        if self.update_budget == 0 {
            return bad("update_budget must be positive");
        }
        if self.data.is_none() && self.trajectories < 3 {
            return bad("need at least 3 trajectories for a train/val/test split");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub model: String,
    pub variant: Option<Variant>,
    pub train_horizon: Option<usize>,
    pub fraction: Option<f64>,
    pub train_windows: Option<usize>,
    pub params: usize,
    pub flops: Option<u64>,
    pub train_seconds: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub name: ProtocolName,
    pub eval_step: usize,
    pub test_sequences: usize,
    pub rows: Vec<ProtocolRow>,
    pub config: ProtocolConfig,
}

impl ProtocolReport {
    pub fn row(&self, model: &str) -> Option<&ProtocolRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

/// Records, split and test windows shared by every run of one protocol.
pub struct Bench {
    pub records: Vec<TrajectoryRecord>,
    pub split: Split,
    pub test: Vec<Window>,
    pub h: f64,
}

impl Bench {
    pub fn new(records: Vec<TrajectoryRecord>, cfg: &ProtocolConfig) -> Result<Self, ProtocolError> {
        let h = records
            .first()
            .map(|r| r.dt)
            .ok_or_else(|| ProtocolError::Config("dataset is empty".into()))?;
        let split = Split::new(
            records.len(),
            cfg.train.val_fraction,
            cfg.train.test_fraction,
            cfg.split_seed,
        );
        let test = training::windows(&records, &split.test, cfg.eval_step, cfg.eval_stride);
        if test.is_empty() {
            return Err(ProtocolError::Config(format!(
                "no test windows of {} steps",
                cfg.eval_step
            )));
        }
        Ok(Self { records, split, test, h })
    }

    fn tags(&self, wins: &[Window]) -> Vec<String> {
        wins.iter().map(|w| self.records[w.traj].terrain_tag.clone()).collect()
    }

    fn ground_truth(&self, w: &Window, n: usize) -> Vec<State> {
        sample(&self.records, w, n).gt.to_vec()
    }

    /// Metrics of any predictor; windows whose rollout fails are excluded and counted.
    pub fn evaluate<F, E>(&self, step: usize, predict: F) -> Result<MetricsReport, ProtocolError>
    where
        F: Fn(&Window) -> Result<Vec<State>, E> + Sync,
        E: Send,
    {
        let preds: Vec<Option<Vec<State>>> = self.test.par_iter().map(|w| predict(w).ok()).collect();
        let mut p = Vec::new();
        let mut g = Vec::new();
        let mut kept = Vec::new();
        for (w, pred) in self.test.iter().zip(preds) {
            if let Some(pred) = pred {
                p.push(pred);
                g.push(self.ground_truth(w, step));
                kept.push(*w);
            }
        }
        let failed = self.test.len() - kept.len();
        Ok(MetricsReport::compute(&p, &g, &self.tags(&kept), step, failed)?)
    }

    pub fn evaluate_trained(&self, out: &TrainOutcome, step: usize) -> Result<MetricsReport, ProtocolError> {
        let integ = Integrator::new(out.params);
        let pool = training::thread_pool();
        pool.install(|| {
            self.evaluate(step, |w| {
                let s = sample(&self.records, w, step);
                crate::models::predict_plain(&out.models, &integ, s.s0, s.actions, s.b0, step)
            })
        })
    }

    pub fn evaluate_kfns(&self, model: &KfnsModel, step: usize) -> Result<MetricsReport, ProtocolError> {
        let pool = training::thread_pool();
        pool.install(|| {
            self.evaluate(step, |w| {
                let s = sample(&self.records, w, step);
                model.rollout(s.s0, s.actions, s.b0, self.h, step)
            })
        })
    }

    pub fn evaluate_cv(&self, step: usize) -> Result<MetricsReport, ProtocolError> {
        self.evaluate(step, |w| {
            let s = sample(&self.records, w, step);
            Ok::<_, ()>(baselines::constant_velocity_rollout(s.s0, self.h, step))
        })
    }
}

fn load_or_generate(
    dir: &Option<PathBuf>,
    cfg: &ProtocolConfig,
    n: usize,
) -> Result<Vec<TrajectoryRecord>, ProtocolError> {
    match dir {
        Some(d) => Ok(datagen::read_dataset(d)?),
        None => Ok(datagen::generate(&cfg.world, n, cfg.steps, cfg.policy)?),
    }
}

/// Writes `<dir>/<label>.bin` (+ sidecar) and `<dir>/<label>.log.json`.
fn save_run(dir: Option<&Path>, label: &str, out: &TrainOutcome) -> Result<(), ProtocolError> {
    let Some(dir) = dir else { return Ok(()) };
    std::fs::create_dir_all(dir).map_err(|source| ProtocolError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    out.models.save(&dir.join(format!("{label}.bin")), &out.params)?;
    let log_path = dir.join(format!("{label}.log.json"));
    let text = serde_json::to_string_pretty(&out.log).expect("log serializes");
    std::fs::write(&log_path, text).map_err(|source| ProtocolError::Io { path: log_path, source })
}

fn trained_row(
    bench: &Bench,
    out: &TrainOutcome,
    model: &str,
    fraction: Option<f64>,
    started: Instant,
    step: usize,
) -> Result<ProtocolRow, ProtocolError> {
    let integ = Integrator::new(out.params);
    Ok(ProtocolRow {
        model: model.into(),
        variant: Some(out.models.variant),
        train_horizon: Some(out.log.config.horizon),
        fraction,
        train_windows: Some(out.log.train_windows),
        params: evaluation::count_params(&out.models),
        flops: Some(evaluation::count_flops(&out.models, &integ, step)?),
        train_seconds: started.elapsed().as_secs_f64(),
        metrics: bench.evaluate_trained(out, step)?,
    })
}

fn train_variant(
    bench: &Bench,
    cfg: &ProtocolConfig,
    variant: Variant,
    horizon: usize,
    artifacts: Option<&Path>,
    label: &str,
) -> Result<ProtocolRow, ProtocolError> {
    let started = Instant::now();
    let tc = TrainConfig {
        variant,
        horizon,
        ..cfg.train.clone()
    };
    let out = training::train(&bench.records, &bench.split, &tc)?;
    save_run(artifacts, label, &out)?;
    let mut row = trained_row(bench, &out, variant.label(), None, started, cfg.eval_step)?;
    row.train_seconds = started.elapsed().as_secs_f64();
    Ok(row)
}

/// Epoch count that gives `budget` optimizer updates on `fraction` of the windows.
pub fn epochs_for_budget(bench: &Bench, tc: &TrainConfig, budget: usize) -> usize {
    let all = training::windows(&bench.records, &bench.split.train, tc.horizon, tc.stride);
    let n = training::select_fraction(&all, tc.data_fraction).len();
    budget.div_ceil(n.div_ceil(tc.batch_size).max(1)).max(1)
}

/// Runs one named experiment. Trained checkpoints and logs go to `artifacts` when given.
pub fn run_protocol(
    name: ProtocolName,
    cfg: &ProtocolConfig,
    artifacts: Option<&Path>,
) -> Result<ProtocolReport, ProtocolError> {
    cfg.validate()?;
    let step = cfg.eval_step;
    let (bench, rows) = match name {
        ProtocolName::Accuracy => {
            let bench = Bench::new(load_or_generate(&cfg.data, cfg, cfg.trajectories)?, cfg)?;
            let mut rows = Vec::new();
            for v in [Variant::Full, Variant::Phys] {
                let label = format!("{}_n{}", v.label(), cfg.train.horizon);
                rows.push(train_variant(&bench, cfg, v, cfg.train.horizon, artifacts, &label)?);
            }
            let started = Instant::now();
            let (kf, log) = baselines::train_kfns(&bench.records, &bench.split, &cfg.kfns)?;
            if let Some(dir) = artifacts {
                std::fs::create_dir_all(dir).map_err(|source| ProtocolError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
                kf.save(&dir.join("KF-NS.bin"), bench.h)?;
                let p = dir.join("KF-NS.log.json");
                std::fs::write(&p, serde_json::to_string_pretty(&log).expect("log serializes"))
                    .map_err(|source| ProtocolError::Io { path: p, source })?;
            }
            rows.push(ProtocolRow {
                model: "KF-NS".into(),
                variant: None,
                train_horizon: None,
                fraction: None,
                train_windows: Some(log.train_samples),
                params: kf.param_count(),
                flops: None,
                train_seconds: started.elapsed().as_secs_f64(),
                metrics: bench.evaluate_kfns(&kf, step)?,
            });
            rows.push(ProtocolRow {
                model: "Constant velocity".into(),
                variant: None,
                train_horizon: None,
                fraction: None,
                train_windows: None,
                params: 0,
                flops: None,
                train_seconds: 0.0,
                metrics: bench.evaluate_cv(step)?,
            });
            (bench, rows)
        }
        ProtocolName::Generalization => {
            let bench = Bench::new(load_or_generate(&cfg.data, cfg, cfg.trajectories)?, cfg)?;
            let mut rows = Vec::new();
            for n in [cfg.train.horizon, cfg.generalization_horizon] {
                let label = format!("{}_n{n}", Variant::Full.label());
                rows.push(train_variant(&bench, cfg, Variant::Full, n, artifacts, &label)?);
            }
            (bench, rows)
        }
        ProtocolName::Ablation => {
            let bench = Bench::new(load_or_generate(&cfg.data, cfg, cfg.trajectories)?, cfg)?;
            let mut rows = Vec::new();
            for v in Variant::ALL {
                rows.push(train_variant(&bench, cfg, v, cfg.train.horizon, artifacts, v.label())?);
            }
            (bench, rows)
        }
        ProtocolName::DataEfficiency => {
            let records = load_or_generate(&cfg.data_efficiency_data, cfg, cfg.data_efficiency_trajectories)?;
            let bench = Bench::new(records, cfg)?;
            let mut rows = Vec::new();
            for &v in &cfg.data_efficiency_variants {
                for &f in &cfg.fractions {
                    let started = Instant::now();
                    let mut tc = TrainConfig {
                        variant: v,
                        data_fraction: f,
                        ..cfg.train.clone()
                    };
                    tc.epochs = epochs_for_budget(&bench, &tc, cfg.update_budget);
                    tc.val_every = (tc.epochs / 20).max(1);
                    let out = training::train(&bench.records, &bench.split, &tc)?;
                    let label = format!("{}_frac{:03}", v.label(), (f * 100.0).round() as usize);
                    save_run(artifacts, &label, &out)?;
                    rows.push(trained_row(&bench, &out, v.label(), Some(f), started, step)?);
                }
            }
            (bench, rows)
        }
    };
    Ok(ProtocolReport {
        name,
        eval_step: step,
        test_sequences: bench.test.len(),
        rows,
        config: cfg.clone(),
    })
}
