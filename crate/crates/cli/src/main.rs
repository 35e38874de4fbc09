//! `physord`: generate synthetic data, train, evaluate and run experiment protocols.
//!
//! Exit codes: 0 success, 1 IO, 2 config or validation, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use physord_core::baselines::{self, BaselineError, KfnsConfig, KfnsModel};
use physord_core::datagen::{self, ActionPolicy, DatagenError, WorldSpec};
use physord_core::evaluation::{self, EvalError, MetricsReport};
use physord_core::integrator::{Integrator, IntegratorError, State};
use physord_core::models::{self, sidecar_path, DynamicsModels, ModelError, Variant};
use physord_core::nn::NnError;
use physord_core::protocol::{run_protocol, Bench, ProtocolConfig, ProtocolError, ProtocolName};
use physord_core::training::{self, Split, TrainConfig, TrainError, Window};

/// A failure with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn io(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
    fn config(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
    fn numeric(msg: impl Into<String>) -> Self {
        Self { code: 3, msg: msg.into() }
    }
}

fn integrator_code(e: &IntegratorError) -> u8 {
    match e {
        IntegratorError::InvalidParams(_) | IntegratorError::TooFewActions { .. } => 2,
        _ => 3,
    }
}

impl From<DatagenError> for Failure {
    fn from(e: DatagenError) -> Self {
        let code = match &e {
            DatagenError::Io { .. } => 1,
            DatagenError::Integrator { .. } => 3,
            _ => 2,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<NnError> for Failure {
    fn from(e: NnError) -> Self {
        let code = if matches!(e, NnError::Io(_)) { 1 } else { 2 };
        Self { code, msg: e.to_string() }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Nn(n) => n.into(),
            ModelError::Integrator(i) => Self {
                code: integrator_code(&i),
                msg: i.to_string(),
            },
            other => Self::config(other.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NonFiniteLoss { .. } => 3,
            TrainError::Integrator(i) => integrator_code(i),
            _ => 2,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<BaselineError> for Failure {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Nn(n) => n.into(),
            BaselineError::CovarianceNotPSD { .. } => Self::numeric(e.to_string()),
            other => Self::config(other.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let code = match &e {
            EvalError::Io { .. } | EvalError::Csv(_) => 1,
            EvalError::Integrator(i) => integrator_code(i),
            _ => 2,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<ProtocolError> for Failure {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Data(d) => d.into(),
            ProtocolError::Train(t) => t.into(),
            ProtocolError::Baseline(b) => b.into(),
            ProtocolError::Eval(v) => v.into(),
            ProtocolError::Model(m) => m.into(),
            ProtocolError::Config(c) => Self::config(format!("invalid protocol config: {c}")),
            ProtocolError::Io { path, source } => Self::io(format!("{}: {source}", path.display())),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(name = "physord", version, about = "Physics-informed off-road vehicle dynamics on SE(3)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic trajectories (CSV + sidecars + manifest).
    Generate(GenerateArgs),
    /// Train a model variant or a baseline.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the constant-velocity baseline) at one step.
    Eval(EvalArgs),
    /// Run an experiment end to end.
    Protocol(ProtocolArgs),
}

#[derive(Parser, Serialize)]
struct GenerateArgs {
    /// World description (JSON); defaults apply to missing fields.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 60)]
    trajectories: usize,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = PolicyArg::RandomWalk)]
    policy: PolicyArg,
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum PolicyArg {
    RandomWalk,
    ScriptedTurns,
}

impl From<PolicyArg> for ActionPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::RandomWalk => ActionPolicy::RandomWalk,
            PolicyArg::ScriptedTurns => ActionPolicy::ScriptedTurns,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize, PartialEq, Eq, Debug)]
#[serde(rename_all = "lowercase")]
enum BaselineArg {
    /// Kalman filter with a learned measurement network.
    Kfns,
    /// Pure-neural variant (same as `--variant phys`).
    Neural,
}

#[derive(Parser, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training config (JSON). A `TrainConfig`, or a `KfnsConfig` with `--baseline kfns`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// full, phys, f or u.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_fraction: Option<f64>,
    /// Seed of the trajectory-level train/val/test split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Parser, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model or KF-NS checkpoint; omit with `--constant-velocity`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    constant_velocity: bool,
    #[arg(long, default_value_t = 20)]
    step: usize,
    /// Window stride over each trajectory.
    #[arg(long, default_value_t = 5)]
    stride: usize,
    /// Restrict to the test trajectories of this split file (written by `train`).
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Number of per-sequence prediction CSVs to write.
    #[arg(long, default_value_t = 10)]
    plots: usize,
}

#[derive(Parser, Serialize)]
struct ProtocolArgs {
    #[arg(long)]
    name: String,
    #[arg(long)]
    out: PathBuf,
    /// Protocol config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use this dataset instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))
}

#[derive(Serialize)]
struct Resolved<'a, A: Serialize, C: Serialize> {
    command: &'a str,
    args: &'a A,
    config: C,
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut world: WorldSpec = match &a.world {
        Some(p) => read_json(p)?,
        None => WorldSpec::default(),
    };
    if let Some(s) = a.seed {
        world.seed = s;
    }
    world.validate()?;
    let policy = ActionPolicy::from(a.policy);
    let recs = datagen::generate(&world, a.trajectories, a.steps, policy)?;
    let manifest = datagen::write_dataset(&a.out, &recs, Some(&world), Some(policy))?;
    write_json(
        &a.out.join("resolved_config.json"),
        &Resolved {
            command: "generate",
            args: a,
            config: &world,
        },
    )?;
    println!(
        "wrote {} trajectories ({} tags) to {}",
        manifest.files.len(),
        manifest.tags.len(),
        a.out.display()
    );
    Ok(())
}

fn load_data(dir: &Path) -> Result<Vec<datagen::TrajectoryRecord>> {
    let recs = datagen::read_dataset(dir)?;
    if recs.is_empty() {
        return Err(Failure::config(format!("{}: no trajectories", dir.display())));
    }
    Ok(recs)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let recs = load_data(&a.data)?;
    ensure_dir(&a.out)?;
    if a.baseline == Some(BaselineArg::Kfns) {
        if a.variant.is_some() {
            return Err(Failure::config("--variant and --baseline kfns are exclusive"));
        }
        let mut cfg: KfnsConfig = match &a.config {
            Some(p) => read_json(p)?,
            None => KfnsConfig::default(),
        };
        if let Some(e) = a.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        let split = Split::new(recs.len(), 0.15, 0.15, a.split_seed);
        let (model, log) = baselines::train_kfns(&recs, &split, &cfg)?;
        let ckpt = a.out.join("model.bin");
        model.save(&ckpt, recs[0].dt)?;
        write_json(&a.out.join("train_log.json"), &log)?;
        write_json(&a.out.join("split.json"), &split)?;
        write_json(
            &a.out.join("resolved_config.json"),
            &Resolved {
                command: "train",
                args: a,
                config: &cfg,
            },
        )?;
        println!(
            "KF-NS: {} params, Q={:e}, Rm={:e} -> {}",
            model.param_count(),
            log.chosen.0,
            log.chosen.1,
            ckpt.display()
        );
        return Ok(());
    }

    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    match (&a.variant, a.baseline) {
        (Some(_), Some(_)) => return Err(Failure::config("--variant and --baseline are exclusive")),
        (Some(v), None) => cfg.variant = v.parse::<Variant>().map_err(Failure::config)?,
        (None, Some(BaselineArg::Neural)) => cfg.variant = Variant::Phys,
        _ => {}
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.data_fraction {
        cfg.data_fraction = f;
    }
    cfg.validate()?;
    let split = Split::new(recs.len(), cfg.val_fraction, cfg.test_fraction, a.split_seed);
    write_json(
        &a.out.join("resolved_config.json"),
        &Resolved {
            command: "train",
            args: a,
            config: &cfg,
        },
    )?;
    let out = training::train(&recs, &split, &cfg)?;
    let ckpt = a.out.join("model.bin");
    out.models.save(&ckpt, &out.params)?;
    write_json(&a.out.join("train_log.json"), &out.log)?;
    write_json(&a.out.join("split.json"), &split)?;
    println!(
        "{}: {} params, best val {:.6} at epoch {} -> {}",
        cfg.variant.label(),
        out.models.param_count(),
        out.log.best_val.total,
        out.log.best_epoch,
        ckpt.display()
    );
    Ok(())
}

#[allow(clippy::large_enum_variant)]
enum Predictor {
    Model(DynamicsModels, Integrator),
    Kfns(KfnsModel),
    ConstantVelocity,
}

#[derive(Deserialize)]
struct SidecarKind {
    kind: Option<String>,
}

fn load_predictor(a: &EvalArgs, dt: f64) -> Result<(Predictor, String)> {
    match (&a.checkpoint, a.constant_velocity) {
        (Some(_), true) => Err(Failure::config("--checkpoint and --constant-velocity are exclusive")),
        (None, false) => Err(Failure::config("need --checkpoint or --constant-velocity")),
        (None, true) => Ok((Predictor::ConstantVelocity, "Constant velocity".into())),
        (Some(p), false) => {
            let kind: SidecarKind = read_json(&sidecar_path(p))?;
            if kind.kind.as_deref() == Some("kfns") {
                let (m, _) = KfnsModel::load(p)?;
                Ok((Predictor::Kfns(m), "KF-NS".into()))
            } else {
                let (m, vehicle) = DynamicsModels::load(p)?;
                let params = vehicle.with_h(dt).map_err(|e| Failure::config(e.to_string()))?;
                let label = m.variant.label().to_string();
                Ok((Predictor::Model(m, Integrator::new(params)), label))
            }
        }
    }
}

#[derive(Serialize)]
struct EvalReport {
    model: String,
    checkpoint: Option<PathBuf>,
    params: usize,
    flops: Option<u64>,
    metrics: MetricsReport,
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let recs = load_data(&a.data)?;
    let dt = recs[0].dt;
    let (pred, label) = load_predictor(a, dt)?;
    let trajs: Vec<usize> = match &a.split {
        Some(p) => read_json::<Split>(p)?.test,
        None => (0..recs.len()).collect(),
    };
    if let Some(&bad) = trajs.iter().find(|&&t| t >= recs.len()) {
        return Err(Failure::config(format!("split refers to trajectory {bad}, dataset has {}", recs.len())));
    }
    let wins = training::windows(&recs, &trajs, a.step, a.stride.max(1));
    if wins.is_empty() {
        let len = trajs.iter().map(|&t| recs[t].states.len().saturating_sub(1)).max().unwrap_or(0);
        return Err(EvalError::StepOutOfRange { step: a.step, len }.into());
    }
    let bench = Bench {
        records: recs,
        split: Split {
            train: vec![],
            val: vec![],
            test: trajs,
        },
        test: wins.clone(),
        h: dt,
    };
    let rollout = |w: &Window| -> std::result::Result<Vec<State>, String> {
        let s = training::sample(&bench.records, w, a.step);
        match &pred {
            Predictor::Model(m, integ) => {
                models::predict_plain(m, integ, s.s0, s.actions, s.b0, a.step).map_err(|e| e.to_string())
            }
            Predictor::Kfns(k) => k.rollout(s.s0, s.actions, s.b0, dt, a.step).map_err(|e| e.to_string()),
            Predictor::ConstantVelocity => Ok(baselines::constant_velocity_rollout(s.s0, dt, a.step)),
        }
    };
    let metrics = bench.evaluate(a.step, rollout)?;
    let (params, flops) = match &pred {
        Predictor::Model(m, integ) => (evaluation::count_params(m), Some(evaluation::count_flops(m, integ, a.step)?)),
        Predictor::Kfns(k) => (k.param_count(), None),
        Predictor::ConstantVelocity => (0, None),
    };

    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let stem = a.out.with_extension("");
    evaluation::write_table_csv(&stem.with_extension("csv"), &[(label.as_str(), &metrics)])?;
    let plots = PathBuf::from(format!("{}_predictions", stem.display()));
    ensure_dir(&plots)?;
    for (i, w) in wins.iter().take(a.plots).enumerate() {
        if let Ok(p) = rollout(w) {
            let s = training::sample(&bench.records, w, a.step);
            let path = plots.join(format!("seq_{i:04}.csv"));
            evaluation::write_prediction_csv(&path, s.s0, s.gt, &p, dt)?;
        }
    }
    let report = EvalReport {
        model: label.clone(),
        checkpoint: a.checkpoint.clone(),
        params,
        flops,
        metrics,
    };
    write_json(&a.out, &report)?;
    write_json(
        &PathBuf::from(format!("{}_resolved_config.json", stem.display())),
        &Resolved {
            command: "eval",
            args: a,
            config: (),
        },
    )?;
    println!(
        "{label} @ step {}: RMSE {:.4}, position {:.4} m, angle {:.4} rad over {} sequences ({} failed)",
        a.step,
        report.metrics.rmse,
        report.metrics.pos_dist,
        report.metrics.ang_dist,
        report.metrics.n_sequences,
        report.metrics.n_failed
    );
    Ok(())
}

fn cmd_protocol(a: &ProtocolArgs) -> Result<()> {
    let name: ProtocolName = a.name.parse().map_err(Failure::config)?;
    let mut cfg: ProtocolConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ProtocolConfig::default(),
    };
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
        if cfg.data_efficiency_data.is_none() {
            cfg.data_efficiency_data = Some(d.clone());
        }
    }
    if let Some(s) = a.seed {
        cfg.world.seed = s;
        cfg.train.seed = s;
        cfg.kfns.seed = s;
    }
    cfg.validate()?;
    ensure_dir(&a.out)?;
    write_json(
        &a.out.join("resolved_config.json"),
        &Resolved {
            command: "protocol",
            args: a,
            config: &cfg,
        },
    )?;
    let report = run_protocol(name, &cfg, Some(&a.out.join("runs")))?;
    write_json(&a.out.join("report.json"), &report)?;
    let labels: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            let mut l = r.model.clone();
            if let Some(f) = r.fraction {
                l.push_str(&format!(" ({:.0}%)", 100.0 * f));
            } else if name == ProtocolName::Generalization {
                l.push_str(&format!(" (n={})", r.train_horizon.unwrap_or(0)));
            }
            l
        })
        .collect();
    let entries: Vec<(&str, &MetricsReport)> =
        labels.iter().map(String::as_str).zip(report.rows.iter().map(|r| &r.metrics)).collect();
    evaluation::write_table_csv(&a.out.join("table.csv"), &entries)?;
    for (l, r) in labels.iter().zip(&report.rows) {
        println!(
            "{l:<24} RMSE {:.4}  pos {:.4} m  ang {:.4} rad  params {}",
            r.metrics.rmse, r.metrics.pos_dist, r.metrics.ang_dist, r.params
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Protocol(a) => cmd_protocol(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
