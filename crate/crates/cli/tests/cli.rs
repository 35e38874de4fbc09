use std::path::Path;
use std::process::{Command, Output};

use physord_core::datagen::{self, TrajectoryRecord};
use physord_core::integrator::{Integrator, State, VehicleParams};
use physord_core::liegroup::{Mat3, Vec3};
use physord_core::models::{self, Action, DynamicsModels, Observation, Variant};
use physord_core::nn::Activation;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde_json::Value;

fn physord(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physord"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn generate(dir: &Path, trajectories: usize, steps: usize, seed: u64) -> Output {
    physord(&[
        "generate",
        "--out",
        dir.to_str().unwrap(),
        "--trajectories",
        &trajectories.to_string(),
        "--steps",
        &steps.to_string(),
        "--seed",
        &seed.to_string(),
    ])
}

#[test]
fn generate_defaults_list_every_tag() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = physord(&["generate", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = json(&out.join(datagen::MANIFEST_FILE));
    assert_eq!(m["files"].as_array().unwrap().len(), 60);
    assert_eq!(m["tags"].as_array().unwrap().len(), 7);
    assert!(out.join("resolved_config.json").exists());
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&generate(&a, 3, 30, 9)), 0);
    assert_eq!(code(&generate(&b, 3, 30, 9)), 0);
    for i in 0..3 {
        let name = format!("traj_{i:04}.csv");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn generate_rejects_short_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let o = generate(&dir.path().join("d"), 2, 10, 0);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("21"), "{}", stderr(&o));
}

#[test]
fn generate_bad_world_file() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("world.json");
    std::fs::write(&w, "{\"gravity\": -1.0}").unwrap();
    let o = physord(&["generate", "--world", w.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let missing = dir.path().join("nope.json");
    let o = physord(&["generate", "--world", missing.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_missing_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_data");
    let o = physord(&["train", "--data", missing.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no_such_data"), "{}", stderr(&o));
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&generate(&data, 7, 40, 1)), 0);
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, r#"{"horizon": 5, "epochs": 1, "stride": 5}"#).unwrap();
    let run = dir.path().join("run");
    let o = physord(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--variant",
        "full",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let side = json(&run.join("model.bin.json"));
    assert_eq!(side["param_count"], 5708);
    let log = json(&run.join("train_log.json"));
    assert_eq!(log["config"]["horizon"], 5);
    let resolved = json(&run.join("resolved_config.json"));
    assert_eq!(resolved["config"]["epochs"], 1);

    let report = dir.path().join("eval/report.json");
    let o = physord(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        run.join("model.bin").to_str().unwrap(),
        "--split",
        run.join("split.json").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&report);
    assert_eq!(r["params"], 5708);
    assert!(r["flops"].as_u64().unwrap() > 0);
    assert_eq!(r["metrics"]["eval_step"], 20);
    assert!(dir.path().join("eval/report.csv").exists());
    assert!(dir.path().join("eval/report_predictions/seq_0000.csv").exists());

    let o = physord(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        run.join("model.bin").to_str().unwrap(),
        "--step",
        "45",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn step_beyond_window_length() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&generate(&data, 2, 21, 2)), 0);
    let o = physord(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--constant-velocity",
        "--step",
        "25",
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("25"));
}

#[test]
fn baselines_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&generate(&data, 7, 40, 3)), 0);
    let kcfg = dir.path().join("kf.json");
    std::fs::write(&kcfg, r#"{"epochs": 1, "q_grid": [0.01], "rm_grid": [0.01]}"#).unwrap();
    let kf = dir.path().join("kf");
    let o = physord(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        kcfg.to_str().unwrap(),
        "--out",
        kf.to_str().unwrap(),
        "--baseline",
        "kfns",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = dir.path().join("kf_report.json");
    let o = physord(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        kf.join("model.bin").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&report)["model"], "KF-NS");

    let neural = dir.path().join("neural");
    let o = physord(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        neural.to_str().unwrap(),
        "--baseline",
        "neural",
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&neural.join("model.bin.json"))["descriptor"]["variant"], "phys");

    let o = physord(&["train", "--data", data.to_str().unwrap(), "--out", neural.to_str().unwrap(), "--variant", "x"]);
    assert_eq!(code(&o), 2);
}

fn oracle_dataset(models: &DynamicsModels, params: &VehicleParams, n: usize, steps: usize) -> Vec<TrajectoryRecord> {
    let integ = Integrator::new(*params);
    (0..n)
        .map(|i| {
            let s0 = State {
                x: Vec3::new(i as f64, 0.0, 0.5),
                r: Mat3::IDENTITY,
                v: Vec3::new(1.0 + 0.2 * i as f64, 0.1, 0.0),
                w: Vec3::new(0.0, 0.0, 0.1),
            };
            let actions: Vec<Action> = (0..steps)
                .map(|t| Action::new(0.5, 0.3 * ((t as f64) * 0.2 + i as f64).sin(), 0.0))
                .collect();
            let b0 = Observation {
                wheel_disc: [0.1, 0.2, 0.1, 0.0],
            };
            let mut states = vec![s0.clone()];
            states.extend(models::predict_plain(models, &integ, &s0, &actions, &b0, steps - 1).unwrap());
            TrajectoryRecord {
                dt: params.h,
                terrain_tag: "Dirt".into(),
                b0,
                seed: i as u64,
                states,
                actions,
            }
        })
        .collect()
}

#[test]
fn oracle_checkpoint_has_near_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
    let mut m = DynamicsModels::init(Variant::Full, Activation::Tanh, &mut rng);
    let flat: Vec<f64> = m.flat_params().iter().map(|v| 0.2 * v).collect();
    m.set_flat_params(&flat).unwrap();
    let params = VehicleParams::default();
    let recs = oracle_dataset(&m, &params, 3, 30);
    let data = dir.path().join("data");
    datagen::write_dataset(&data, &recs, None, None).unwrap();
    let ckpt = dir.path().join("oracle.bin");
    m.save(&ckpt, &params).unwrap();
    let report = dir.path().join("r.json");
    let o = physord(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&report);
    for k in ["rmse", "pos_dist", "ang_dist"] {
        assert!(r["metrics"][k].as_f64().unwrap() < 1e-9, "{k}: {}", r["metrics"][k]);
    }
}

#[test]
fn protocols_emit_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("protocol.json");
    std::fs::write(
        &cfg,
        r#"{
            "trajectories": 8, "steps": 40, "eval_step": 5, "generalization_horizon": 2,
            "data_efficiency_trajectories": 8, "update_budget": 2,
            "world": {"substeps": 10},
            "train": {"epochs": 1, "horizon": 5, "val_fraction": 0.25, "test_fraction": 0.25},
            "kfns": {"epochs": 1, "horizon": 5, "q_grid": [0.01], "rm_grid": [0.01]}
        }"#,
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = physord(&["protocol", "--name", name, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{name}: {}", stderr(&o));
        assert!(out.join("resolved_config.json").exists());
        assert!(out.join("table.csv").exists());
        json(&out.join("report.json"))
    };
    let de = run("data_efficiency");
    let fractions: Vec<f64> = de["rows"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["model"] == "PhysORD")
        .map(|r| r["fraction"].as_f64().unwrap())
        .collect();
    assert_eq!(fractions, [0.01, 0.1, 0.5, 0.8, 1.0]);

    let ab = run("ablation");
    let models: Vec<&str> = ab["rows"].as_array().unwrap().iter().map(|r| r["model"].as_str().unwrap()).collect();
    assert_eq!(models, ["Ours-Phys", "Ours-F", "Ours-U", "PhysORD"]);

    let gen = run("generalization");
    let rows = gen["rows"].as_array().unwrap();
    assert_eq!(rows[1]["train_horizon"], 2);
    assert_eq!(rows[1]["metrics"]["eval_step"], 5);
    assert!(dir.path().join("generalization/runs/PhysORD_n2.bin").exists());

    let o = physord(&["protocol", "--name", "speed", "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
