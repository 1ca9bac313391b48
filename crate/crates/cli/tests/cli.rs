use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn saal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saal"))
        .args(args)
        .current_dir(dir)
        .env_remove("SAAL_JOBS")
        .output()
        .expect("binary runs")
}

fn quick_config(dir: &Path, extra_tasks: usize) -> PathBuf {
    let cfg = json!({
        "dataset": {
            "source": "synthetic",
            "generator": "planted_asymmetric",
            "spec": { "num_samples": 240, "latent_dim": 4, "input_dim": 6, "helper_outputs": 3,
                      "recipient_subspace": 2, "extra_tasks": extra_tasks }
        },
        "architecture": { "input_dim": 6, "hidden_width": 6, "total_encoder_depth": 2, "shared_depth": 1,
                          "decoder_depth": 1 },
        "trainer": { "epochs": 3, "batch_size": 16 },
        "strategy": "equal",
        "seeds": [0, 1, 2],
        "output_dir": "out"
    });
    let path = dir.join("exp.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read(path: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_per_seed_artefacts_and_mean() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), 0);
    let o = saal(
        tmp.path(),
        &["run", "--config", cfg.to_str().unwrap(), "--set", "strategy=saal_e"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut deltas = Vec::new();
    for seed in 0..3 {
        let dir = tmp.path().join(format!("out/seed{seed}"));
        for f in ["history.jsonl", "checkpoint.json", "report.json", "enumeration.json"] {
            assert!(dir.join(f).exists(), "seed{seed}/{f}");
        }
        let r = read(dir.join("report.json"));
        assert_eq!(r["seed"], seed);
        assert_eq!(r["config"]["strategy"], "saal_e");
        deltas.push(r["report"]["delta_mtl"].as_f64().unwrap());
        let header: Value = serde_json::from_str(
            std::fs::read_to_string(dir.join("history.jsonl"))
                .unwrap()
                .lines()
                .next()
                .unwrap(),
        )
        .unwrap();
        assert_eq!(header["seed"], seed);
        assert_eq!(read(dir.join("checkpoint.json"))["meta"]["seed"], seed);
    }
    let mean = read(tmp.path().join("out/report_mean.json"));
    let expected = deltas.iter().sum::<f64>() / 3.0;
    assert!((mean["report"]["delta_mtl"].as_f64().unwrap() - expected).abs() < 1e-12);

    let o = saal(tmp.path(), &["report", "out/report_mean.json"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("Δ_MTL"));
}

#[test]
fn single_seed_flag_replaces_the_seed_list() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), 0);
    let o = saal(tmp.path(), &["run", "--config", cfg.to_str().unwrap(), "--seed", "5"]);
    assert!(o.status.success());
    assert!(tmp.path().join("out/seed5/report.json").exists());
    assert!(!tmp.path().join("out/seed0").exists());
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), 0);
    let c = cfg.to_str().unwrap();
    for set in [
        "architecture.shared_depth=5",
        "trainer.bogus=1",
        "strategy=cagrad",
        "seeds=[]",
        "architecture.input_dim=3",
    ] {
        let o = saal(tmp.path(), &["run", "--config", c, "--set", set]);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{set}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let o = saal(tmp.path(), &["run", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        !tmp.path().join("out").exists(),
        "nothing is computed before validation"
    );
}

#[test]
fn divergence_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), 0);
    let o = saal(
        tmp.path(),
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "0",
            "--set",
            "trainer.eta0=1e6",
        ],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn relationships_enumeration_and_gradient_angle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), 1);
    let c = cfg.to_str().unwrap();
    let o = saal(
        tmp.path(),
        &[
            "relationships",
            "--config",
            c,
            "--seed",
            "0",
            "--method",
            "enum",
            "--out",
            "rel",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read(tmp.path().join("rel/enumeration.json"));
    assert_eq!(m["matrix"]["runs"], 6);
    assert!(tmp.path().join("rel/enumeration.txt").exists());

    let o = saal(
        tmp.path(),
        &[
            "relationships",
            "--config",
            c,
            "--seed",
            "0",
            "--method",
            "enum",
            "--out",
            "again",
            "--against",
            "rel/enumeration.json",
        ],
    );
    assert!(o.status.success());
    assert_eq!(
        read(tmp.path().join("again/correlation.json"))["correlation"]["mean"],
        1.0
    );

    let o = saal(
        tmp.path(),
        &[
            "relationships",
            "--config",
            c,
            "--method",
            "gradangle",
            "--out",
            "angle",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let scores = read(tmp.path().join("angle/gradient_angle.json"))["matrix"]["scores"].clone();
    for s in 0..3 {
        for t in 0..3 {
            assert_eq!(scores[s][t], scores[t][s]);
        }
    }

    let o = saal(
        tmp.path(),
        &[
            "relationships",
            "--config",
            c,
            "--seed",
            "0",
            "--method",
            "lookahead",
            "--out",
            "la",
        ],
    );
    assert!(o.status.success());
    assert!(
        tmp.path().join("la/correlation.json").exists(),
        "two matrices give a correlation report"
    );

    let o = saal(
        tmp.path(),
        &["relationships", "--config", c, "--method", "psychic", "--out", "x"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_reports_ratios_with_sampling_metadata() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), 0);
    let o = saal(
        tmp.path(),
        &[
            "bench",
            "--config",
            cfg.to_str().unwrap(),
            "--warmup",
            "2",
            "--samples",
            "5",
            "--strategies",
            "equal,saal_e,saal_w",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let b = read(tmp.path().join("out/bench.json"));
    assert_eq!((b["warmup"].as_u64(), b["samples"].as_u64()), (Some(2), Some(5)));
    let rows = b["rows"].as_array().unwrap();
    assert_eq!(rows[0], json!({"strategy": "equal", "ratio": 1.0}));
    assert_eq!(rows.len(), 3);
    assert!(stdout(&o).contains("2 warmup, 5 timed batches"));
}

#[test]
fn sweep_covers_every_depth_for_both_strategies() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), 0);
    let o = saal(
        tmp.path(),
        &[
            "--jobs",
            "2",
            "sweep-shared-depth",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "0",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read(tmp.path().join("out/sweep.json"));
    let rows = s["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3 * 2);
    let unshared_equal = &rows[0];
    assert_eq!(
        (
            unshared_equal["shared_depth"].as_u64(),
            unshared_equal["strategy"].as_str()
        ),
        (Some(0), Some("equal"))
    );
    assert!(unshared_equal["delta_mtl"].as_f64().unwrap().abs() < 1e-9);
    let o = saal(tmp.path(), &["report", "out/sweep.json"]);
    assert!(stdout(&o).contains("saal_e"));
}
