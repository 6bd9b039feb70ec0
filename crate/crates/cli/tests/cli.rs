use std::path::Path;
use std::process::{Command, Output};

fn sid(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sid"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SID_WORKERS")
        .output()
        .unwrap()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sid"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    (header, rows)
}

fn col(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let j = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[j].parse().unwrap()).collect()
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("cfg.json");
    std::fs::write(&p, json).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn cascade_writes_decreasing_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = sid(
        &["cascade", "--alpha", "0.5", "--m", "2", "--depth", "10"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("descent bound holds"));
    let (h, rows) = csv(&dir.path().join("trace.csv"));
    assert_eq!(h, ["step", "p0", "p1", "kl_to_target", "kl_step"]);
    assert_eq!(rows.len(), 11);
    let kl = col(&h, &rows, "kl_to_target");
    assert!(kl.windows(2).all(|w| w[1] < w[0]), "{kl:?}");
    let p0 = col(&h, &rows, "p0");
    assert!((p0[1] - 0.8134).abs() < 1e-4);
    assert!((p0[2] - 0.9010).abs() < 1e-4);
}

#[test]
fn cascade_rejects_bad_alpha_and_accepts_zero_depth() {
    let dir = tempfile::tempdir().unwrap();
    for alpha in ["1.1", "0", "-0.2"] {
        let o = sid(&["cascade", &format!("--alpha={alpha}")], dir.path());
        assert_eq!(code(&o), 2, "alpha {alpha}");
    }
    let o = sid(&["cascade", "--depth", "0"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, rows) = csv(&dir.path().join("trace.csv"));
    assert_eq!(rows.len(), 1);
}

#[test]
fn train_sid_and_bp_write_outputs() {
    for rule in ["sid", "bp"] {
        let dir = tempfile::tempdir().unwrap();
        let o = sid(&["train", "--rule", rule, "--epochs", "30"], dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let acc: f64 = stdout(&o)
            .trim()
            .rsplit(' ')
            .next()
            .unwrap()
            .parse()
            .unwrap();
        assert!(acc >= 0.95, "{rule}: {acc}");
        for f in ["report.json", "report.csv", "model.ckpt"] {
            assert!(dir.path().join(f).is_file(), "{rule}: {f}");
        }
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report["rule"], rule);
        assert_eq!(report["epochs"].as_array().unwrap().len(), 30);
        let (h, rows) = csv(&dir.path().join("report.csv"));
        assert_eq!(rows.len(), 30);
        assert!(h.contains(&"test_acc".to_string()));
    }
}

#[test]
fn train_seed_is_deterministic() {
    let run = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let o = sid(
            &["train", "--epochs", "3", "--seed", seed, "--workers", "2"],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        v.as_object_mut().unwrap().remove("timing");
        for e in v["epochs"].as_array_mut().unwrap() {
            let e = e.as_object_mut().unwrap();
            e.retain(|k, _| !k.ends_with("_ms"));
        }
        (v, std::fs::read(dir.path().join("model.ckpt")).unwrap())
    };
    let a = run("5");
    assert_eq!(a, run("5"));
    assert_ne!(a, run("6"));
}

#[test]
fn train_config_errors_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = sid(
        &["train", "--config", missing.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), r#"{"epochz": 3}"#);
    assert_eq!(code(&sid(&["train", "--config", &cfg], dir.path())), 2);

    let cfg = write_config(dir.path(), r#"{"alpha": 1.5}"#);
    assert_eq!(code(&sid(&["train", "--config", &cfg], dir.path())), 2);

    assert_eq!(
        code(&sid(&["train", "--strategy", "sideways"], dir.path())),
        2
    );
}

#[test]
fn train_config_file_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"epochs": 4, "layers": 2, "n": 120, "classes": 3, "dim": 3, "separation": 8.0}"#,
    );
    let o = sid(&["train", "--config", &cfg, "--workers", "3"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 4);
    assert_eq!(report["config"]["layers"], 2);
}

#[test]
fn gradcheck_exit_codes() {
    let o = run(&["gradcheck", "--trials", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("worst relative error"));
    assert_eq!(
        code(&run(&[
            "gradcheck",
            "--trials",
            "5",
            "--tolerance",
            "1e-12"
        ])),
        1
    );
    assert_eq!(code(&run(&["gradcheck", "--trials", "0"])), 2);
    assert_eq!(code(&run(&["gradcheck", "--m", "1"])), 2);
}

#[test]
fn profile_writes_speedup_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = sid(
        &[
            "profile",
            "--layers",
            "8",
            "--hidden",
            "16",
            "--batch",
            "32",
            "--repeats",
            "3",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, rows) = csv(&dir.path().join("speedup.csv"));
    assert_eq!(h, ["P", "T_BP", "T_SID", "speedup"]);
    assert_eq!(rows.len(), 4);
    assert_eq!(col(&h, &rows, "P"), [1.0, 2.0, 4.0, 8.0]);
    let s = col(&h, &rows, "speedup");
    assert!(s.windows(2).all(|w| w[1] >= w[0]), "{s:?}");
    assert!(s.iter().all(|x| x.is_finite() && *x > 0.0));
    assert!(dir.path().join("projection.json").is_file());
}

#[test]
fn profile_argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sid(&["profile", "--repeats", "2"], dir.path())), 2);
    assert_eq!(code(&sid(&["profile", "--devices", "0,2"], dir.path())), 2);
    let o = sid(
        &[
            "profile",
            "--layers",
            "1",
            "--hidden",
            "8",
            "--batch",
            "16",
            "--repeats",
            "3",
            "--devices",
            "1,2",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, rows) = csv(&dir.path().join("speedup.csv"));
    let t = col(&h, &rows, "T_SID");
    assert_eq!(t[0], t[1]);
}

#[test]
fn noise_sweep_rows_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"epochs": 20}"#);
    let o = sid(
        &["noise-sweep", "--rates", "0,0.2,0.4", "--config", &cfg],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, rows) = csv(&dir.path().join("noise.csv"));
    assert_eq!(h, ["rate", "acc_sid", "acc_bp", "gap"]);
    assert_eq!(rows.len(), 3);
    let gap = col(&h, &rows, "gap");
    assert!(gap[0].abs() <= 0.03, "{gap:?}");
    let (sid_acc, bp_acc) = (col(&h, &rows, "acc_sid"), col(&h, &rows, "acc_bp"));
    for (g, (s, b)) in gap.iter().zip(sid_acc.iter().zip(&bp_acc)) {
        assert!((g - (s - b)).abs() < 1e-5);
    }

    assert_eq!(code(&sid(&["noise-sweep", "--rates", ""], dir.path())), 2);
    assert_eq!(code(&sid(&["noise-sweep"], dir.path())), 2);
    assert_eq!(
        code(&sid(&["noise-sweep", "--rates", "1.5"], dir.path())),
        2
    );
}

#[test]
fn staleness_table_starts_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"epochs": 3}"#);
    let o = sid(&["staleness", "--k", "0,1,4", "--config", &cfg], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, rows) = csv(&dir.path().join("staleness.csv"));
    assert_eq!(h, ["k", "mean_param_delta", "mean_grad_error", "samples"]);
    assert_eq!(rows.len(), 3);
    let err = col(&h, &rows, "mean_grad_error");
    assert_eq!(err[0], 0.0);
    assert!(err[1] > 0.0 && err[2] > err[1], "{err:?}");

    assert_eq!(code(&sid(&["staleness", "--k=-1"], dir.path())), 2);
    assert_eq!(code(&sid(&["staleness", "--k", ""], dir.path())), 2);
}

#[test]
fn workers_env_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sid"))
        .args(["train", "--epochs", "1", "--out"])
        .arg(dir.path())
        .env("SID_WORKERS", "notanumber")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_sid"))
        .args(["train", "--epochs", "1", "--out"])
        .arg(dir.path())
        .env("SID_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn help_and_unknown_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in [
        "cascade",
        "train",
        "gradcheck",
        "profile",
        "noise-sweep",
        "staleness",
    ] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
    assert_eq!(code(&sid(&["frobnicate"], dir.path())), 2);
}
