use std::process::Command;

use slim::critvals::read_critical_values;
use slim::harness::read_summary;

fn slim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slim"))
}

const SMALL: &str = r#"
seed = 4
n = 800
reps = 3
pipeline = "second_order"
N = 200
T = 400
B_g = 8
B_G0 = 8
M_MB = 50
gamma0 = 0.1
inference = ["random_scaling", "plugin"]
jtests = ["debiased"]

[trace]
stride = 50

[dgp]
kind = "linear_iv"
theta_o = [1.0, -0.5]
d_g = 4
"#;

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("out");
    let run = slim()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success());
    for f in ["summary.csv", "reps.csv", "timing.csv", "trace_0.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary = read_summary(out.join("summary.csv")).unwrap();
    assert!(summary.iter().any(|r| r.method == "plugin_wald" && r.metric == "coverage"));
    let reps = std::fs::read_to_string(out.join("reps.csv")).unwrap();
    assert_eq!(reps.lines().count(), 4);
}

#[test]
fn run_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, SMALL.replace("reps = 3", "reps = 3\nrepetitions = 3")).unwrap();
    let out = slim()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--out", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("repetitions"));
}

#[test]
fn critvals_writes_wald_form_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cv.csv");
    let status = slim()
        .args(["critvals", "--ell", "2", "--reps", "10000", "--path-length", "1000", "--out"])
        .arg(&path)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("ell,alpha,cv"));
    let rows = read_critical_values(&text).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ell == 2 && r.cv > 0.0));
}

#[test]
fn critvals_refuses_short_paths() {
    let out = slim()
        .args(["critvals", "--ell", "1", "--reps", "100"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn estimate_on_simulated_and_supplied_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = slim().args(["estimate", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("theta_1,") && text.contains("plugin_theta_1"));

    let design = slim::model::LinearIvDesign::default();
    let data = slim::model::linear_iv::generate_linear_iv(&design, 800, 2).unwrap();
    let csv = dir.path().join("data.csv");
    data.write_csv(&csv).unwrap();
    let out = slim()
        .args(["estimate", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("j_debiased"));
}

#[test]
fn selftest_passes() {
    let out = slim().arg("selftest").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    assert!(!text.contains("FAIL"));
}
