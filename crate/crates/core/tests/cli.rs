use std::path::Path;
use std::process::Command;

fn mfrel() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mfrel"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = r#"{"problem":"multimodal-2f","methods":["amgpra-eff"],"repetitions":1,"n_initial":6,"reference_n":20000,"nugget":1e-12,"lengthscale_max":1e4"#;

#[test]
fn successful_run_exits_zero_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}}}"));
    let out = dir.path().join("out");
    let st = mfrel().arg("run").arg(&cfg).arg("--out").arg(&out).args(["--seed", "7"]).output().unwrap();
    assert_eq!(st.status.code(), Some(0), "{}", String::from_utf8_lossy(&st.stderr));
    let stdout = String::from_utf8(st.stdout).unwrap();
    assert!(stdout.starts_with("problem,sweep_param,"));

    let run_dir = out.join("multimodal-2f").join("amgpra-eff");
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("run_000.json")).unwrap()).unwrap();
    assert_eq!(record["seed"], 7);
    assert!(record["history"]["estimate"]["converged"].as_bool().unwrap());
    let history = std::fs::read_to_string(run_dir.join("history_000.csv")).unwrap();
    assert!(history.starts_with("iteration,point_index,level,score,pf_hat,max_eff,cost_cum,evals_l0,evals_l1\n"));
    assert!(out.join("summary.csv").exists());
}

#[test]
fn unconverged_run_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!(r#"{SMALL},"max_iterations":1}}"#));
    let st = mfrel().arg("run").arg(&cfg).arg("--out").arg(dir.path().join("out")).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
}

#[test]
fn configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = [
        r#"{"problem":"unknown-x"}"#,
        r#"{"problem":"multimodal-2f","bogus":1}"#,
        r#"{"problem":"multimodal-2f","repetitions":0}"#,
        "{",
    ];
    for text in bad {
        let cfg = write_config(dir.path(), text);
        let st = mfrel().arg("run").arg(&cfg).arg("--out").arg(&out).output().unwrap();
        assert_eq!(st.status.code(), Some(2), "{text}");
    }
    let cfg = write_config(dir.path(), &format!("{SMALL}}}"));
    let st = mfrel().arg("run").arg(&cfg).args(["--method", "mfegra"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    let st = mfrel().arg("run").arg(&cfg).args(["--method", "nope"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    let st = mfrel().arg("run").arg(dir.path().join("missing.json")).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    let st = mfrel().args(["frobnicate"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
}

#[test]
fn reference_command() {
    let st = mfrel().args(["reference", "multimodal-2f", "--n", "50000"]).output().unwrap();
    assert_eq!(st.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(r["n"], 50000);
    let pf = r["pf"].as_f64().unwrap();
    assert!((pf - 3.13e-2).abs() < 4.0 * (3.13e-2 * 0.97 / 5e4f64).sqrt(), "{pf}");

    let again = mfrel().args(["reference", "multimodal-2f", "--n", "50000"]).output().unwrap();
    assert_eq!(st.stdout, again.stdout);

    let st = mfrel().args(["reference", "no-such-problem", "--n", "10"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    let st = mfrel().args(["reference", "tendim-2f", "--n", "0"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
}
