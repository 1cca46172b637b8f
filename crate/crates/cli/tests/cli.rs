use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pulse-cascade"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("manifest.json")).expect("manifest written");
    serde_json::from_str(&text).expect("manifest is JSON")
}

#[test]
fn vacuum_rabi_run_is_flat_and_documented() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("rabi0");
    let out = run(&["rabi", "--n", "0", "--t-end", "9", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));

    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["peak_excitation"].as_f64().unwrap().abs() < 1e-12);

    let m = manifest(&out_dir);
    assert_eq!(m["scenario"], "rabi");
    assert_eq!(m["config"]["input"]["n"], 0);
    assert!(m["convergence"]["passed"].as_bool().unwrap());
    for f in m["files"].as_array().unwrap() {
        assert!(out_dir.join(f.as_str().unwrap()).exists(), "listed file {f} missing");
    }
}

#[test]
fn invalid_config_exits_with_code_two_and_a_line() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(
        &path,
        "{\n  \"scenario\": \"rabi\",\n  \"input\": {\"kind\": \"fock\", \"n\": 1},\n  \"dt\": -0.5\n}\n",
    )
    .unwrap();
    let out = run(&["rabi", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("dt") && err.contains("line 4"), "{err}");

    fs::write(
        &path,
        "{\n  \"scenario\": \"rabi\",\n  \"input\": {\"kind\": \"fock\", \"n\": 1},\n  \"typo\": 1\n}\n",
    )
    .unwrap();
    let out = run(&["rabi", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("typo"), "{}", stderr(&out));
}

#[test]
fn command_line_flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("cfg.json");
    let out_dir = tmp.path().join("run");
    fs::write(
        &path,
        r#"{"scenario": "rabi", "input": {"kind": "fock", "n": 2}, "t_end": 14.0, "tau": 0.7}"#,
    )
    .unwrap();
    let out = run(&[
        "rabi",
        "--config",
        path.to_str().unwrap(),
        "--n",
        "1",
        "--tau",
        "0.9",
        "--skip-convergence-check",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let m = manifest(&out_dir);
    assert_eq!(m["config"]["input"]["n"], 1);
    assert_eq!(m["config"]["tau"], 0.9);
    assert_eq!(m["config"]["t_end"], 14.0);
    assert!(m["convergence"].is_null());
}

#[test]
fn scenario_mismatch_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("cfg.json");
    fs::write(
        &path,
        r#"{"scenario": "squeeze", "input": {"kind": "coherent", "alpha": 1.0}}"#,
    )
    .unwrap();
    let out = run(&["rabi", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn repeated_runs_write_identical_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        let out = run(&[
            "rabi",
            "--n",
            "2",
            "--t-end",
            "9",
            "--skip-convergence-check",
            "--out",
            d.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let mut compared = 0;
    for entry in fs::read_dir(&dirs[0]).unwrap() {
        let name = entry.unwrap().file_name();
        if Path::new(&name).extension().is_some_and(|e| e == "csv") {
            assert_eq!(
                fs::read(dirs[0].join(&name)).unwrap(),
                fs::read(dirs[1].join(&name)).unwrap()
            );
            compared += 1;
        }
    }
    assert!(compared > 0);
}

#[test]
fn small_property_battery_passes() {
    let out = run(&["check", "--small"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}\n{}", stderr(&out));
    assert!(!text.contains("FAIL"), "{text}");
}
