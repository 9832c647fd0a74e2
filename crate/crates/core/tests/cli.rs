// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::Instant;

use serde_json::{json, Value};

use mixture_cpd::cli::{cmd_detect, ConfigDocument};
use mixture_cpd::detectors::{multicyclic_run, run_detector, DetectorKind, SliceSource};
use mixture_cpd::measures::{geometric_prior, MixingGrid};
use mixture_cpd::models::{sample_path, GaussianIid, ObservationModel};
use mixture_cpd::montecarlo::trial_rng;

fn mixcpd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixcpd"))
        .args(args)
        .env_remove("MIXCPD_WORKERS")
        .output()
        .unwrap()
}

fn base_config() -> Value {
    json!({
        "model": {"type": "gaussian_iid"},
        "prior": {"q": 0.0, "family": {"type": "geometric", "rho": 0.1}},
        "mixing": {"type": "atoms", "atoms": [[0.5], [1.0], [1.5]]},
        "detector": {"kind": "ms"},
        "calibration": {"method": "ms_pfa", "alpha": 0.05}
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn calibrate_examples() {
    let tmp = tempfile::tempdir().unwrap();
    let ms = write_config(tmp.path(), "ms.json", &base_config());
    let out = mixcpd(&["calibrate", ms.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("A = 19\n"), "{}", stdout(&out));
    assert!(stdout(&out).contains("log A = 2.944438979\n"));

    let mut msr = base_config();
    msr["detector"] = json!({"kind": "msr", "omega": 0.0});
    msr["calibration"] = json!({"method": "msr_pfa", "alpha": 0.01});
    let path = write_config(tmp.path(), "msr.json", &msr);
    let out = mixcpd(&["calibrate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("A = 900\n"), "{}", stdout(&out));

    let mut bayes = base_config();
    bayes["calibration"] = json!({"method": "bayes_cost", "c": 0.001, "r": 1.0, "d": 2.0});
    let path = write_config(tmp.path(), "bayes.json", &bayes);
    let out = mixcpd(&["calibrate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("A = 500\n"), "{}", stdout(&out));
    // the JSON block parses back to a threshold spec
    let json_start = stdout(&out).find('{').unwrap();
    let spec: Value = serde_json::from_str(&stdout(&out)[json_start..]).unwrap();
    assert_eq!(spec["kind"]["method"], "bayes_cost");
}

#[test]
fn config_errors_exit_with_code_two_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = base_config();
    v["calibration"]["alpah"] = json!(0.1);
    let path = write_config(tmp.path(), "typo.json", &v);
    let out = mixcpd(&["calibrate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("alpah"), "{}", stderr(&out));

    let mut v = base_config();
    v["montecarlo"] = json!({"seed": 1, "trials": 0, "horizon": 2000,
        "scenarios": [{"estimand": "pfa_tail", "name": "p"}]});
    let path = write_config(tmp.path(), "zero.json", &v);
    let start = Instant::now();
    let out = mixcpd(&[
        "simulate",
        path.to_str().unwrap(),
        "--out-dir",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("montecarlo.trials"),
        "{}",
        stderr(&out)
    );
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert!(!tmp.path().join("o").join("report.json").exists());

    let mut v = base_config();
    v["prior"]["q"] = json!(0.6);
    v["calibration"]["alpha"] = json!(0.5);
    let path = write_config(tmp.path(), "alpha.json", &v);
    let out = mixcpd(&["calibrate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("calibration.alpha"),
        "{}",
        stderr(&out)
    );

    let out = mixcpd(&[
        "calibrate",
        tmp.path().join("missing.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = mixcpd(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_smoke_round_trip_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = base_config();
    v["montecarlo"] = json!({"seed": 7, "trials": 1000, "horizon": 2000,
        "scenarios": [{"estimand": "pfa_tail", "name": "pfa"}]});
    v["output"] = json!({"dir": tmp.path().join("run").to_str().unwrap(), "report": "r.json"});
    let path = write_config(tmp.path(), "sim.json", &v);
    let start = Instant::now();
    let out = mixcpd(&["simulate", path.to_str().unwrap()]);
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(secs < 10.0, "{secs} s");
    assert!(stdout(&out).contains("pfa"));
    let first = fs::read(tmp.path().join("run/r.json")).unwrap();
    let report: Value = serde_json::from_slice(&first).unwrap();
    let echoed = ConfigDocument::from_json(&report["config"].to_string()).unwrap();
    let original = ConfigDocument::load(&path).unwrap();
    assert_eq!(echoed, original);
    let est = &report["scenarios"][0]["results"][0];
    assert!(
        est["estimate"]["point"].as_f64().unwrap()
            <= 0.05 + 3.0 * est["estimate"]["stderr"].as_f64().unwrap()
    );
    assert!(report["cp2"]["label"]
        .as_str()
        .unwrap()
        .contains("surrogate"));

    let out = mixcpd(&["simulate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(first, fs::read(tmp.path().join("run/r.json")).unwrap());
}

#[test]
fn simulate_writes_ladder_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = base_config();
    v["montecarlo"] = json!({"seed": 8, "trials": 300, "horizon": 2000,
        "scenarios": [{"estimand": "delay_ladder", "name": "lad", "k": 0, "theta": [1.0],
                       "log_thresholds": [4, 5, 6, 7, 8]}]});
    let path = write_config(tmp.path(), "lad.json", &v);
    let dir = tmp.path().join("out");
    let out = mixcpd(&[
        "simulate",
        path.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.join("lad.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "log_A,mean_delay,stderr,prediction");
    assert_eq!(lines.len(), 6);
    let report: Value =
        serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    let slope = report["scenarios"][0]["slope"]["slope"].as_f64().unwrap();
    assert!(slope > 1.0 && slope < 2.5, "{slope}");
}

fn write_rows(path: &Path, rows: &[Vec<f64>], header: Option<&str>) {
    let mut text = String::new();
    if let Some(h) = header {
        text.push_str(h);
        text.push('\n');
    }
    for r in rows {
        let cells: Vec<String> = r.iter().map(|x| format!("{x:?}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

#[test]
fn detect_empty_file_is_censored() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.json", &base_config());
    let data = tmp.path().join("empty.csv");
    fs::write(&data, "").unwrap();
    let dir = tmp.path().join("out");
    let out = mixcpd(&[
        "detect",
        config.to_str().unwrap(),
        data.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("CENSORED"));
    assert_eq!(
        fs::read_to_string(dir.join("alarms.csv")).unwrap(),
        "alarm_time\nCENSORED\n"
    );
}

#[test]
fn detect_multicyclic_drift_only_pattern() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = base_config();
    v["mixing"] = json!({"type": "atoms", "atoms": [[0.0]]});
    v["detector"] = json!({"kind": "msr", "omega": 0.0});
    v["calibration"] = json!({"method": "explicit", "log_threshold": 10.5f64.ln()});
    let config = write_config(tmp.path(), "c.json", &v);
    let data = tmp.path().join("d.csv");
    let rows: Vec<Vec<f64>> = (0..33).map(|i| vec![(i as f64).sin()]).collect();
    write_rows(&data, &rows, Some("x"));
    let dir = tmp.path().join("out");
    let out = mixcpd(&[
        "detect",
        config.to_str().unwrap(),
        data.to_str().unwrap(),
        "--multicyclic",
        "--trajectory",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(
        stdout(&out).contains("alarms: 11,22,33"),
        "{}",
        stdout(&out)
    );
    assert_eq!(
        fs::read_to_string(dir.join("alarms.csv")).unwrap(),
        "alarm_time\n11\n22\n33\n"
    );
    let traj = fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    let lines: Vec<&str> = traj.lines().collect();
    assert_eq!(lines[0], "n,log_stat,crossed");
    assert_eq!(lines.len(), 34);
    assert!(lines[11].ends_with(",1"));
    assert!(lines[10].ends_with(",0"));
}

#[test]
fn detect_matches_in_process_detector() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = base_config();
    v["calibration"] = json!({"method": "explicit", "log_threshold": 3.0});
    let config = write_config(tmp.path(), "c.json", &v);
    let grid = Arc::new(MixingGrid::new(vec![vec![0.5], vec![1.0], vec![1.5]], &[1.0; 3]).unwrap());
    let mut model = GaussianIid::new(grid.clone()).unwrap();
    let prior = geometric_prior(0.1, 0.0).unwrap();
    for seed in 0..10 {
        let rows = sample_path(
            &model,
            Some(40 + seed * 7),
            &[1.0],
            400,
            &mut trial_rng(seed, 0, 0),
        )
        .unwrap();
        let data = tmp.path().join(format!("d{seed}.csv"));
        write_rows(&data, &rows, None);

        model.reset();
        let expected = run_detector(
            DetectorKind::Ms,
            &mut model,
            &prior,
            &grid,
            3.0,
            &mut SliceSource::new(&rows),
            400,
            false,
        )
        .unwrap();
        let dir = tmp.path().join(format!("o{seed}"));
        let out = mixcpd(&[
            "detect",
            config.to_str().unwrap(),
            data.to_str().unwrap(),
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let alarms = fs::read_to_string(dir.join("alarms.csv")).unwrap();
        let want = match expected.stop_time {
            Some(t) => format!("alarm_time\n{t}\n"),
            None => "alarm_time\nCENSORED\n".to_string(),
        };
        assert_eq!(alarms, want);

        let multi = multicyclic_run(
            DetectorKind::Ms,
            &mut model,
            &prior,
            &grid,
            3.0,
            &rows,
            false,
        )
        .unwrap();
        let out = mixcpd(&[
            "detect",
            config.to_str().unwrap(),
            data.to_str().unwrap(),
            "--multicyclic",
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
        let got: Vec<u64> = fs::read_to_string(dir.join("alarms.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .filter_map(|l| l.parse().ok())
            .collect();
        assert_eq!(got, multi.alarms);
    }
}

#[test]
fn detect_reports_malformed_rows_with_line_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.json", &base_config());
    let data = tmp.path().join("bad.csv");
    fs::write(&data, "x\n0.1\n0.2\nnot-a-number\n0.3\n").unwrap();
    let out = mixcpd(&[
        "detect",
        config.to_str().unwrap(),
        data.to_str().unwrap(),
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));

    fs::write(&data, "0.1\n0.2,0.5\n").unwrap();
    let out = mixcpd(&[
        "detect",
        config.to_str().unwrap(),
        data.to_str().unwrap(),
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn detect_injected_shift_alarms_after_change_in_most_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = base_config();
    v["prior"] = json!({"q": 0.0, "family": {"type": "geometric", "rho": 0.001}});
    v["detector"] = json!({"kind": "msr", "omega": 0.0});
    v["calibration"] = json!({"method": "msr_pfa", "alpha": 0.01});
    v["output"] = json!({"dir": tmp.path().join("out").to_str().unwrap()});
    let config = write_config(tmp.path(), "c.json", &v);
    let grid = Arc::new(MixingGrid::point(vec![1.0]).unwrap());
    let sampler_model = GaussianIid::new(grid).unwrap();
    const SEEDS: u64 = 200;
    let mut good = 0;
    let mut sink = Vec::new();
    for seed in 0..SEEDS {
        let rows = sample_path(
            &sampler_model,
            Some(500),
            &[1.0],
            1000,
            &mut trial_rng(seed, 9, 0),
        )
        .unwrap();
        let data = tmp.path().join("shift.csv");
        write_rows(&data, &rows, Some("value"));
        let outcome = cmd_detect(&config, &data, false, false, None, &mut sink).unwrap();
        if outcome.alarms.first().is_some_and(|&t| t >= 501) {
            good += 1;
        }
    }
    assert!(good as f64 >= 0.99 * SEEDS as f64, "{good}/{SEEDS}");
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let doc = ConfigDocument::load(&path).unwrap();
        doc.validate()
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 5);
}

#[test]
fn hmm_atoms_must_have_two_or_four_components() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["model"] =
        json!({"type": "hmm2", "theta0": {"means": [0.0, 0.0], "beta": 0.5, "gamma": 0.5}});
    cfg["mixing"] = json!({"type": "atoms", "atoms": [[0.0, 1.5, 0.2]]});
    let out = mixcpd(&[
        "calibrate",
        write_config(dir.path(), "c.json", &cfg).to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("mixing"), "{}", stderr(&out));

    cfg["mixing"] = json!({"type": "atoms", "atoms": [[0.0, 1.5, 0.2, 0.3]]});
    let out = mixcpd(&[
        "calibrate",
        write_config(dir.path(), "c.json", &cfg).to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}
