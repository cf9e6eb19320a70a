use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use trustfg::gp::Trajectory;
use trustfg::scenario::{run_joint, ScenarioConfig};

fn reference() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/reference.json")
}

fn trustfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trustfg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn simulate(out: &Path, extra: &[&str]) -> Output {
    let scenario = reference();
    let mut args = vec![
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    trustfg(&args)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn file_names(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn simulate_reference_writes_four_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(dir.path(), &[]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        file_names(dir.path()),
        [
            "metrics.json",
            "plot.svg",
            "trajectories.csv",
            "trust_report.json"
        ]
    );
    let metrics = read_json(&dir.path().join("metrics.json"));
    assert_eq!(metrics["solver"]["converged"], true);
    assert!(metrics["global_min_distance"].as_f64().unwrap() >= 0.095);
    assert_eq!(metrics["sub_threshold_pairs"].as_array().unwrap().len(), 0);
    let report = read_json(&dir.path().join("trust_report.json"));
    assert_eq!(report["agents"].as_array().unwrap().len(), 4);
    let svg = std::fs::read_to_string(dir.path().join("plot.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline id=\"agent-").count(), 4);
}

#[test]
fn missing_scenario_exits_one_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = trustfg(&[
        "simulate",
        "--scenario",
        dir.path().join("missing.json").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value =
        serde_json::from_str(&std::fs::read_to_string(reference()).unwrap()).unwrap();
    cfg["agents"][1]["radius"] = Value::from("wide");
    let path = dir.path().join("bad.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out_dir = dir.path().join("out");
    let out = trustfg(&[
        "simulate",
        "--scenario",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("agents[1].radius"));
    assert!(!out_dir.exists());
}

#[test]
fn unknown_flag_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(dir.path(), &["--disable", "wind"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(file_names(dir.path()).is_empty());
}

#[test]
fn disabling_trust_factors_shows_a_breach() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(
        dir.path(),
        &[
            "--disable",
            "proximity",
            "--disable",
            "consistency",
            "--disable",
            "transparency",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let metrics = read_json(&dir.path().join("metrics.json"));
    assert!(!metrics["sub_threshold_pairs"]
        .as_array()
        .unwrap()
        .is_empty());
    assert!(!metrics["violations"].as_array().unwrap().is_empty());
    let svg = std::fs::read_to_string(dir.path().join("plot.svg")).unwrap();
    assert!(svg.contains(r#"class="violation""#));
}

#[test]
fn ablate_compares_four_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = trustfg(&[
        "ablate",
        "--scenario",
        reference().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(file_names(dir.path()), ["comparison.json"]);
    let cmp = read_json(&dir.path().join("comparison.json"));
    let runs = cmp["runs"].as_array().unwrap();
    let names: Vec<&str> = runs.iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        [
            "all-on",
            "proximity-off",
            "consistency-off",
            "transparency-off"
        ]
    );
    let global = |i: usize| runs[i]["global_min_distance"].as_f64().unwrap();
    assert!(global(0) > global(1));
    assert!(cmp["transparency"]["ratio"].as_f64().unwrap() >= 1.3);
}

fn parse_csv(path: &Path) -> Vec<Trajectory> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["agent_id", "step", "t", "x", "y", "vx", "vy"]
    );
    let mut rows: Vec<(usize, usize, [f64; 5])> = Vec::new();
    for record in reader.records() {
        let r = record.unwrap();
        let f = |i: usize| r[i].parse::<f64>().unwrap();
        rows.push((
            r[0].parse().unwrap(),
            r[1].parse().unwrap(),
            [f(2), f(3), f(4), f(5), f(6)],
        ));
    }
    let mut ids: Vec<usize> = rows.iter().map(|r| r.0).collect();
    ids.dedup();
    ids.into_iter()
        .map(|id| {
            let own: Vec<_> = rows.iter().filter(|r| r.0 == id).collect();
            let dt = own[1].2[0];
            let states = own
                .iter()
                .enumerate()
                .map(|(k, r)| {
                    assert_eq!(r.1, k);
                    trustfg::graph::StateVariable::new(
                        nalgebra::Vector2::new(r.2[1], r.2[2]),
                        nalgebra::Vector2::new(r.2[3], r.2[4]),
                    )
                })
                .collect();
            Trajectory::new(id, dt, states).unwrap()
        })
        .collect()
}

#[test]
fn trajectories_csv_round_trips_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(simulate(dir.path(), &[]).status.code(), Some(0));
    let bytes = std::fs::read(dir.path().join("trajectories.csv")).unwrap();
    assert!(!bytes.contains(&b'\r'));
    let parsed = parse_csv(&dir.path().join("trajectories.csv"));
    let expected = run_joint(&ScenarioConfig::load(&reference()).unwrap()).unwrap();
    assert_eq!(parsed.len(), expected.trajectories.len());
    for (p, e) in parsed.iter().zip(&expected.trajectories) {
        assert_eq!(p.agent_id, e.agent_id);
        assert_eq!(p.states, e.states);
    }
}

#[test]
fn identical_runs_give_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = simulate(dir.path(), &["--mode", "decentralized", "--seed", "9"]);
        assert_eq!(out.status.code(), Some(0));
    }
    for name in [
        "metrics.json",
        "trajectories.csv",
        "trust_report.json",
        "plot.svg",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
    let metrics = read_json(&a.path().join("metrics.json"));
    assert_eq!(metrics["mode"], "decentralized");
    assert_eq!(metrics["seed"], 9);
}
