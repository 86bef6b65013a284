use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn didact(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_didact"))
        .args(args)
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn write_problems(dir: &Path, count: usize) {
    let mut text = String::new();
    for i in 0..count {
        text.push_str(&format!(
            "{{\"id\":\"q{i}\",\"problem\":\"What is {i} + {i}?\",\"answer\":\"{}\"}}\n",
            2 * i
        ));
    }
    fs::write(dir.join("problems.jsonl"), text).unwrap();
}

fn write_config(dir: &Path) {
    fs::write(
        dir.join("didact.toml"),
        r#"
seed = 11
[episode]
max_turns = 4
[paths]
problems = "problems.jsonl"
[backend.synthetic]
student = { initial_accuracy = 0.3, plasticity = 0.4 }
teacher = { leak_probability = 0.1 }
"#,
    )
    .unwrap();
}

#[test]
fn help_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = didact(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let golden = include_str!("golden/help.txt");
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden);
}

#[test]
fn bench_output_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    write_problems(dir.path(), 60);
    write_config(dir.path());
    for (workers, out) in [("1", "w1"), ("8", "w8")] {
        let o = didact(
            &[
                "--config",
                "didact.toml",
                "--workers",
                workers,
                "--out",
                out,
                "bench",
            ],
            dir.path(),
        );
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    for file in ["trajectories.jsonl", "curve.csv"] {
        let a = fs::read(dir.path().join("w1").join(file)).unwrap();
        let b = fs::read(dir.path().join("w8").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    write_problems(dir.path(), 5);
    write_config(dir.path());
    let o = didact(
        &[
            "--config",
            "didact.toml",
            "--max-turns",
            "2",
            "--out",
            "o",
            "bench",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("o/curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn report_export_and_audit_read_the_store() {
    let dir = tempfile::tempdir().unwrap();
    write_problems(dir.path(), 20);
    write_config(dir.path());
    let ok = |args: &[&str]| {
        let o = didact(args, dir.path());
        assert_eq!(
            o.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    };
    ok(&["--config", "didact.toml", "--out", "o", "bench"]);
    let summary: serde_json::Value = serde_json::from_str(&ok(&["--out", "o", "report"])).unwrap();
    assert_eq!(summary["n"], 20);
    assert_eq!(summary["curve"].as_array().unwrap().len(), 4);
    assert!(dir.path().join("o/summary.json").exists());

    ok(&["--out", "o", "--view", "student", "export"]);
    ok(&["--out", "o", "--view", "worldmodel", "export"]);
    let student = fs::read_to_string(dir.path().join("o/export-student.jsonl")).unwrap();
    let world = fs::read_to_string(dir.path().join("o/export-worldmodel.jsonl")).unwrap();
    assert!(world.lines().count() > student.lines().count());

    ok(&["--out", "o", "audit"]);
    let audit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/audit.json")).unwrap())
            .unwrap();
    assert_eq!(audit["rate"], summary["leak_rate"]);
}

#[test]
fn run_prints_one_record() {
    let dir = tempfile::tempdir().unwrap();
    write_problems(dir.path(), 3);
    write_config(dir.path());
    let o = didact(
        &["--config", "didact.toml", "run", "--problem-id", "q2"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let rec: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rec["problem_id"], "q2");
    let o = didact(
        &["--config", "didact.toml", "run", "--problem-id", "missing"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        didact(&["bench", "--workers", "many"], dir.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(didact(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(didact(&["bench"], dir.path()).status.code(), Some(1));

    fs::write(
        dir.path().join("bad.toml"),
        "[backend.synthetic]\nstudent = { initial_accuracy = \"high\", plasticity = 0.1 }\n",
    )
    .unwrap();
    let o = didact(&["--config", "bad.toml", "bench"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(
        err.contains("backend.synthetic.student.initial_accuracy"),
        "{err}"
    );

    fs::create_dir(dir.path().join("o")).unwrap();
    fs::write(dir.path().join("o/trajectories.jsonl"), "{not json}\n").unwrap();
    assert_eq!(
        didact(&["--out", "o", "report"], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn lab_gradcheck_and_train() {
    let dir = tempfile::tempdir().unwrap();
    let o = didact(&["lab", "gradcheck", "--instances", "10"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["max_rel_error_policy"].as_f64().unwrap() < 1e-4);

    let o = didact(
        &[
            "--out",
            "lab",
            "--max-turns",
            "3",
            "lab",
            "train",
            "--n",
            "4",
            "--episodes",
            "20000",
            "--lr",
            "1.0",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let curve = fs::read_to_string(dir.path().join("lab/learning_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    let o = didact(
        &[
            "--max-turns",
            "3",
            "lab",
            "eval",
            "--theta",
            "lab/theta.json",
            "--episodes",
            "2000",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let values: Vec<f64> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(values.len(), 3);
    assert!(values[2] > 0.9);
}
