use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_asyncmis"))
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited by signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &str = r#"
name = "small"
repeats = 2

[sim]
num_workers = 2
batch_size = 8
total_updates = 12
max_version_gap = 2

[sim.discrepancy]
magnitude = 0.02
mode = "deterministic_hash"
shape = "uniform"
seed = 0

[[sweeps]]
path = "sim.ewma.beta"
values = [0.5, 0.9]
"#;

fn write_spec(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("spec.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&bin().arg("--help").output().unwrap()), 0);
    assert_eq!(code(&bin().arg("--version").output().unwrap()), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&bin().output().unwrap()), 1);
    assert_eq!(code(&bin().arg("frobnicate").output().unwrap()), 1);
    let out = bin().args(["table4", "--mask", "1.1,0.9"]).output().unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn validate_config_reports_run_count() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), SMALL);
    let out = bin().arg("validate-config").arg("--config").arg(&spec).output().unwrap();
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("4 run(s)"), "{}", stdout(&out));
}

#[test]
fn bad_configs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        "name = \"x\"\n[sim]\nnum_workerz = 3\n",
        "name = \"x\"\n[sim]\nbatch_size = 10\n",
        "name = \"x\"\n[[sweeps]]\npath = \"sim.nope\"\nvalues = [1]\n",
        "not toml at all [",
    ];
    for text in cases {
        let spec = write_spec(dir.path(), text);
        let out = bin().arg("validate-config").arg("--config").arg(&spec).output().unwrap();
        assert_eq!(code(&out), 1, "{text}");
        let out = bin().arg("run").arg("--config").arg(&spec).output().unwrap();
        assert_eq!(code(&out), 1, "{text}");
    }
    let out = bin().args(["validate-config", "--config", "/nonexistent/spec.toml"]).output().unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn table4_text_and_json() {
    let out = bin().arg("table4").output().unwrap();
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("Log-linear"));
    assert!(text.contains("0.9800"), "{text}");

    let out = bin().args(["table4", "--format", "json", "--gaps", "1,3"]).output().unwrap();
    assert_eq!(code(&out), 0);
    let rows: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4 * 2 * 2);

    let out = bin()
        .args(["table4", "--mask", "0.99,1.01", "--clip", "0.997,1.004", "--gaps", "1", "--format", "json"])
        .output()
        .unwrap();
    let rows: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let mask = &rows[0]["mask"];
    assert!((mask[0].as_f64().unwrap() - 0.98).abs() < 1e-12);
    assert!((mask[1].as_f64().unwrap() - 1.02).abs() < 1e-12);
}

#[test]
fn run_ignores_sweeps_and_sweep_expands_them() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), SMALL);
    let run_dir = dir.path().join("run");
    let out = bin()
        .arg("run")
        .arg("--config")
        .arg(&spec)
        .arg("--out")
        .arg(&run_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 2);

    let sweep_dir = dir.path().join("sweep");
    let out = bin()
        .arg("sweep")
        .arg("--config")
        .arg(&spec)
        .arg("--out")
        .arg(&sweep_dir)
        .args(["--jobs", "2"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(sweep_dir.join("manifest.json")).unwrap()).unwrap();
    let runs = manifest["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 4);
    for r in runs {
        let name = r["name"].as_str().unwrap();
        assert!(sweep_dir.join("runs").join(name).join("metrics.jsonl").is_file(), "{name}");
        assert!(sweep_dir.join("runs").join(name).join("config.toml").is_file(), "{name}");
    }

    let out = bin().arg("report").arg("--out").arg(&sweep_dir).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = sweep_dir.join("report");
    assert!(report.join("summary.tsv").is_file());
    assert!(report.join("summary.txt").is_file());
    let summary = fs::read_to_string(report.join("summary.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    for r in runs {
        let name = r["name"].as_str().unwrap();
        for kind in ["success", "rho", "clip"] {
            assert!(report.join(format!("{name}.{kind}.tsv")).is_file(), "{name}.{kind}");
        }
    }
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), SMALL);
    let mut metrics = Vec::new();
    for (i, jobs) in ["1", "3"].iter().enumerate() {
        let d = dir.path().join(format!("out{i}"));
        let out = bin()
            .arg("sweep")
            .arg("--config")
            .arg(&spec)
            .arg("--out")
            .arg(&d)
            .args(["--seed", "11", "--jobs", jobs])
            .output()
            .unwrap();
        assert_eq!(code(&out), 0);
        metrics.push(fs::read(d.join("runs/sim.ewma.beta=0.5_r1/metrics.jsonl")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn report_on_missing_or_tampered_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("report").arg("--out").arg(dir.path()).output().unwrap();
    assert_ne!(code(&out), 0);

    let spec = write_spec(dir.path(), "name = \"t\"\n[sim]\nnum_workers = 2\nbatch_size = 8\ntotal_updates = 4\n");
    let d = dir.path().join("res");
    let out = bin().arg("run").arg("--config").arg(&spec).arg("--out").arg(&d).output().unwrap();
    assert_eq!(code(&out), 0);
    let metrics = d.join("runs/t/metrics.jsonl");
    let mut text = fs::read_to_string(&metrics).unwrap();
    text.push('\n');
    text.push_str(&text.clone());
    fs::write(&metrics, text).unwrap();
    let out = bin().arg("report").arg("--out").arg(&d).output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn run_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // ppo_standard needs pi_old, which the default acquisition strategy never supplies for stale tokens.
    let spec = write_spec(
        dir.path(),
        "name = \"f\"\n[sim]\nnum_workers = 4\nbatch_size = 8\ntotal_updates = 20\n[sim.mis]\nvariant = \"ppo_standard\"\nclip_low = 0.2\nclip_high = 0.2\ndisc_mask = { form = \"multiplicative\", c = 1.05 }\n",
    );
    let d = dir.path().join("res");
    let out = bin().arg("run").arg("--config").arg(&spec).arg("--out").arg(&d).output().unwrap();
    assert_eq!(code(&out), 2, "{}", stdout(&out));
    assert!(stdout(&out).contains("FAILED"));
}
