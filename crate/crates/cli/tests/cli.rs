use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
methods = ["fedavg", "fedprox"]
rounds = 2
epochs = 1
classes = 3
dim = 4
hidden = [5]
samples_per_class = 30
val_samples_per_class = 10
clients_per_round = 3
sample_fraction = 0.5
seeds = [0, 1]
"#;

fn fedfor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedfor"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let o = fedfor(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in [
        "summary.csv",
        "config.toml",
        "metrics_fedavg_seed0.csv",
        "metrics_fedprox_seed1.csv",
    ] {
        assert!(out.join(name).exists(), "{name}");
    }

    let before = std::fs::read(out.join("summary.csv")).unwrap();
    std::fs::remove_file(out.join("summary.csv")).unwrap();
    let o = fedfor(&["summarize", "--in", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(out.join("summary.csv")).unwrap(), before);
}

#[test]
fn overrides_apply_on_top_of_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let o = fedfor(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--override",
        "seeds=[5]",
        "--override",
        "methods=[\"fedfor\"]",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("metrics_fedfor_seed5.csv").exists());
    assert!(!out.join("metrics_fedavg_seed0.csv").exists());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{CONFIG}alpha = -1\n"));
    let o = fedfor(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));

    let cfg = write_config(dir.path(), &format!("{CONFIG}typo_key = 1\n"));
    let o = fedfor(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("typo_key"));

    let o = fedfor(&[
        "run",
        "--config",
        dir.path().join("missing.toml").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    // Table files that do not exist only fail once the run starts.
    let text = format!(
        "{CONFIG}data_path = \"/nonexistent/train.csv\"\nval_path = \"/nonexistent/val.csv\"\n"
    );
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let o = fedfor(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("seed") && err.contains("round"), "{err}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        fedfor::config::load_config(&path, &[]).unwrap_or_else(|e| panic!("{path:?}: {e}"));
        n += 1;
    }
    assert!(n > 0);
}
