use fedfor::config::{parse_config, parse_config_with_overrides};
use fedfor::data::{gen_synthetic, write_table};
use fedfor::experiment::{metrics_file_name, run_experiment, run_single, run_single_detailed};
use fedfor::metrics::read_metrics_csv;
use fedfor::{Error, Method, PoolMode};

const SMALL: &str = r#"
methods = ["fedavg", "fedfor"]
rounds = 6
epochs = 2
classes = 4
dim = 6
hidden = [8]
samples_per_class = 60
val_samples_per_class = 20
clients_per_round = 4
sample_fraction = 0.3
imbalance_ratio = 0.1
seeds = [0, 1]
"#;

fn small(overrides: &[&str]) -> fedfor::ExperimentConfig {
    let ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    parse_config_with_overrides(SMALL, &ov).unwrap()
}

#[test]
fn alpha_zero_gives_identical_accuracy_columns() {
    let cfg = small(&["alpha=0"]);
    for seed in [0, 1] {
        let a = run_single(&cfg, Method::FedAvg, seed).unwrap();
        let b = run_single(&cfg, Method::FedFor, seed).unwrap();
        let acc = |h: &fedfor::RunHistory| h.accuracies().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(acc(&a), acc(&b));
    }
}

#[test]
fn repeated_experiments_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = small(&[]);
    cfg.output_dir = a.path().to_path_buf();
    run_experiment(&cfg).unwrap();
    cfg.output_dir = b.path().to_path_buf();
    cfg.workers = 1;
    run_experiment(&cfg).unwrap();
    for name in [
        "summary.csv",
        "config.toml",
        &metrics_file_name(Method::FedFor, 1),
    ] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn metrics_files_carry_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(&[]);
    cfg.output_dir = dir.path().to_path_buf();
    run_experiment(&cfg).unwrap();
    let h = read_metrics_csv(&dir.path().join(metrics_file_name(Method::FedAvg, 0))).unwrap();
    assert_eq!(h.digest, cfg.digest());
    assert_eq!(h.len(), 6);
}

#[test]
fn every_method_runs_in_both_pool_modes() {
    for pool in ["cross-device", "cross-silo"] {
        let cfg = small(&[&format!("pool=\"{pool}\""), "pool_size=8"]);
        for m in Method::ALL {
            let (h, state) = run_single_detailed(&cfg, m, 0).unwrap();
            assert_eq!(h.len(), 6);
            assert!(state.current.is_finite(), "{m} {pool}");
            let stateful_silo = cfg.pool == PoolMode::CrossSilo && m.is_stateful();
            assert_eq!(state.store.is_empty(), !stateful_silo, "{m} {pool}");
        }
    }
}

#[test]
fn cross_silo_fedfor_sends_direction_not_model() {
    let cfg = small(&["pool=\"cross-silo\"", "pool_size=4"]);
    let (_, state) = run_single_detailed(&cfg, Method::FedFor, 0).unwrap();
    let s2c = state.ledger.cumulative_s2c();
    let d = state.ledger.dim();
    use fedfor::ledger::PayloadItem;
    assert_eq!(s2c.get(PayloadItem::PrevGlobalModel), 0);
    assert_eq!(s2c.get(PayloadItem::GlobalDirection), 5 * 4 * d);
}

#[test]
fn fedbn_and_covariate_shift_run() {
    let cfg = small(&[
        "shift=\"covariate\"",
        "num_domains=4",
        "norm_layer=true",
        "fedbn=true",
        "pool=\"cross-silo\"",
        "pool_size=4",
    ]);
    let (h, state) = run_single_detailed(&cfg, Method::FedFor, 0).unwrap();
    assert!(h.accuracies().all(|a| (0.0..=1.0).contains(&a)));
    assert!(state.norm_mean.is_some());
}

#[test]
fn table_files_replace_the_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    let val = dir.path().join("val.csv");
    write_table(&train, &gen_synthetic(4, 6, 60, 1).unwrap()).unwrap();
    write_table(&val, &gen_synthetic(4, 6, 10, 2).unwrap()).unwrap();
    let text = format!(
        "{SMALL}data_path = {:?}\nval_path = {:?}\n",
        train.display().to_string(),
        val.display().to_string()
    );
    let cfg = parse_config(&text).unwrap();
    let h = run_single(&cfg, Method::FedAvg, 0).unwrap();
    assert_eq!(h.len(), 6);

    let wrong = parse_config(&text.replace("dim = 6", "dim = 5")).unwrap();
    assert!(matches!(
        run_single(&wrong, Method::FedAvg, 0),
        Err(Error::Run { round: 0, .. })
    ));
}

#[test]
fn concept_shift_is_shared_across_methods() {
    let cfg = small(&["concept_shift_prob=0.3"]);
    let a = run_single(&cfg, Method::FedAvg, 1).unwrap();
    let b = run_single(&cfg, Method::Scaffold, 1).unwrap();
    let va: Vec<u64> = a.records.iter().map(|r| r.labelmap_version).collect();
    let vb: Vec<u64> = b.records.iter().map(|r| r.labelmap_version).collect();
    assert_eq!(va, vb);
    assert!(va.last().unwrap() > &0);
}
