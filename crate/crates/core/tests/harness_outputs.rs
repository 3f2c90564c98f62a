use std::fs;

use sgd_scaling::fit::{chinchilla_fit, NoiseLevel, DEFAULT_HUBER_DELTA};
use sgd_scaling::harness::{
    aggregate, emit_outputs, read_aggregate, read_fit, read_records, run_grid, write_records,
    AggregateRow, ExperimentConfig, Manifest, AGGREGATE_FILE, MANIFEST_FILE, RECORDS_FILE,
    RECORD_HEADER,
};

fn config(dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        r#"
spectrum_kind = "power_law"
d = 128
a = 1.5
prior = "isotropic"
sigma2 = 1.0
gamma0 = 0.1
sgd_variant = "last_iterate"
m_grid = [4, 8, 16]
n_grid = [32, 128, 512]
trials = 6
master_seed = 2024
parallelism = 1
output_dir = "{}"
"#,
        dir.display()
    ))
    .unwrap()
}

#[test]
fn records_header_is_frozen() {
    let dir = tempfile::tempdir().unwrap();
    run_grid(&config(dir.path())).unwrap();
    let text = fs::read_to_string(dir.path().join(RECORDS_FILE)).unwrap();
    assert_eq!(text.lines().next().unwrap(), RECORD_HEADER);
    assert_eq!(
        RECORD_HEADER,
        "spectrum_kind,d,a,b,M,N,gamma0,sigma2,variant,trial,seed,risk_emp,excess_emp,approx,bias_cf,variance_cf,d_eff,diverged,runtime_ms"
    );
    assert_eq!(text.lines().count(), 1 + 6 * 9);
}

#[test]
fn records_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (records, _) = run_grid(&config(dir.path())).unwrap();
    let back = read_records(dir.path().join(RECORDS_FILE)).unwrap();
    assert_eq!(back, records);
    for r in &back {
        assert_eq!(r.risk_emp, r.sigma2 + r.approx + r.excess_emp);
    }
    let copy = dir.path().join("copy.csv");
    write_records(&copy, &back).unwrap();
    assert_eq!(fs::read(&copy).unwrap(), fs::read(dir.path().join(RECORDS_FILE)).unwrap());
}

#[test]
fn manifest_has_every_config_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = config(dir.path());
    run_grid(&config).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let keys: Vec<&str> = json.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    let config_json = serde_json::to_value(&config).unwrap();
    for key in config_json.as_object().unwrap().keys() {
        assert!(keys.contains(&key.as_str()), "missing {key}");
    }
    assert!(keys.contains(&"version") && keys.contains(&"started_at"));
    assert_eq!(keys.len(), config_json.as_object().unwrap().len() + 2);
    assert_eq!(Manifest::read(&path).unwrap().config, config);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_grid(&config(a.path())).unwrap();
    run_grid(&config(b.path())).unwrap();
    assert_eq!(
        fs::read(a.path().join(RECORDS_FILE)).unwrap(),
        fs::read(b.path().join(RECORDS_FILE)).unwrap()
    );
}

#[test]
fn parallel_and_serial_agree() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let serial = config(a.path());
    let parallel = config(b.path()).with_overrides([("parallelism", "16")]).unwrap();
    let (mut r1, _) = run_grid(&serial).unwrap();
    let (mut r2, _) = run_grid(&parallel).unwrap();
    let key = |r: &sgd_scaling::harness::ExperimentRecord| (r.m, r.n, r.trial);
    r1.sort_by_key(key);
    r2.sort_by_key(key);
    assert_eq!(r1, r2);
    assert_eq!(
        fs::read(a.path().join(RECORDS_FILE)).unwrap(),
        fs::read(b.path().join(RECORDS_FILE)).unwrap()
    );
}

#[test]
fn sketch_reuse_changes_only_later_columns() {
    let dir = tempfile::tempdir().unwrap();
    let config = config(dir.path());
    let (shared, _) = run_grid(&config).unwrap();
    let fresh_config = config.with_overrides([("reuse_sketch_across_n", "false")]).unwrap();
    let (fresh, _) = run_grid(&fresh_config).unwrap();
    for (s, f) in shared.iter().zip(&fresh) {
        assert_eq!((s.m, s.n, s.trial, s.seed), (f.m, f.n, f.trial, f.seed));
    }
    let approx_per_m = |rows: &[sgd_scaling::harness::ExperimentRecord]| {
        rows.iter().filter(|r| r.trial == 0 && r.m == 8).map(|r| r.approx).collect::<Vec<_>>()
    };
    let s = approx_per_m(&shared);
    assert!(s.windows(2).all(|w| w[0] == w[1]));
    let f = approx_per_m(&fresh);
    assert!(f.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn emitted_files_read_back_and_svg_parses() {
    let dir = tempfile::tempdir().unwrap();
    let (records, _) = run_grid(&config(dir.path())).unwrap();
    let cells = aggregate(&records).unwrap();
    let rows: Vec<AggregateRow> = cells.iter().map(|c| c.row.clone()).collect();
    let points: Vec<_> = rows
        .iter()
        .map(|r| sgd_scaling::fit::FitPoint::new(r.m as f64, r.n as f64, r.mean_risk))
        .collect();
    let fit = chinchilla_fit(&points, NoiseLevel::Fixed(1.0), DEFAULT_HUBER_DELTA).unwrap();
    let written = emit_outputs(dir.path(), &rows, Some(&fit), 1.0).unwrap();
    assert_eq!(written.len(), 4);

    let agg = dir.path().join(AGGREGATE_FILE);
    let header = fs::read_to_string(&agg).unwrap();
    assert_eq!(header.lines().next().unwrap(), "M,N,mean_risk,ci_low,ci_high,n");
    assert_eq!(read_aggregate(&agg).unwrap(), rows);
    assert_eq!(read_fit(dir.path().join("fit.json")).unwrap(), fit);

    for name in ["risk_vs_n.svg", "risk_vs_m.svg"] {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        let lines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
        assert_eq!(lines, 6, "{name}: three series plus three fitted curves");
    }
}

#[test]
fn unwritable_output_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let config = config(&blocker.join("sub"));
    let err = run_grid(&config).unwrap_err();
    assert!(err.to_string().contains("file"), "{err}");
}
