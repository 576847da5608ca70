use std::f64::consts::PI;

use brinkhom::harness::config::ExperimentConfig;
use brinkhom::harness::{
    emit_report, run_capacity_study, run_evolution_homogenization, run_stationary_homogenization, ExperimentReport,
};

const STATIONARY: &str = r#"
kind = "stationary-homogenization"
epsilons = [0.5]
resolutions = [32]
tol = 1e-7
[forcing]
kind = "swirl"
amplitude = 10.0
"#;

fn stationary(extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = vec!["brinkman.source=isotropic".into(), format!("brinkman.value={}", 3.0 * PI)];
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::load(STATIONARY, &o).unwrap()
}

fn files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timings.csv")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn stationary_brinkman_beats_the_hole_blind_model() {
    let cfg = stationary(&[]);
    let report = run_stationary_homogenization(&cfg).unwrap();
    assert!(!report.is_partial());
    assert_eq!(report.rows.len(), 1);
    let eb = report.numbers("brinkman_error")[0];
    let e0 = report.numbers("blind_error")[0];
    assert!(eb.is_finite() && eb < e0, "brinkman {eb} blind {e0}");
    assert_eq!(report.numbers("folded_axes")[0], 3.0);

    // the folded solve reports the same errors as the full one
    let full = run_stationary_homogenization(&stationary(&["symmetry=false"])).unwrap();
    assert!((full.numbers("brinkman_error")[0] - eb).abs() < 1e-4 * eb);
    assert!((full.numbers("perforated_norm")[0] / report.numbers("perforated_norm")[0] - 1.0).abs() < 1e-4);
}

#[test]
fn reports_are_reproducible() {
    let cfg = stationary(&[]);
    assert_eq!(cfg.hash(), stationary(&[]).hash());
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    emit_report(&run_stationary_homogenization(&cfg).unwrap(), &a).unwrap();
    emit_report(&run_stationary_homogenization(&cfg).unwrap(), &b).unwrap();
    let fa = files(&a);
    assert!(fa.iter().any(|(n, _)| n == "errors.svg"));
    assert_eq!(fa, files(&b));
    let back = ExperimentReport::read(&a.join("report.json")).unwrap();
    assert_eq!(back.config_hash, cfg.hash());
}

const EVOLUTION: &str = r#"
kind = "evolution-homogenization"
epsilons = [0.5]
resolutions = [32]
tol = 1e-9
mu = 0.5
[brinkman]
source = "isotropic"
value = 9.42477796076938
[evolution]
t_end = 0.04
max_dt = 0.002
density = { kind = "uniform", value = 1.0 }
velocity = { kind = "rest" }
[forcing]
kind = "zero"
"#;

#[test]
fn evolution_at_rest_has_zero_error() {
    let cfg = ExperimentConfig::load(EVOLUTION, &[]).unwrap();
    let report = run_evolution_homogenization(&cfg).unwrap();
    assert_eq!(report.numbers("velocity_error"), vec![0.0]);
    assert_eq!(report.numbers("density_error"), vec![0.0]);
    assert_eq!(report.numbers("snapshots"), vec![21.0]);
}

#[test]
fn evolution_reports_errors_and_ledgers() {
    let cfg = ExperimentConfig::load(
        EVOLUTION,
        &[
            "evolution.density={ kind = \"layers\", low = 1.0, high = 2.0, solid = 1.5 }".into(),
            "evolution.velocity={ kind = \"swirl\", amplitude = 0.5 }".into(),
            "forcing.kind=swirl".into(),
            "forcing.amplitude=5.0".into(),
        ],
    )
    .unwrap();
    let report = run_evolution_homogenization(&cfg).unwrap();
    let e = report.numbers("velocity_error")[0];
    let e0 = report.numbers("blind_velocity_error")[0];
    assert!(e > 0.0 && e < e0, "brinkman {e} blind {e0}");
    assert!(report.numbers("density_error")[0] > 0.0);
    assert!(report.numbers("mass_drift")[0] < 1e-12);
    assert_eq!(report.ledgers.len(), 2);
    let tmp = tempfile::tempdir().unwrap();
    let written = emit_report(&report, tmp.path()).unwrap();
    assert!(written.iter().any(|p| p.ends_with("ledger_eps0_perforated.svg")));
}

#[test]
fn capacity_study_has_one_row_per_case() {
    let cfg = ExperimentConfig::load(
        r#"
kind = "capacity-study"
tol = 1e-8
[capacity]
shapes = [{ kind = "ball", radius = 0.5 }, { kind = "cube", half_width = 0.4 }]
radii = [1.0]
resolutions = [16, 24]
"#,
        &[],
    )
    .unwrap();
    let report = run_capacity_study(&cfg).unwrap();
    assert_eq!(report.rows.len(), 4);
    let csv = report.to_csv();
    assert!(csv.starts_with("shape,r,resolution,C11,C12,C13,C21,C22,C23,C31,C32,C33,rel_momentum,rel_divergence"));
    let c11 = report.numbers("C11");
    assert!(c11.iter().all(|c| *c > 0.0));
}

#[test]
fn invalid_configs_are_rejected_before_solving() {
    let cfg = stationary(&["epsilons=[0.5, 0.5]", "resolutions=[32, 32]"]);
    let err = run_stationary_homogenization(&cfg).unwrap_err();
    assert!(err.to_string().contains("strictly decreasing"), "{err}");
    let cfg = stationary(&["resolutions=[8]"]);
    let err = run_stationary_homogenization(&cfg).unwrap_err();
    assert!(err.to_string().contains("resolve every hole"), "{err}");
    let cfg = stationary(&["alpha=2.5"]);
    assert!(run_stationary_homogenization(&cfg).unwrap_err().to_string().contains("alpha must be 3"));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::from_file(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert_eq!(n, 3);
}
