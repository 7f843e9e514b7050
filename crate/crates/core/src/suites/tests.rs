use super::*;
use crate::potentials::{DriveSpec, PotentialSpec};

/// A small lattice and short sweeps; every stage finishes in seconds.
fn small(v: DriveSpec) -> RunConfig {
    let mut c = RunConfig::paper_toy();
    c.lattice = Lattice { nu: 1, l: 2, j: 8 };
    c.v = v;
    c.m = 1e2;
    c.p_max = 2;
    c.sweeps.m = vec![1e2, 1e3];
    c.sweeps.gamma = vec![1e-2, 1e-3];
    c.samples = 100;
    c.stages.craig_wayne_j = 32;
    c.stages.psdo_j = 16;
    c.stages.sample_lattice = Lattice { nu: 1, l: 2, j: 4 };
    c.stages.l_max = 2;
    c.stages.measure_p_max = 1;
    c.stages.audit_fraction = 0.1;
    c
}

#[test]
fn check_constructors() {
    assert!(Check::le("a", 1.0, 1.0).passed);
    assert!(!Check::ge("a", 0.5, 1.0).passed);
    assert!(Check::within("a", -0.95, -1.0, 0.1).passed);
    assert!(!Check::within("a", -1.2, -1.0, 0.1).passed);
    assert!(!Check::holds("a", false).passed);
}

#[test]
fn slope_check_cases() {
    assert!(slope_check("s", &[(1e2, 0.0), (1e3, 0.0)], -1.0, 0.1).passed);
    assert!(!slope_check("s", &[(1e2, 1.0)], -1.0, 0.1).passed);
    assert!(!slope_check("s", &[(1e2, 1.0), (1e3, 0.0)], -1.0, 0.1).passed);
    let c = slope_check("s", &[(1e2, 1e-2), (1e3, 1e-3), (1e4, 1e-4)], -1.0, 0.1);
    assert!(c.passed && (c.value + 1.0).abs() < 1e-12);
}

#[test]
fn zero_drive_stages_pass_trivially() {
    let cfg = small(DriveSpec::Zero);
    let (man, _) = run_experiment(&cfg, &[Stage::Magnus, Stage::Kam, Stage::Evolve]).unwrap();
    for s in &man.stages {
        assert!(s.passed(), "{}", render(s));
    }
}

#[test]
fn invalid_alpha_rejected_before_any_stage() {
    let cfg = RunConfig { alpha: 1.0, ..small(DriveSpec::Zero) };
    assert!(matches!(run_experiment(&cfg, &Stage::ALL), Err(Error::Config(_))));
}

#[test]
fn error_skips_downstream() {
    // cos x has a negative eigenvalue, so the positivity-gated stages error out.
    let cfg = RunConfig { q: PotentialSpec::Cosine { amp: 1.0, mean: 0.0 }, ..small(DriveSpec::Zero) };
    let (man, _) = run_experiment(&cfg, &[Stage::PsdoAudit, Stage::Magnus]).unwrap();
    assert_eq!(man.stages[0].status, Status::Error);
    assert!(man.stages[0].diagnostics.as_ref().unwrap().contains("not positive"));
    assert_eq!(man.stages[1].status, Status::Skipped);
    assert!(!man.passed);
}

#[test]
fn empty_manifest_writes_valid_json() {
    let dir = std::env::temp_dir().join(format!("wavekam-empty-{}", std::process::id()));
    emit_report(&RunManifest::empty(), &[], &dir).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(v["stages"].as_array().unwrap().len(), 0);
    assert_eq!(v["constants"]["band_c_prime"], serde_json::json!(BAND_C_PRIME));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn toy_history_and_determinism() {
    let cfg = small(DriveSpec::CosPhiCosX { amp: 1.0 });
    let run = || run_experiment(&cfg, &[Stage::Kam, Stage::Measure]).unwrap();
    let (man, a) = run();
    let (_, b) = run();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.contents, y.contents);
    }
    let hist = &a.iter().find(|x| x.name == "kam_history.csv").unwrap().contents;
    let deltas: Vec<f64> = hist.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(deltas.len() >= 2);
    assert!(deltas.windows(2).all(|w| w[1] < w[0]), "{deltas:?}");
    let kam = &man.stages[0];
    assert!(kam.checks.iter().any(|c| c.name.contains("H0^(p)") && c.passed));
}

#[test]
fn algebra_suite_passes() {
    let out = algebra_suite(&small(DriveSpec::Zero)).unwrap();
    assert!(out.report.passed(), "{}", render(&out.report));
}

#[test]
fn certificates_cover_the_admissible_range() {
    let mut cfg = small(DriveSpec::Zero);
    cfg.stages.craig_wayne_j = 128;
    let (rows, _) = certificates(&cfg).unwrap();
    let sp = spectrum_suite(&cfg, &rows).unwrap();
    let cw = craig_wayne_suite(&rows, 0.0).unwrap();
    assert!(sp.report.passed(), "{}", render(&sp.report));
    assert!(cw.report.passed(), "{}", render(&cw.report));
    assert!(sp.artifacts.iter().any(|a| a.name == "spectrum.csv"));
    // With the mean removed, 2 C~_4 |cos x|_4 = 54.5 gives n = 55..=64.
    assert_eq!(rows.first().unwrap().n, 55);
    assert_eq!(rows.len(), 10);
}

#[test]
fn single_set_cases_all_hold() {
    let (held, worst) = single_set_cases(3, 200).unwrap();
    assert_eq!(held, 200);
    // Equality holds when a is antiparallel to l in one dimension.
    assert!(worst <= 1.0 + 1e-12 && worst > 0.5);
}

