use super::*;
use crate::potentials;
use crate::schrodinger::spectrum;
use crate::stats::loglog_slope;

const GOLDEN: f64 = 1.618_033_988_749_895;

fn setup(j: usize, l: usize) -> (Lattice, TorusFunction, TorusFunction, SpectralData) {
    let lat = Lattice::new(1, l, j).unwrap();
    let q = potentials::cosine(1, 1.0, 1.0, 1);
    let v = potentials::cos_phi_cos_x(lat, 1.0);
    let sd = spectrum(&q, j).unwrap();
    (lat, q, v, sd)
}

#[test]
fn pauli_identities() {
    let r = pauli_algebra_check(6, 11);
    assert_eq!(r.sigma4_squared, 0.0);
    assert!(r.max() < 1e-11, "{r:?}");
    let (s3, s4) = (pauli(3), pauli(4));
    // s3 s4 + s4 s3 = 2 * identity.
    let anti = s3 * s4 + s4 * s3;
    let want = Matrix2::new(C64::new(2.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(2.0, 0.0));
    assert_eq!(anti, want);
}

#[test]
fn annulus_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for nu in 1..4 {
        for _ in 0..200 {
            let w = sample_annulus(nu, 10.0, &mut rng);
            assert!(in_annulus(&w, 10.0) && w.len() == nu);
        }
    }
    assert!(FrequencySample::new(vec![0.5], 1.0).is_err());
    // Uniformity in nu = 2: P(|w| < 1.5 M) = (1.5^2 - 1) / 3.
    let n = 20000;
    let inner = (0..n).filter(|_| sample_annulus(2, 1.0, &mut rng).iter().map(|x| x * x).sum::<f64>() < 2.25).count();
    assert!((inner as f64 / n as f64 - 1.25 / 3.0).abs() < 0.015);
}

#[test]
fn diophantine_examples() {
    let m = 100.0;
    // Exact resonance omega_1 = omega_2 fails on l = (1, -1).
    let w = vec![1.2 * m, 1.2 * m];
    let (ok, worst) = diophantine_test(&w, m, 0.01, 2.0, 4);
    assert!(!ok && worst == 0.0);
    // |q phi - p| > 1/(3q) for the golden ratio phi, so |omega.l| <l>^2 >= c/3 with c = |omega|/|(1, phi)|.
    let c = 1.5 * m / (1.0 + GOLDEN * GOLDEN).sqrt();
    let w = vec![c, c * GOLDEN];
    let gamma0 = 0.1;
    let (ok, worst) = diophantine_test(&w, m, gamma0, 2.0, 12);
    assert!(ok);
    assert!(worst >= c / (3.0 * gamma0 * m));
    // nu = 1: |omega l| >= M for every l != 0.
    let mut s = FrequencySample::new(vec![GOLDEN * m], m).unwrap();
    assert!(s.certify(0.5, 1.0, 8));
    assert!(s.diophantine.as_ref().unwrap().worst_ratio >= 1.0 / 0.5);
}

#[test]
fn diophantine_measure_is_linear() {
    let r = diophantine_measure(2, 100.0, 2.0, 8, &[0.05, 0.1, 0.2], 20000, 3);
    assert!(r.rows.iter().all(|(_, f)| *f > 0.0));
    assert!(r.max_relative_deviation < 0.2, "{:?}", r.rows);
}

#[test]
fn one_mode_division() {
    let (lat, _, v, _) = setup(6, 2);
    let sh = SymbolShape::for_lattice(&lat, 4);
    let w = Symbol::function(sh, &v).unwrap();
    let omega = [GOLDEN * 50.0];
    let y = magnus_generator(&w, &omega, 50.0, 0.1, 1.0, Cutoff::Exp).unwrap();
    for e in w.support() {
        let ell = sh.ell_at(e);
        let f = C64::new(1.0, 0.0) / (I * dot(&omega, &ell));
        for (a, b) in y.mode(e).unwrap().iter().zip(w.mode(e).unwrap()) {
            assert!((a - b * f).norm() <= 1e-15 * b.norm().max(1.0));
        }
    }
    let zero = Symbol::zeros(sh, -1.0);
    let y0 = magnus_generator(&zero, &omega, 50.0, 0.1, 1.0, Cutoff::Exp).unwrap();
    assert_eq!(y0.weighted_norm(-1.0, 3.0, 0).unwrap(), 0.0);
    let avg = Symbol::function(sh, &potentials::cosine(1, 1.0, 0.0, 1)).unwrap();
    assert!(matches!(magnus_generator(&avg, &omega, 50.0, 0.1, 1.0, Cutoff::Exp), Err(Error::NonzeroAverage(_))));
}

#[test]
fn cutoff_extension() {
    // Within 1/3 rho the generator vanishes, beyond 2/3 rho it is the raw quotient.
    let m = 10.0;
    let ell = [1i64, -1];
    let rho = 0.1 * m * 2f64.sqrt().powf(-2.0);
    let tiny = [12.0, 12.0 - 0.2 * rho];
    assert_eq!(divisor_factor(&tiny, &ell, m, 0.1, 2.0, Cutoff::Exp), C64::new(0.0, 0.0));
    let big = [12.0, 12.0 - 0.8 * rho];
    let f = divisor_factor(&big, &ell, m, 0.1, 2.0, Cutoff::Exp);
    assert!((f - C64::new(1.0, 0.0) / (I * dot(&big, &ell))).norm() < 1e-15);
}

#[test]
fn operator_identities() {
    let (lat, _, v, sd) = setup(10, 2);
    let m = 100.0;
    let ops = magnus_operators(&sd, &v, lat, &[GOLDEN * m], m, 0.1, 1.0, Cutoff::Exp).unwrap();
    let st = ops.structure();
    assert!(st.max_structure() < 1e-12, "{st:?}");
    assert_eq!(st.homological_residual, 0.0);
    assert!(ops.l_closed);
    // omega . d_phi Y = W.
    let dy = ops.y.phi_derivative(&ops.omega);
    assert!(max_abs_op(&dy.sub(&ops.w).unwrap()) < 1e-12);
    let (r2, r3) = ops.remainder_check(&[0.7]);
    assert!(r2 < 1e-12 && r3 < 1e-12);
    let zero = TorusFunction::zeros(*v.lattice());
    let z = magnus_operators(&sd, &zero, lat, &[GOLDEN * m], m, 0.1, 1.0, Cutoff::Exp).unwrap();
    assert!(z.vd.is_zero() || max_abs_op(&z.vd) == 0.0);
    assert!(z.vo.is_zero() || max_abs_op(&z.vo) == 0.0);
}

#[test]
fn conjugation_audit_matches() {
    let (lat, _, v, sd) = setup(6, 2);
    let m = 5.0;
    let ops = magnus_operators(&sd, &v, lat, &[1.5 * m], m, 0.1, 1.0, Cutoff::Exp).unwrap();
    let t = 2.0 * std::f64::consts::PI / (1.5 * m);
    let a = conjugation_audit(&ops, t, 800);
    assert!(a.residual <= 1e-6, "{a:?}");
    assert!(a.residual_half_steps > a.residual);
}

#[test]
fn audit_detects_wrong_generator() {
    let (lat, _, v, sd) = setup(6, 2);
    let m = 5.0;
    let mut ops = magnus_operators(&sd, &v, lat, &[1.5 * m], m, 0.1, 1.0, Cutoff::Exp).unwrap();
    ops.vd = ops.vd.scale(C64::new(0.0, 0.0));
    let t = 2.0 * std::f64::consts::PI / (1.5 * m);
    assert!(conjugation_audit(&ops, t, 800).residual > 1e-3);
}

#[test]
fn symbol_norms_scale_like_inverse_m() {
    let (lat, q, v, _) = setup(16, 4);
    let cfg = MagnusConfig::new(0.1);
    let base = magnus_base(&q, &v, lat, &cfg).unwrap();
    let mut ys = Vec::new();
    let mut vds = Vec::new();
    let mut vos = Vec::new();
    for m in [1e2, 1e3, 1e4] {
        let (_, n) = magnus_norms(&base, &[GOLDEN * m], m, lat.s0(), 0).unwrap();
        ys.push((m, n.y.sup));
        vds.push((m, n.vd.sup));
        vos.push((m, n.vo.sup));
        assert!(n.y.lip > 0.0);
    }
    assert!((loglog_slope(&ys) + 1.0).abs() < 0.05, "{ys:?}");
    assert!((loglog_slope(&vds) + 1.0).abs() < 0.1, "{vds:?}");
    assert!((loglog_slope(&vos) + 1.0).abs() < 0.1, "{vos:?}");
}

#[test]
fn transform_reports() {
    let (lat, q, v, sd) = setup(12, 2);
    let cfg = MagnusConfig::new(0.1);
    let base = magnus_base(&q, &v, lat, &cfg).unwrap();
    let out = magnus_transform(&base, &sd, &v, &[GOLDEN * 100.0], 100.0).unwrap();
    assert!(out.sample.diophantine.as_ref().unwrap().passed);
    assert!(out.structure.max_structure() < 1e-12);
    let loss = out.observed_loss.expect("loss within the sufficient bound");
    assert!(loss <= 2.0 * out.tau0 + 1.0);
    let js = out.to_json();
    assert!(js["norms"]["y"]["sup"].as_f64().unwrap() > 0.0);
}

#[test]
fn config_validation() {
    let mut c = MagnusConfig::new(1.5);
    assert!(c.validate(1).is_err());
    c.gamma0 = 0.1;
    c.tau0 = Some(0.5);
    assert!(c.validate(2).is_err());
    c.tau0 = None;
    assert!(c.validate(2).is_ok());
    let parsed: MagnusConfig = serde_json::from_str(r#"{"gamma0": 0.2}"#).unwrap();
    assert_eq!(parsed.depth, 12);
    assert_eq!(parsed.contour.xi_scale, 4.0);
}
