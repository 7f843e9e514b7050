use super::*;
use crate::craig_wayne::build_basis_matrix;
use crate::magnus::{lipschitz_partner, magnus_operators};
use crate::opmatrix::tests::rand_pair;
use crate::opmatrix::{hermitian_spectrum, max_abs_op};
use crate::potentials;
use crate::schrodinger::{assemble_lq, eigensolve_raw, spectrum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: f64 = 1.618_033_988_749_895;

fn toy(j: usize, l: usize, m: f64, twin: bool, params: &KamParameters) -> KamState {
    let lat = Lattice::new(1, l, j).unwrap();
    let q = potentials::cosine(1, 1.0, 1.0, 1);
    let v = potentials::cos_phi_cos_x(lat, 1.0);
    let sd = spectrum(&q, j).unwrap();
    let basis = build_basis_matrix(&sd);
    let omega = [GOLDEN * m];
    let ops = magnus_operators(&sd, &v, lat, &omega, m, 0.1, 1.0, Cutoff::Exp).unwrap();
    let tw = twin.then(|| {
        let w2 = lipschitz_partner(&omega, m);
        magnus_operators(&sd, &v, lat, &w2, m, 0.1, 1.0, Cutoff::Exp).unwrap()
    });
    init_state(&ops, &sd, &basis, 0.1, m, tw.as_ref(), params).unwrap()
}

fn free_state(j: usize, l: usize, omega: f64, m: f64, v: OperatorPair, params: &KamParameters) -> KamState {
    let lat = Lattice::new(1, l, j).unwrap();
    let sd = spectrum(&potentials::cosine(1, 1.0, 1.0, 1), j).unwrap();
    let main = Branch { omega: vec![omega], h0: h0_from_spectrum(&sd), v };
    KamState::from_parts(lat, m, 0.1, sd.m_sq, main, None, params).unwrap()
}

fn rand_herm(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<C64> {
    let a = DMatrix::from_fn(d, d, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    hermitize(&a)
}

#[test]
fn derived_parameters() {
    let p = KamParameters::default();
    assert_eq!(p.rho(), 22.0);
    assert_eq!(p.beta(), 23.0);
    assert_eq!(p.lambda(), 30.0);
    assert_eq!(p.n_p(-1), 1.0);
    assert_eq!(p.n_p(0), 16.0);
    assert_eq!(p.n_p(2), 16f64.powf(2.25));
    assert_eq!(p.sigma_total(1.0, 2.0), 26.0);
    let bad = KamParameters { alpha: 1.0, ..KamParameters::default() };
    assert!(bad.validate().is_err());
    let parsed: KamParameters = serde_json::from_str(r#"{"tau": 2.5}"#).unwrap();
    assert_eq!(parsed.n0, 16.0);
}

#[test]
fn g_spectrum_is_pairwise_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (p, q) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        let a = rand_herm(&mut rng, p);
        let b = rand_herm(&mut rng, q);
        let ea = hermitian_spectrum(&a);
        let eb = hermitian_spectrum(&b);
        for sign in [Sign::Minus, Sign::Plus] {
            let g = build_g(3.25, &a, &b, sign);
            let mut want: Vec<f64> = ea.iter().flat_map(|x| eb.iter().map(move |y| 3.25 + sign.apply(*x, *y))).collect();
            want.sort_by(f64::total_cmp);
            let got = hermitian_spectrum(&g);
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
    // l = 0, n = n', minus: the spectrum contains 0.
    let a = rand_herm(&mut rng, 2);
    let g = build_g(0.0, &a, &a, Sign::Minus);
    assert!(hermitian_spectrum(&g).iter().any(|x| x.abs() < 1e-12));
    // Diagonal blocks: closed form.
    let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![C64::new(2.0, 0.0), C64::new(5.0, 0.0)]));
    let b = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(7.0, 0.0)]));
    let g = build_g(-1.0, &a, &b, Sign::Plus);
    assert_eq!(hermitian_spectrum(&g), vec![2.0, 5.0, 8.0, 11.0]);
}

#[test]
fn zero_drive_is_converged() {
    let params = KamParameters::default();
    let lat = Lattice::new(1, 2, 6).unwrap();
    let st = free_state(6, 2, GOLDEN * 100.0, 100.0, OperatorPair::zeros(lat), &params);
    assert!(smallness_check(&st, &params).margin.is_infinite());
    let hom = solve_homological(&st.main, lat, 100.0, 16.0, &params).unwrap();
    assert!(hom.x.is_zero());
    let next = kam_step(&st, &params).unwrap();
    assert_eq!(next.main.h0, st.main.h0);
    assert!(next.main.v.is_zero());
    let res = kam_iterate(st, &params).unwrap();
    assert!(res.converged && res.state.p == 0);
    let fs = final_spectrum(&res.state, params.alpha);
    assert_eq!(fs.sup_weighted, 0.0);
    assert!(fs.positive);
}

#[test]
fn free_blocks_for_zero_potential() {
    // q = 0: B has eigenvalues |j|, so the blocks are diag(|n|, |n|).
    let j = 6;
    let q = potentials::constant(1, 0.0, 1);
    let raw = eigensolve_raw(&assemble_lq(&q, j).unwrap());
    let psi = crate::schrodinger::adapted_basis(&raw);
    let lq = assemble_lq(&q, j).unwrap();
    let b2 = psi.adjoint() * lq * &psi;
    for n in 0..=j {
        let blk = extract_block(&b2, j, n, n);
        for (k, x) in hermitian_spectrum(&blk).iter().enumerate() {
            let _ = k;
            assert!((x.sqrt() - n as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn melnikov_step_cases() {
    let params = KamParameters::default();
    let lat = Lattice::new(1, 2, 8).unwrap();
    let st = free_state(8, 2, GOLDEN * 1000.0, 1000.0, OperatorPair::zeros(lat), &params);
    let r = melnikov_step_test(&st, &params);
    assert!(r.passed && r.checked > 0, "{:?}", r.worst);
    // omega = lambda_8 - lambda_1 makes (l, n, n') = (-1, 8, 1) exactly resonant.
    let sd = spectrum(&potentials::cosine(1, 1.0, 1.0, 1), 8).unwrap();
    let lam = |n: i64| sd.lambda[sd.label_index(n)];
    let w = lam(8) - lam(1);
    let m = w / 1.5;
    let st = free_state(8, 2, w, m, OperatorPair::zeros(lat), &params);
    let r = melnikov_step_test(&st, &params);
    assert!(!r.passed);
    let off = r.worst.unwrap();
    assert!(off.ratio < 1e-6, "{off:?}");
    assert_eq!(off.sign, Sign::Minus);
    assert!((off.ell == vec![-1] && (off.n, off.np) == (8, 1)) || (off.ell == vec![1] && (off.n, off.np) == (1, 8)));
}

#[test]
fn single_block_generator() {
    let params = KamParameters::default();
    let lat = Lattice::new(1, 2, 6).unwrap();
    let (e, n, np) = (lat.ell_index(&[1]).unwrap(), 3usize, 1usize);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vb = DMatrix::from_fn(2, 2, |_, _| C64::new(rng.gen_range(-1e-3..1e-3), rng.gen_range(-1e-3..1e-3)));
    let mut vd = BlockOperator::zeros(lat);
    vd.set_block(e, n, np, &vb);
    vd.set_block(lat.neg_ell(e), np, n, &vb.adjoint());
    let v = OperatorPair::new(vd, BlockOperator::zeros(lat)).unwrap();
    let st = free_state(6, 2, GOLDEN * 50.0, 50.0, v, &params);
    let hom = solve_homological(&st.main, lat, 50.0, 16.0, &params).unwrap();
    let g = st.g_operator(&[1], n, np, Sign::Minus);
    let lu = g.lu();
    let sol = lu.solve(&DMatrix::from_column_slice(4, 1, vb.as_slice())).unwrap() * (-I);
    let xb = hom.x.d.block(e, n, np);
    assert!(max_abs(&(xb - DMatrix::from_column_slice(2, 2, sol.as_slice()))) < 1e-15);
    assert!(max_abs_op(&hom.residual.d).max(max_abs_op(&hom.residual.o)) <= 1e-12);
    assert_eq!(hom.cut_blocks, 0);
}

#[test]
fn homological_residual_on_random_instances() {
    let params = KamParameters::default();
    let lat = Lattice::new(1, 3, 8).unwrap();
    for seed in 0..3 {
        let v = rand_pair(lat, 1e-3, 3, 40 + seed);
        let st = free_state(8, 3, GOLDEN * 200.0, 200.0, v, &params);
        assert!(melnikov_step_test(&st, &params).passed);
        let hom = solve_homological(&st.main, lat, 200.0, 16.0, &params).unwrap();
        assert_eq!(hom.cut_blocks, 0);
        assert!(hom.residual_uncut <= 1e-10);
        assert!(max_abs_op(&hom.residual.d).max(max_abs_op(&hom.residual.o)) <= 1e-10);
        // Z is the l = 0 block diagonal of V^d.
        let z0 = block_diagonal(&st.main.v.d.mode(lat.zero_ell()), lat.j);
        assert!(max_abs(&(z0 - &hom.z)) < 1e-15);
    }
}

/// [[A^d(k), A^o(k)], [-conj(A^o)(k), -conj(A^d)(k)]].
fn pair_mode(a: &OperatorPair, k: i64) -> DMatrix<C64> {
    let lat = *a.lattice();
    let d = lat.n_space();
    let mut m = DMatrix::zeros(2 * d, 2 * d);
    let Some(e) = lat.ell_index(&[k]) else { return m };
    m.view_mut((0, 0), (d, d)).copy_from(&a.d.mode(e));
    m.view_mut((0, d), (d, d)).copy_from(&a.o.mode(e));
    m.view_mut((d, 0), (d, d)).copy_from(&(-a.o.conj().mode(e)));
    m.view_mut((d, d), (d, d)).copy_from(&(-a.d.conj().mode(e)));
    m
}

/// Floquet-Toeplitz matrix on |l| <= lb: A(l - l') blocks plus diag(omega l).
fn toeplitz(a: &OperatorPair, lb: i64, omega: Option<f64>) -> DMatrix<C64> {
    let d2 = 2 * a.lattice().n_space();
    let nl = (2 * lb + 1) as usize;
    let mut out = DMatrix::zeros(nl * d2, nl * d2);
    for r in 0..nl {
        for c in 0..nl {
            let k = r as i64 - c as i64;
            let mut blk = pair_mode(a, k);
            if k == 0 {
                if let Some(w) = omega {
                    blk += DMatrix::<C64>::identity(d2, d2) * C64::new(w * (r as i64 - lb) as f64, 0.0);
                }
            }
            out.view_mut((r * d2, c * d2), (d2, d2)).copy_from(&blk);
        }
    }
    out
}

#[test]
fn dense_conjugation_oracle() {
    let params = KamParameters::default();
    let lat = Lattice::new(1, 2, 4).unwrap();
    let omega = GOLDEN * 20.0;
    let v = rand_pair(lat, 2e-3, 1, 77);
    let st = free_state(4, 2, omega, 20.0, v, &params);
    let next = kam_step(&st, &params).unwrap();
    let x = &next.generators[0];
    let lb = 10i64;
    let h0p = h0_pair(lat, &st.main.h0);
    let h = h0p.add(&st.main.v).unwrap();
    let k = toeplitz(&h, lb, Some(omega));
    let xt = toeplitz(x, lb, None);
    let kp = (&xt * I).exp() * k * (&xt * (-I)).exp();
    let d2 = 2 * lat.n_space();
    let new_h = h0_pair(lat, &next.main.h0).add(&next.main.v).unwrap();
    let mut err = 0.0f64;
    for kk in -2i64..=2 {
        let r = (lb + kk) as usize;
        let c = lb as usize;
        let dense = kp.view((r * d2, c * d2), (d2, d2)).into_owned();
        err = err.max(max_abs(&(dense - pair_mode(&new_h, kk))));
    }
    assert!(err <= 1e-9, "{err:e}");
    // H0 stays self-adjoint and the structure is preserved.
    assert!(next.last().h0_adjoint_defect <= 1e-12);
    assert!(next.main.v.structure_defect() <= 1e-12);
}

#[test]
fn toy_iteration() {
    let params = KamParameters { p_max: 4, ..KamParameters::default() };
    let st = toy(8, 4, 1000.0, true, &params);
    let init = st.initial.clone().unwrap();
    assert!(init.scaled_delta > 0.0);
    let res = kam_iterate(st, &params).unwrap();
    assert!(res.aborted.is_none(), "{:?}", res.aborted);
    let h = &res.state.history;
    let d0b = h[0].delta_s0_beta.total;
    for r in &h[1..] {
        assert!(r.h0_adjoint_defect <= 1e-12);
        assert!(r.structure_defect <= 1e-12);
        assert!(r.nash_moser_ratio <= params.calibration.c_nash);
        assert!(r.x_bound_ratio <= params.calibration.c_gen);
        assert!(r.drift.total * 0.1 * 1000.0 <= params.calibration.c_drift);
    }
    // Faster than quadratic until the floor: the projector is total once N_p exceeds L.
    for w in h.windows(2) {
        assert!(w[1].delta_s0.sup <= w[0].delta_s0.sup.powf(1.5) || w[1].delta_s0.sup < params.delta_floor, "{h:?}");
    }
    assert!(h[0].delta_s0_beta.total >= h[0].delta_s0.total && d0b > 0.0);
    // Cauchy increments shrink.
    for w in res.cauchy.windows(2) {
        assert!(w[1] <= w[0] || w[1] < 1e-13, "{:?}", res.cauchy);
    }
    let fs = final_spectrum(&res.state, params.alpha);
    assert!(fs.positive && fs.sup_weighted > 0.0);
    let mut out = Vec::new();
    write_history_csv(h, &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), h.len() + 1);
}

#[test]
fn smallness_cases() {
    let params = KamParameters { p_max: 4, ..KamParameters::default() };
    let lat = Lattice::new(1, 4, 8).unwrap();
    let zero = free_state(8, 4, GOLDEN * 100.0, 100.0, OperatorPair::zeros(lat), &params);
    let r = smallness_check(&zero, &params);
    assert!(r.passed && r.margin.is_infinite());
    let lo = smallness_check(&toy(8, 4, 100.0, false, &params), &params);
    let hi = smallness_check(&toy(8, 4, 1e4, false, &params), &params);
    assert!(!lo.passed && hi.passed, "{lo:?} {hi:?}");
    // The margin grows like M^{1 - alpha}.
    let ratio = hi.margin / lo.margin;
    assert!((ratio.log10() / 2.0 - (1.0 - params.alpha)).abs() < 0.15, "{ratio}");
    let tiny = KamParameters { gamma: 1e-6, ..params };
    assert!(!smallness_check(&toy(8, 4, 1e4, false, &tiny), &tiny).passed);
}

#[test]
fn initial_size_scales_like_inverse_m() {
    let params = KamParameters::default();
    let pts: Vec<(f64, f64)> = [1e2, 1e3, 1e4]
        .iter()
        .map(|&m| {
            let st = toy(8, 4, m, false, &params);
            assert!(st.initial.as_ref().unwrap().scaled_delta <= params.calibration.c_init);
            (m, st.history[0].delta_s0.total)
        })
        .collect();
    let slope = crate::stats::loglog_slope(&pts);
    assert!((slope + 1.0).abs() < 0.1, "{pts:?}");
}
