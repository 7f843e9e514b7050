use super::*;
use crate::potentials;
use proptest::prelude::*;
use rand::Rng;

fn q_cos() -> TorusFunction {
    potentials::cosine(1, 1.0, 1.0, 1)
}

fn params(m: f64, gamma: f64, l_max: usize) -> MelnikovParams {
    let sd = spectrum(&q_cos(), 16).unwrap();
    MelnikovParams { l_max, ..MelnikovParams::new(m, gamma, sd.m_sq) }
}

/// Every combination over the whole table, no pruning.
fn brute_min(omega: &[f64], table: &EigenTable, p: &MelnikovParams) -> f64 {
    let mut best = f64::INFINITY;
    for ell in angle_modes(p) {
        let zero = ell.iter().all(|&x| x == 0);
        let wl = dot(omega, &ell);
        for sign in [Sign::Minus, Sign::Plus] {
            for n in 0..table.len() {
                for np in 0..table.len() {
                    if zero && sign == Sign::Minus && n == np {
                        continue;
                    }
                    let k = sign.apply(n as f64, np as f64) as i64;
                    let thr = p.threshold(ell_norm(&ell), k);
                    let (a, b) = (table.get(n), table.get(np));
                    for x in 0..EigenTable::dim(n) {
                        for y in 0..EigenTable::dim(np) {
                            best = best.min((wl + sign.apply(a[x], b[y])).abs() / thr);
                        }
                    }
                }
            }
        }
    }
    best
}

#[test]
fn windowed_eigenvalues_match_dense() {
    let q = q_cos();
    let dense = spectrum(&q, 128).unwrap();
    let table = EigenTable::unperturbed(&q, 80, 10).unwrap();
    for n in 0..=80usize {
        let lo = dense.lambda[dense.label_index(-(n as i64))];
        let hi = dense.lambda[dense.label_index(n as i64)];
        let e = table.get(n);
        assert!((e[0] - lo.min(hi)).abs() < 1e-11, "n = {n}: {} vs {}", e[0], lo.min(hi));
        assert!((e[1] - lo.max(hi)).abs() < 1e-11, "n = {n}: {} vs {}", e[1], lo.max(hi));
    }
}

#[test]
fn constant_potential_closed_form() {
    let c = 2.5;
    let table = EigenTable::unperturbed(&potentials::constant(1, c, 1), 300, 6).unwrap();
    for n in 0..=300usize {
        let exact = ((n * n) as f64 + c).sqrt();
        assert!((table.get(n)[0] - exact).abs() < 1e-12 * exact.max(1.0));
        assert!((table.get(n)[1] - exact).abs() < 1e-12 * exact.max(1.0));
    }
    // sqrt(n^2 + c) - n is decreasing, so the suffix sup is the term itself.
    for m in [1usize, 10, 100] {
        let exact = ((m * m) as f64 + c).sqrt() - m as f64;
        assert!((table.fsup(m) - exact).abs() < 1e-12);
    }
}

#[test]
fn scan_agrees_with_brute_force() {
    let q = q_cos();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut decided = 0;
    for gamma in [0.5, 0.05, 0.005] {
        let p = params(20.0, gamma, 2);
        let table = EigenTable::unperturbed(&q, 400, 10).unwrap();
        for _ in 0..40 {
            let omega = sample_annulus(1, p.m, &mut rng);
            let rep = omega_infty_test(&omega, &table, &p);
            if rep.tail_undecided > 0 || rep.tail_limit > 0 {
                continue;
            }
            decided += 1;
            let bm = brute_min(&omega, &table, &p);
            let sw = rep.worst.as_ref().map_or(f64::INFINITY, |t| t.ratio);
            assert!(sw >= bm - 1e-12);
            assert_eq!(rep.verdict == Verdict::Fail, bm < 1.0, "omega = {omega:?}, brute {bm}, scan {sw}");
            if bm < 1.0 {
                assert!((sw - bm).abs() < 1e-12);
            }
        }
    }
    assert!(decided >= 60, "only {decided} decided samples");
}

#[test]
fn engineered_resonance_is_rejected() {
    let q = q_cos();
    let p = params(1000.0, 1e-3, 1);
    let table = EigenTable::unperturbed(&q, 4008, 10).unwrap();
    let omega = [table.get(1502)[1] - table.get(2)[0]];
    assert!(omega[0] > 1000.0 && omega[0] < 2000.0);
    let rep = omega_infty_test(&omega, &table, &p);
    assert_eq!(rep.verdict, Verdict::Fail);
    let w = rep.worst.unwrap();
    assert_eq!(w.sign, Sign::Minus);
    assert_eq!((w.n.min(w.np), w.n.max(w.np)), (2, 1502));
    assert!(w.ratio < 1e-6);
    // Moving omega by a quarter breaks the coincidence.
    let off = omega_infty_test(&[omega[0] + 0.25], &table, &p);
    assert_ne!(off.worst.unwrap().ratio, w.ratio);
}

#[test]
fn limit_point_fails_in_the_tail() {
    // omega = k exactly: mu_{n+k} - mu_n - k -> 0, so the condition fails for large n.
    let q = q_cos();
    let p = params(20.0, 1e-2, 1);
    let table = EigenTable::unperturbed(&q, 200, 10).unwrap();
    let rep = omega_infty_test(&[25.0], &table, &p);
    assert_eq!(rep.verdict, Verdict::Fail);
    assert!(rep.tail_limit > 0);
}

#[test]
fn final_blocks_override_low_modes() {
    let q = q_cos();
    let t = EigenTable::unperturbed(&q, 50, 10).unwrap();
    let blocks = vec![vec![0.9], vec![1.1, 1.3], vec![2.05, 2.2]];
    let u = t.with_blocks(&blocks);
    assert_eq!(u.get(0), [0.9, 0.9]);
    assert_eq!(u.get(1), [1.1, 1.3]);
    assert_eq!(u.get(2), [2.05, 2.2]);
    assert_eq!(u.get(3), t.get(3));
    assert!((u.fsup(0) - 0.9f64.max(t.fsup(3))).abs() < 1e-15);
    assert!((u.fsup(1) - 0.3f64.max(t.fsup(3))).abs() < 1e-15);
}

#[test]
fn pruned_triples_pass_on_audit() {
    let q = q_cos();
    let p = params(50.0, 1e-3, 3);
    let table = EigenTable::unperturbed(&q, 700, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut total = AuditReport { worst_ratio: f64::INFINITY, ..AuditReport::default() };
    for _ in 0..10 {
        let omega = sample_annulus(1, p.m, &mut rng);
        total.merge(&audit_pruning(&omega, &table, &p, 3, 300));
    }
    assert!(total.checked > 10_000);
    assert_eq!(total.violations, 0, "worst ratio {}", total.worst_ratio);
}

#[test]
fn lemma_pruning_is_sound() {
    let q = q_cos();
    let p = params(30.0, 1e-2, 2);
    let table = EigenTable::unperturbed(&q, 400, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let modes = angle_modes(&p);
    let mut rep = AuditReport { worst_ratio: f64::INFINITY, ..AuditReport::default() };
    for _ in 0..20 {
        let omega = sample_annulus(1, p.m, &mut rng);
        if !diophantine_test(&omega, p.m, p.gamma0(), p.tau0, p.l_max).0 {
            continue;
        }
        let triples: Vec<_> = (0..20_000)
            .map(|_| {
                let ell = modes[rng.gen_range(0..modes.len())].clone();
                let n = rng.gen_range(0..400);
                let np = if rng.gen_range(0..4) == 0 { n } else { rng.gen_range(0..400) };
                (ell, n, np, if rng.gen() { Sign::Minus } else { Sign::Plus })
            })
            .collect();
        rep.merge(&lemma_soundness(&omega, &table, &p, &triples));
    }
    assert!(rep.checked > 1000);
    assert_eq!(rep.violations, 0, "worst {}", rep.worst_ratio);
}

#[test]
fn validation() {
    let p = params(100.0, 1e-2, 4);
    assert!(p.validate().is_ok());
    // tau0 = 1 with alpha = 1/2 needs tau > 2.5.
    assert!(MelnikovParams { tau0: 1.0, tau: 2.4, ..p.clone() }.validate().is_err());
    assert!(MelnikovParams { tau0: 1.0, tau: 2.6, ..p.clone() }.validate().is_ok());
    assert!(MelnikovParams { gamma: 1.5, ..p.clone() }.validate().is_err());
    assert!(MelnikovParams { alpha: 1.0, ..p.clone() }.validate().is_err());
    assert!((p.gamma0() - 1e-2f64.powf(0.125)).abs() < 1e-15);
    assert!((p.gamma1() - p.gamma0().powi(2)).abs() < 1e-15);
}

#[test]
fn gamma_star_is_the_smaller_power() {
    assert_eq!(gamma_star(1e-4, 0.5), 1e-2);
    assert_eq!(gamma_star(0.5, 0.5), 0.5f64.sqrt().min(0.5f64.powf(0.125)));
    for g in [0.9, 1e-1, 1e-3] {
        assert!(gamma_star(g, 0.3) <= g.powf(0.075));
    }
}

#[test]
fn census_explicit_fraction_shrinks_with_m() {
    let mut last = f64::INFINITY;
    for m in [1e2, 1e3, 1e4] {
        let c = resonance_census(&params(m, 1e-3, 4), 20_000, 1);
        let total = c.excluded + c.far + c.diagonal + c.conditional + c.explicit;
        assert_eq!(total, c.samples);
        let f = c.explicit_fraction();
        assert!(f < last, "M = {m}: explicit fraction {f} did not drop below {last}");
        last = f;
    }
}

#[test]
fn budget_terms_vanish_with_gamma() {
    let a = budget_terms(&params(100.0, 1e-2, 4));
    let b = budget_terms(&params(100.0, 1e-4, 4));
    for i in 0..3 {
        assert!(b[i] < a[i]);
    }
}

#[test]
fn single_set_exact_one_dimensional() {
    // |2 omega + 3| <= 1 on [M, 2M] u [-2M, -M] with M = 1: omega in [-2, -1], full length 1/2... clipped.
    let r = single_set_check(&[2], &[0.0], 3.0, 1.0, 1.0).unwrap();
    assert!((r.measure - 1.0).abs() < 1e-15);
    assert!((r.bound - 1.0).abs() < 1e-15);
    assert!(r.holds);
    assert!(single_set_check(&[1], &[1.5], 0.0, 0.1, 1.0).is_err());
}

#[test]
fn single_set_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = 10.0;
    let area = 3.0 * std::f64::consts::PI * m * m;
    for (ell, a, b, delta) in [
        (vec![1i64, 0], vec![0.2, 0.1], 4.0, 1.0),
        (vec![2, -1], vec![-0.3, 0.4], -7.5, 3.0),
        (vec![0, 3], vec![0.5, 0.0], 40.0, 5.0),
    ] {
        let exact = single_set_check(&ell, &a, b, delta, m).unwrap();
        assert!(exact.holds, "{exact:?}");
        let n = 200_000;
        let g: Vec<f64> = ell.iter().zip(&a).map(|(&l, &x)| l as f64 + x).collect();
        let hits = (0..n)
            .filter(|_| {
                let w = sample_annulus(2, m, &mut rng);
                (g[0] * w[0] + g[1] * w[1] + b).abs() <= delta
            })
            .count();
        let pr = Proportion::new(hits, n);
        let (lo, hi) = (pr.lo * area, pr.hi * area);
        assert!(exact.measure >= lo && exact.measure <= hi, "exact {} not in [{lo}, {hi}]", exact.measure);
    }
}

#[test]
fn measure_rejects_small_samples() {
    let lat = Lattice::new(1, 2, 4).unwrap();
    let q = q_cos();
    let pl = FinalBlockPipeline::new(&q, potentials::cos_phi_cos_x(lat, 1.0), lat, KamParameters::default()).unwrap();
    let cfg = MeasureConfig { samples: 50, ..MeasureConfig::default() };
    assert!(matches!(estimate_measure(&params(100.0, 1e-2, 2), &cfg, &pl, &q), Err(Error::TooFewSamples(50))));
}

#[test]
#[ignore]
fn time_pipeline() {
    let lat = Lattice::new(1, 4, 8).unwrap();
    let q = q_cos();
    let kam = KamParameters { p_max: 3, lipschitz: false, tau: 5.0, ..KamParameters::default() };
    let pl = FinalBlockPipeline::new(&q, potentials::cos_phi_cos_x(lat, 1.0), lat, kam).unwrap();
    let p = params(1000.0, 1e-2, 4);
    let t0 = std::time::Instant::now();
    let st = pl.states(&[1618.03], p.m, p.gamma0(), p.tau0).unwrap();
    eprintln!("states {} in {:?}", st.len(), t0.elapsed());
    let t1 = std::time::Instant::now();
    let table = EigenTable::unperturbed(&q, 4 * 1000 * 4 + 8, 10).unwrap();
    eprintln!("table in {:?}", t1.elapsed());
    let t2 = std::time::Instant::now();
    let tb = table.with_blocks(&st.last().unwrap().block_eigenvalues());
    let rep = omega_infty_test(&[1618.03], &tb, &p);
    eprintln!("test in {:?}: {:?}", t2.elapsed(), rep);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn acceptance_is_nested_in_gamma(seed in 0u64..10_000, g_exp in 1.0f64..3.0) {
        let q = q_cos();
        let table = EigenTable::unperturbed(&q, 400, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(40.0, 10f64.powf(-g_exp), 2);
        let omega = sample_annulus(1, p.m, &mut rng);
        let big = omega_infty_test(&omega, &table, &p);
        let small = omega_infty_test(&omega, &table, &MelnikovParams { gamma: p.gamma / 10.0, ..p.clone() });
        if big.verdict == Verdict::Pass {
            prop_assert_ne!(small.verdict, Verdict::Fail);
        }
        if let (Some(a), Some(b)) = (&big.worst, &small.worst) {
            // The same triple has ratio scaled by exactly 10.
            if a.ell == b.ell && a.n == b.n && a.np == b.np && a.sign == b.sign {
                prop_assert!((b.ratio / a.ratio - 10.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
#[ignore]
fn print_measure() {
    let m: f64 = std::env::var("WK_M").ok().and_then(|s| s.parse().ok()).unwrap_or(1000.0);
    let n: usize = std::env::var("WK_N").ok().and_then(|s| s.parse().ok()).unwrap_or(200);
    let lat = Lattice::new(1, 4, 8).unwrap();
    let q = q_cos();
    let kam = KamParameters { p_max: 3, lipschitz: false, tau: 5.0, ..KamParameters::default() };
    let pl = FinalBlockPipeline::new(&q, potentials::cos_phi_cos_x(lat, 1.0), lat, kam).unwrap();
    let cfg = MeasureConfig { samples: n, ..MeasureConfig::default() };
    let t0 = std::time::Instant::now();
    let sw = estimate_measure(&params(m, 1e-2, 4), &cfg, &pl, &q).unwrap();
    for r in &sw.rows {
        eprintln!("{:e} m_r {:?} o0 {} ind {} fail {} audit {:?} chain {}", r.gamma, r.m_r, r.omega0_rejected, r.indeterminate, r.pipeline_failures, r.audit, r.chain_violations);
    }
    eprintln!("exp {} mono {} nest {} in {:?}", sw.exponent, sw.monotone, sw.nesting_violations, t0.elapsed());
}

#[test]
fn free_wave_closed_form() {
    // q = 0, V = 0: mu_n = n, so the condition is |omega.l + k| >= thr(k) for reachable k = n -+ n'.
    let table = EigenTable::new((0..=200).map(|n| [n as f64; 2]).collect());
    let p = params(20.0, 0.05, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut fails = 0;
    for _ in 0..200 {
        let omega = sample_annulus(1, p.m, &mut rng);
        let mut expect_fail = false;
        for ell in angle_modes(&p) {
            let t = -dot(&omega, &ell);
            for k in [t.floor() as i64, t.ceil() as i64] {
                let zero = ell.iter().all(|&x| x == 0);
                // Minus reaches every k except (0, n, n); plus reaches k >= 0.
                let reachable_minus = !(zero && k == 0);
                let reachable_plus = k >= 0;
                let hit = (t - k as f64).abs() < p.threshold(ell_norm(&ell), k);
                expect_fail |= hit && (reachable_minus || reachable_plus);
            }
        }
        let rep = omega_infty_test(&omega, &table, &p);
        assert_ne!(rep.verdict, Verdict::Indeterminate);
        assert_eq!(rep.verdict == Verdict::Fail, expect_fail, "omega = {omega:?}");
        fails += expect_fail as usize;
    }
    // (0, 0, 0) with the plus sign has mu_0 + mu_0 = 0: the zero mode of the free wave is always resonant.
    assert_eq!(fails, 200);
    assert_eq!(omega_infty_test(&[27.3], &table, &p).worst.unwrap().n, 0);
}

#[test]
fn gamma_near_one_rejects_almost_everything() {
    let q = q_cos();
    let table = EigenTable::unperturbed(&q, 200, 10).unwrap();
    let p = params(20.0, 0.99, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rejected = (0..200)
        .filter(|_| omega_infty_test(&sample_annulus(1, p.m, &mut rng), &table, &p).verdict != Verdict::Pass)
        .count();
    assert!(rejected >= 190, "{rejected}");
}

#[test]
fn census_trivial_classes() {
    let p = params(100.0, 1e-3, 4);
    assert_eq!(classify(&[1], 0, 100_000, Sign::Minus, &p), Prune::Far);
    assert_eq!(classify(&[0], 7, 7, Sign::Minus, &p), Prune::Excluded);
    assert_ne!(classify(&[0], 7, 7, Sign::Plus, &p), Prune::Excluded);
    assert_eq!(classify(&[2], 0, 0, Sign::Minus, &p), Prune::Diagonal);
    // Larger M pushes R0 down: the whole diagonal is pruned once R0 <= 1.
    assert!(p.r0(1.0) < 1.0);
    assert_eq!(classify(&[1], 5, 5, Sign::Minus, &p), Prune::Diagonal);
}

#[test]
fn measure_run_invariants() {
    let lat = Lattice::new(1, 4, 8).unwrap();
    let q = q_cos();
    let kam = KamParameters { p_max: 3, lipschitz: false, tau: 5.0, ..KamParameters::default() };
    let pl = FinalBlockPipeline::new(&q, potentials::cos_phi_cos_x(lat, 1.0), lat, kam).unwrap();
    let cfg = MeasureConfig { gammas: vec![1e-2, 1e-3], samples: 100, audit_fraction: 0.2, ..MeasureConfig::default() };
    let sw = estimate_measure(&params(1000.0, 1e-2, 4), &cfg, &pl, &q).unwrap();
    assert_eq!(sw.nesting_violations, 0);
    for r in &sw.rows {
        // For nu = 1 every omega in R_M is Diophantine at |l| <= l_max.
        assert_eq!(r.omega0_rejected, 0);
        assert_eq!(r.pipeline_failures, 0);
        assert_eq!(r.audit.violations, 0);
        assert!(r.audit.checked > 0);
        assert_eq!(r.chain_violations, 0);
        assert!(r.m_r.lo <= r.m_r.estimate && r.m_r.estimate <= r.m_r.hi);
        assert_eq!(r.census.samples, 20_000);
    }
    assert!(sw.rows[1].m_r.estimate < sw.rows[0].m_r.estimate);
    let mut buf = Vec::new();
    sw.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
}
