//! Frozen constants for the inequalities whose constants are only implicit.
//!
//! Every constant is twice the worst ratio lhs / rhs observed on a fixed
//! seed corpus, except the smallness constant, which leaves margin 2 at the
//! reference instance (cos phi cos x drive, M = 10^3). [`calibrate`] recomputes the raw ratios so the frozen values
//! can be audited; [`tame_check`] asserts the tame inequalities on fresh samples.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harmonics::{bracket, Lattice, C64};
use crate::opmatrix::{ad, BlockOperator, OperatorPair};

/// Constants used by PASS/FAIL decisions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    /// C_{s0} in C N0^Lambda (M^alpha / gamma) delta^(0)_{s0+beta} <= 1.
    pub c_small: f64,
    /// C_s in delta^(0)_{s0} <= C_s / (gamma0 M).
    pub c_init: f64,
    /// C_{s0,beta} in the block drift and eigenvalue bounds C / (gamma0 M).
    pub c_drift: f64,
    /// Constant of the first Nash-Moser step inequality.
    pub c_nash: f64,
    /// Constant of |X|_{s0,alpha,alpha} <= C N^{2 tau + 1} (M^alpha / gamma) delta_{s0}.
    pub c_gen: f64,
    /// C(s) of |AB|_s <= C(s) (|A|_{s0} |B|_s + |A|_s |B|_{s0}) at s = s0 + k, k = 0, 1, 2.
    pub c_product: [f64; 3],
    /// Same for |ad_X V|_{s,alpha,0} against |X|_{.,alpha,alpha} |V|_{.,alpha,0}.
    pub c_commutator: [f64; 3],
}

impl Default for Calibration {
    fn default() -> Self {
        FROZEN
    }
}

/// Output of [`calibrate`], rounded outward to three digits.
pub const FROZEN: Calibration = Calibration {
    c_small: 3.75e-50,
    c_init: 17.0,
    c_drift: 2.76e-3,
    c_nash: 1.63e-14,
    c_gen: 5.93e-13,
    c_product: [4.25, 8.23, 15.1],
    c_commutator: [0.809, 1.48, 2.46],
};

/// Safety factor applied to every observed worst ratio.
pub const SAFETY: f64 = 2.0;

/// Lattice and class weight of the tame-inequality samples.
pub const TAME_LATTICE: Lattice = Lattice { nu: 1, l: 4, j: 8 };
pub const TAME_ALPHA: f64 = 0.5;

/// Random block operator with entries ~ U(-1, 1) <l, n - n'>^{-decay}, decay drawn in [s0 + 1, s0 + 4].
pub fn random_decaying(lat: Lattice, rng: &mut ChaCha8Rng) -> BlockOperator {
    let decay = lat.s0() + rng.gen_range(1.0..4.0);
    let amp = 10f64.powf(rng.gen_range(-3.0..0.0));
    let d = lat.n_space();
    let jm = lat.j as i64;
    let mut a = BlockOperator::zeros(lat);
    for e in 0..lat.n_ell() {
        let ell = lat.ell_at(e);
        let m = DMatrix::from_fn(d, d, |r, c| {
            let h = (r as i64 - jm).abs() - (c as i64 - jm).abs();
            let w = amp * bracket(&ell, h).powf(-decay);
            C64::new(rng.gen_range(-w..w), rng.gen_range(-w..w))
        });
        a.set(e, m);
    }
    a
}

/// A random pair with the conjugation structure.
pub fn random_pair(lat: Lattice, rng: &mut ChaCha8Rng) -> OperatorPair {
    let d = random_decaying(lat, rng);
    let d = d.add(&d.adjoint()).expect("same lattice").scale(C64::new(0.5, 0.0));
    let o = random_decaying(lat, rng);
    let o = o.add(&o.adjoint().conj()).expect("same lattice").scale(C64::new(0.5, 0.0));
    OperatorPair { d, o }
}

/// Ratios lhs / (rhs without constant) of the tame product and commutator inequalities for one sample.
pub fn tame_ratios(seed: u64) -> Result<([f64; 3], [f64; 3])> {
    let lat = TAME_LATTICE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_decaying(lat, &mut rng);
    let b = random_decaying(lat, &mut rng);
    let ab = a.mul(&b)?;
    let x = random_pair(lat, &mut rng);
    let v = random_pair(lat, &mut rng);
    let w = ad(&x, &v)?;
    let s0 = lat.s0();
    let al = TAME_ALPHA;
    let mut prod = [0.0; 3];
    let mut comm = [0.0; 3];
    for k in 0..3 {
        let s = s0 + k as f64;
        let rhs = a.s_decay_norm(s0) * b.s_decay_norm(s) + a.s_decay_norm(s) * b.s_decay_norm(s0);
        prod[k] = ab.s_decay_norm(s) / rhs;
        let rhs = x.pair_norm(s, al, al) * v.pair_norm(s0, al, 0.0) + x.pair_norm(s0, al, al) * v.pair_norm(s, al, 0.0);
        comm[k] = w.pair_norm(s, al, 0.0) / rhs;
    }
    Ok((prod, comm))
}

/// Worst ratios over the samples with the given seeds.
pub fn tame_worst(seeds: impl Iterator<Item = u64>) -> Result<([f64; 3], [f64; 3])> {
    let mut prod = [0.0f64; 3];
    let mut comm = [0.0f64; 3];
    for seed in seeds {
        let (p, c) = tame_ratios(seed)?;
        for k in 0..3 {
            prod[k] = prod[k].max(p[k]);
            comm[k] = comm[k].max(c[k]);
        }
    }
    Ok((prod, comm))
}

/// Outcome of the tame inequalities on fresh samples.
#[derive(Clone, Debug, Serialize)]
pub struct TameReport {
    pub samples: usize,
    pub worst_product: [f64; 3],
    pub worst_commutator: [f64; 3],
    pub passed: bool,
}

/// Check the tame inequalities with the frozen constants on `samples` seeds starting at `first_seed`.
pub fn tame_check(cal: &Calibration, samples: usize, first_seed: u64) -> Result<TameReport> {
    let (p, c) = tame_worst(first_seed..first_seed + samples as u64)?;
    let passed = (0..3).all(|k| p[k] <= cal.c_product[k] && c[k] <= cal.c_commutator[k]);
    Ok(TameReport { samples, worst_product: p, worst_commutator: c, passed })
}

/// Seeds of the tame calibration set; fresh checks must start beyond it.
pub const TAME_CALIBRATION_SEEDS: std::ops::Range<u64> = 0..200;

/// Worst raw ratios of the KAM inequalities over the corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct KamRatios {
    /// N0^Lambda (M^alpha / gamma) delta^(0)_{s0+beta} at the reference instance.
    pub smallness: f64,
    /// max delta^(0)_{s0} gamma0 M.
    pub init: f64,
    /// max over p of the H0 drift times gamma0 M.
    pub drift: f64,
    pub nash: f64,
    pub generator: f64,
}

/// Raw and derived calibration.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CalibrationRun {
    pub kam: KamRatios,
    pub product: [f64; 3],
    pub commutator: [f64; 3],
    pub constants: Calibration,
}

/// Corpus frequencies M and drive labels.
pub const CORPUS_M: [f64; 3] = [1e2, 1e3, 1e4];
pub const CORPUS_DRIVES: [&str; 3] = ["cos_phi_cos_x", "smooth_random:1", "smooth_random:2"];
/// The smallness constant is anchored at the cos phi cos x drive with this M.
pub const SMALLNESS_REFERENCE_M: f64 = 1e3;
pub const CORPUS_GAMMA0: f64 = 0.1;
pub const CORPUS_TAU0: f64 = 1.0;
const GOLDEN: f64 = 1.618_033_988_749_895;

fn corpus_drive(lat: Lattice, label: &str) -> crate::harmonics::TorusFunction {
    match label.split_once(':') {
        Some((_, seed)) => crate::potentials::smooth_random_drive(lat, 3.0, 1.0, seed.parse().expect("corpus seed")),
        None => crate::potentials::cos_phi_cos_x(lat, 1.0),
    }
}

/// Run the KAM corpus (q = 1 + cos x, J = 8, L = 4, Lipschitz twin) and collect the worst ratios.
pub fn kam_corpus_ratios() -> Result<KamRatios> {
    use crate::kam::{kam_iterate, setup, KamParameters};
    let lat = Lattice::new(1, 4, 8)?;
    let q = crate::potentials::cosine(1, 1.0, 1.0, 1);
    let sd = crate::schrodinger::spectrum(&q, lat.j)?;
    let basis = crate::craig_wayne::build_basis_matrix(&sd);
    let params = KamParameters { p_max: 4, ..KamParameters::default() };
    let mut out = KamRatios::default();
    for &m in &CORPUS_M {
        for label in CORPUS_DRIVES {
            let v = corpus_drive(lat, label);
            let (_, st) = setup(&sd, &basis, &v, lat, &[GOLDEN * m], m, CORPUS_GAMMA0, CORPUS_TAU0, &params)?;
            let h0 = &st.history[0];
            let scale = CORPUS_GAMMA0 * m;
            if m == SMALLNESS_REFERENCE_M && label == CORPUS_DRIVES[0] {
                out.smallness = params.n0.powf(params.lambda()) * m.powf(params.alpha) / params.gamma * h0.delta_s0_beta.total;
            }
            out.init = out.init.max(h0.delta_s0.total * scale);
            let res = kam_iterate(st, &params)?;
            for r in &res.state.history[1..] {
                out.drift = out.drift.max(r.drift.total * scale);
                out.nash = out.nash.max(r.nash_moser_ratio);
                out.generator = out.generator.max(r.x_bound_ratio);
            }
        }
    }
    Ok(out)
}

/// Recompute every constant from the corpora.
pub fn calibrate() -> Result<CalibrationRun> {
    let kam = kam_corpus_ratios()?;
    let (product, commutator) = tame_worst(TAME_CALIBRATION_SEEDS)?;
    let constants = Calibration {
        c_small: 1.0 / (SAFETY * kam.smallness),
        c_init: SAFETY * kam.init,
        c_drift: SAFETY * kam.drift,
        c_nash: SAFETY * kam.nash,
        c_gen: SAFETY * kam.generator,
        c_product: product.map(|x| SAFETY * x),
        c_commutator: commutator.map(|x| SAFETY * x),
    };
    Ok(CalibrationRun { kam, product, commutator, constants })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[ignore]
    fn print_run() {
        eprintln!("{:#?}", calibrate().unwrap());
    }

    #[test]
    fn frozen_constants_cover_the_corpus() {
        let run = calibrate().unwrap();
        let c = run.constants;
        assert!(FROZEN.c_small <= c.c_small && FROZEN.c_small >= 0.99 * c.c_small, "{c:?}");
        for (f, r) in [(FROZEN.c_init, c.c_init), (FROZEN.c_drift, c.c_drift), (FROZEN.c_nash, c.c_nash), (FROZEN.c_gen, c.c_gen)] {
            assert!(r <= f && f <= 1.01 * r, "{r} vs {f}");
        }
        for k in 0..3 {
            assert!(c.c_product[k] <= FROZEN.c_product[k] && c.c_commutator[k] <= FROZEN.c_commutator[k]);
        }
    }

    #[test]
    fn tame_inequalities_on_fresh_samples() {
        let r = tame_check(&FROZEN, 100, TAME_CALIBRATION_SEEDS.end + 1000).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn sampler_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_pair(TAME_LATTICE, &mut rng);
        assert!(p.structure_defect() < 1e-15);
        let a = random_decaying(TAME_LATTICE, &mut rng);
        // Decay exponent exceeds s0 + 1, so the s0 norm is finite and dominates |A|_0.
        assert!(a.s_decay_norm(TAME_LATTICE.s0()) >= a.s_decay_norm(0.0));
    }

    #[test]
    fn calibration_json_roundtrip() {
        let js = serde_json::to_string(&FROZEN).unwrap();
        let back: Calibration = serde_json::from_str(&js).unwrap();
        assert_eq!(back, FROZEN);
        assert!(serde_json::from_str::<Calibration>(r#"{"c_small": 1.0}"#).is_err());
    }
}
