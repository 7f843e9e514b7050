//! Spectrum and eigenbasis of L_q = -d_xx + q(x) on the circle.
//!
//! Modes j in [-J, J] are stored at index j + J throughout. Eigenvalues are
//! labelled by rank: the smallest gets 0, and each following pair gets
//! (-n, +n) in increasing order.
//!
//! The basis `psi` is adapted to complex conjugation: psi_{-j} = conj(psi_j)
//! in the sense (C c)_j = conj(c_{-j}). When a gap is open the true
//! eigenvectors cannot satisfy this, so `psi` spans each pair subspace
//! E_n = span{eigvec_{-n}, eigvec_n} with conjugation-paired vectors and
//! the operator is block diagonal (not diagonal) on it. The actual
//! eigenvectors are kept in `eigvecs`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harmonics::{jbracket, TorusFunction, C64};

const ZERO: C64 = C64::new(0.0, 0.0);

/// Eigenpairs of L_q with block pairing and the eigenvalue decomposition.
#[derive(Clone, Debug)]
pub struct SpectralData {
    pub jmax: usize,
    pub q_bar: f64,
    pub mu_sq: Vec<f64>,
    pub d: Vec<f64>,
    pub lambda: Vec<f64>,
    pub c: Vec<f64>,
    pub m_sq: f64,
    /// Column j + J holds psi_j in the exponential basis.
    pub psi: DMatrix<C64>,
    /// Column j + J holds the eigenvector with eigenvalue mu_sq[j + J].
    pub eigvecs: DMatrix<C64>,
    /// The assembled L_q matrix in the exponential basis.
    pub lq: DMatrix<C64>,
}

/// Sorted eigendecomposition with rank labels, no positivity requirement.
#[derive(Clone, Debug)]
pub struct RawSpectrum {
    pub jmax: usize,
    /// Eigenvalue with label j at j + J.
    pub values: Vec<f64>,
    pub vectors: DMatrix<C64>,
}

/// Partial sums of d(j)^2 over |j| <= k.
#[derive(Clone, Debug, Serialize)]
pub struct TailReport {
    pub q_bar: f64,
    pub partial_sums: Vec<(usize, f64)>,
}

fn idx(jmax: usize, j: i64) -> usize {
    (j + jmax as i64) as usize
}

/// (C c)_j = conj(c_{-j}).
pub fn conj_reflect(v: &[C64]) -> Vec<C64> {
    v.iter().rev().map(|c| c.conj()).collect()
}

/// Matrix of -d_xx + q in the exponential basis, M[j, j'] = j^2 delta + q^(j - j').
pub fn assemble_lq(q: &TorusFunction, jmax: usize) -> Result<DMatrix<C64>> {
    if !q.is_real() {
        return Err(Error::ComplexPotential);
    }
    if !q.is_spatial() {
        return Err(Error::Lattice("L_q needs an x-only potential".into()));
    }
    let qh = q.spatial_coeffs();
    let qj = (qh.len() / 2) as i64;
    let n = 2 * jmax + 1;
    let jm = jmax as i64;
    Ok(DMatrix::from_fn(n, n, |r, c| {
        let j = r as i64 - jm;
        let jp = c as i64 - jm;
        let k = j - jp;
        let mut v = if k.abs() <= qj { qh[(k + qj) as usize] } else { ZERO };
        if j == jp {
            v += C64::new((j * j) as f64, 0.0);
        }
        v
    }))
}

/// Hermitian eigensolve with rank labels; inside a pair the vector with the
/// larger overlap on e_n is labelled +n when the pair is degenerate.
pub fn eigensolve_raw(m: &DMatrix<C64>) -> RawSpectrum {
    let n = m.nrows();
    let jmax = n / 2;
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut values = vec![0.0; n];
    let mut vectors = DMatrix::zeros(n, n);
    let mut put = |label: i64, src: usize, values: &mut Vec<f64>| {
        let k = idx(jmax, label);
        values[k] = eig.eigenvalues[src];
        vectors.set_column(k, &eig.eigenvectors.column(src));
    };
    put(0, order[0], &mut values);
    for p in 1..=jmax {
        let (lo, hi) = (order[2 * p - 1], order[2 * p]);
        let degenerate = (eig.eigenvalues[hi] - eig.eigenvalues[lo]).abs() <= 1e-10 * scale;
        let (minus, plus) = if degenerate {
            let ov = |s: usize| eig.eigenvectors[(idx(jmax, p as i64), s)].norm();
            if ov(lo) > ov(hi) {
                (hi, lo)
            } else {
                (lo, hi)
            }
        } else {
            (lo, hi)
        };
        put(-(p as i64), minus, &mut values);
        put(p as i64, plus, &mut values);
    }
    RawSpectrum { jmax, values, vectors }
}

fn normalize(v: &mut [C64]) -> f64 {
    let nrm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if nrm > 0.0 {
        v.iter_mut().for_each(|c| *c /= nrm);
    }
    nrm
}

fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn phase_fix(v: &mut [C64]) {
    let (mut best, mut k) = (0.0, 0);
    for (i, c) in v.iter().enumerate() {
        // Strictly larger, so ties go to the lowest index.
        if c.norm() > best * (1.0 + 1e-12) {
            best = c.norm();
            k = i;
        }
    }
    if best > 0.0 {
        let ph = v[k].conj() / best;
        v.iter_mut().for_each(|c| *c *= ph);
    }
}

/// Conjugation-adapted orthonormal basis, column j + J = psi_j.
pub fn adapted_basis(raw: &RawSpectrum) -> DMatrix<C64> {
    let n = raw.vectors.nrows();
    let jmax = raw.jmax;
    let col = |k: usize| -> Vec<C64> { raw.vectors.column(k).iter().copied().collect() };
    let real_part = |v: &[C64]| -> Vec<C64> {
        let cv = conj_reflect(v);
        v.iter().zip(&cv).map(|(a, b)| (a + b) * 0.5).collect()
    };
    let mut psi = DMatrix::zeros(n, n);

    let v0 = col(idx(jmax, 0));
    let a = real_part(&v0);
    let iv: Vec<C64> = v0.iter().map(|c| c * C64::i()).collect();
    let b = real_part(&iv);
    let mut p0 = if a.iter().map(|c| c.norm_sqr()).sum::<f64>() >= b.iter().map(|c| c.norm_sqr()).sum::<f64>() {
        a
    } else {
        b
    };
    normalize(&mut p0);
    // Only a sign flip keeps p0 fixed by C.
    let big = p0.iter().copied().fold(ZERO, |a, c| if c.norm() > a.norm() * (1.0 + 1e-12) { c } else { a });
    if big.re < 0.0 || (big.re == 0.0 && big.im < 0.0) {
        p0.iter_mut().for_each(|c| *c = -*c);
    }
    psi.set_column(idx(jmax, 0), &nalgebra::DVector::from_vec(p0));

    for p in 1..=jmax {
        let v1 = col(idx(jmax, -(p as i64)));
        let v2 = col(idx(jmax, p as i64));
        let cands = [
            v1.clone(),
            v2.clone(),
            v1.iter().map(|c| c * C64::i()).collect::<Vec<_>>(),
            v2.iter().map(|c| c * C64::i()).collect::<Vec<_>>(),
        ];
        let mut reals: Vec<Vec<C64>> = Vec::new();
        // Take the candidates in order of their C-real content to keep Gram-Schmidt stable.
        let mut rc: Vec<Vec<C64>> = cands.iter().map(|v| real_part(v)).collect();
        rc.sort_by(|x, y| {
            let nx: f64 = x.iter().map(|c| c.norm_sqr()).sum();
            let ny: f64 = y.iter().map(|c| c.norm_sqr()).sum();
            ny.total_cmp(&nx)
        });
        for mut r in rc {
            for q in &reals {
                // Real inner product keeps C-reality.
                let h = inner(q, &r).re;
                r.iter_mut().zip(q).for_each(|(x, y)| *x -= y * h);
            }
            if normalize(&mut r) > 1e-6 {
                reals.push(r);
            }
            if reals.len() == 2 {
                break;
            }
        }
        let (r1, r2) = (&reals[0], &reals[1]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let wp: Vec<C64> = r1.iter().zip(r2).map(|(a, b)| (a + C64::i() * b) * s).collect();
        let wm: Vec<C64> = r1.iter().zip(r2).map(|(a, b)| (a - C64::i() * b) * s).collect();
        let en = idx(jmax, p as i64);
        let mut w = if wp[en].norm() >= wm[en].norm() { wp } else { wm };
        phase_fix(&mut w);
        let cw = conj_reflect(&w);
        psi.set_column(en, &nalgebra::DVector::from_vec(w));
        psi.set_column(idx(jmax, -(p as i64)), &nalgebra::DVector::from_vec(cw));
    }
    psi
}

/// Full spectral data; the spectrum must be positive.
pub fn eigensolve_blocks(m: &DMatrix<C64>) -> Result<SpectralData> {
    let raw = eigensolve_raw(m);
    let min = raw.values.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return Err(Error::NonPositiveSpectrum(min));
    }
    let jmax = raw.jmax;
    let q_bar = m[(jmax, jmax)].re;
    let psi = adapted_basis(&raw);
    let mu_sq = raw.values.clone();
    let d: Vec<f64> = (0..mu_sq.len())
        .map(|k| {
            let j = k as f64 - jmax as f64;
            mu_sq[k] - j * j - q_bar
        })
        .collect();
    let lambda: Vec<f64> = mu_sq.iter().map(|v| v.sqrt()).collect();
    let c: Vec<f64> = (0..mu_sq.len())
        .map(|k| {
            let j = k as i64 - jmax as i64;
            jbracket(j) * (lambda[k] - j.abs() as f64)
        })
        .collect();
    let d_l2 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    let m_sq = c[jmax].max(q_bar.abs() + d_l2);
    Ok(SpectralData { jmax, q_bar, mu_sq, d, lambda, c, m_sq, psi, eigvecs: raw.vectors, lq: m.clone() })
}

/// q_bar, d and partial sums of d^2 at k = J/4, J/2, J.
pub fn decompose_eigenvalues(sd: &SpectralData) -> TailReport {
    let ks = [sd.jmax / 4, sd.jmax / 2, sd.jmax];
    let partial_sums = ks
        .iter()
        .map(|&k| {
            let s = (-(k as i64)..=k as i64).map(|j| sd.d[idx(sd.jmax, j)].powi(2)).sum();
            (k, s)
        })
        .collect();
    TailReport { q_bar: sd.q_bar, partial_sums }
}

impl SpectralData {
    pub fn n(&self) -> usize {
        2 * self.jmax + 1
    }

    pub fn label_index(&self, j: i64) -> usize {
        idx(self.jmax, j)
    }

    /// (L_q)^mu in the exponential basis.
    pub fn spectral_power(&self, mu: f64) -> DMatrix<C64> {
        let v = &self.eigvecs;
        let mut vd = v.clone();
        for (k, mut c) in vd.column_iter_mut().enumerate() {
            c *= C64::new(self.mu_sq[k].powf(mu), 0.0);
        }
        &vd * v.adjoint()
    }

    /// (L_q)^mu in the adapted basis psi (block diagonal over [n]).
    pub fn spectral_power_psi(&self, mu: f64) -> DMatrix<C64> {
        self.psi.adjoint() * self.spectral_power(mu) * &self.psi
    }

    /// The [n]-block of B = sqrt(L_q) in the adapted basis, ordered (-n, n).
    pub fn b_block(&self, n: usize) -> DMatrix<C64> {
        self.power_block(n, 0.5)
    }

    pub fn power_block(&self, n: usize, mu: f64) -> DMatrix<C64> {
        let cols: Vec<usize> = if n == 0 {
            vec![self.jmax]
        } else {
            vec![self.label_index(-(n as i64)), self.label_index(n as i64)]
        };
        let ps = self.psi.select_columns(&cols);
        let ev = self.eigvecs.select_columns(&cols);
        let mut evd = ev.clone();
        for (k, mut c) in evd.column_iter_mut().enumerate() {
            c *= C64::new(self.mu_sq[cols[k]].powf(mu), 0.0);
        }
        let proj = ps.adjoint() * &ev;
        let projd = ps.adjoint() * &evd;
        &projd * proj.adjoint()
    }

    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.psi.adjoint() * &self.psi - DMatrix::<C64>::identity(self.n(), self.n());
        g.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "J": self.jmax,
            "q_bar": self.q_bar,
            "m_sq": self.m_sq,
            "mu_sq": self.mu_sq,
            "d": self.d,
            "lambda": self.lambda,
            "c": self.c,
        })
    }

    /// CSV rows (j, mu_j^2, d(j), lambda_j, c_j).
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["j", "mu_sq", "d", "lambda", "c"])?;
        for k in 0..self.n() {
            let j = k as i64 - self.jmax as i64;
            wr.write_record(&[
                j.to_string(),
                format!("{:.15e}", self.mu_sq[k]),
                format!("{:.15e}", self.d[k]),
                format!("{:.15e}", self.lambda[k]),
                format!("{:.15e}", self.c[k]),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Convenience: spectral data for an x-only potential at cutoff J.
pub fn spectrum(q: &TorusFunction, jmax: usize) -> Result<SpectralData> {
    eigensolve_blocks(&assemble_lq(q, jmax)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials;

    fn maxabs(m: &DMatrix<C64>) -> f64 {
        m.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn assemble_examples() {
        let zero = potentials::constant(1, 0.0, 4);
        let m = assemble_lq(&zero, 4).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                let want = if r == c { ((r as f64) - 4.0).powi(2) } else { 0.0 };
                assert_eq!(m[(r, c)], C64::new(want, 0.0));
            }
        }
        let m = assemble_lq(&potentials::cosine(1, 2.0, 0.0, 4), 4).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                let want = if (r as i64 - c as i64).abs() == 1 { 1.0 } else if r == c { ((r as f64) - 4.0).powi(2) } else { 0.0 };
                assert_eq!(m[(r, c)], C64::new(want, 0.0));
            }
        }
        let complex = TorusFunction::spatial(1, &[ZERO, ZERO, C64::new(0.0, 1.0)]).unwrap();
        assert!(matches!(assemble_lq(&complex, 3), Err(Error::ComplexPotential)));
    }

    #[test]
    fn constant_potential_exact() {
        let sd = spectrum(&potentials::constant(1, 2.5, 4), 12).unwrap();
        for k in 0..sd.n() {
            let j = k as f64 - 12.0;
            assert!((sd.mu_sq[k] - j * j - 2.5).abs() < 1e-12);
            assert!(sd.d[k].abs() < 1e-12);
        }
        let rep = decompose_eigenvalues(&sd);
        assert!(rep.partial_sums.iter().all(|&(_, s)| s < 1e-22));
    }

    #[test]
    fn free_basis_is_exponential() {
        let sd = spectrum(&potentials::constant(1, 1.0, 4), 6).unwrap();
        let id = DMatrix::<C64>::identity(13, 13);
        assert!(maxabs(&(&sd.psi - id)) < 1e-12);
    }

    #[test]
    fn positivity_enforced() {
        let m = assemble_lq(&potentials::cosine(1, 1.0, 0.0, 4), 16).unwrap();
        assert!(matches!(eigensolve_blocks(&m), Err(Error::NonPositiveSpectrum(_))));
    }

    #[test]
    fn adapted_basis_properties() {
        let sd = spectrum(&potentials::cosine(1, 2.0, 3.0, 4), 24).unwrap();
        assert!(sd.orthonormality_defect() < 1e-10);
        for j in 1..=24i64 {
            let a: Vec<C64> = sd.psi.column(sd.label_index(j)).iter().copied().collect();
            let b: Vec<C64> = sd.psi.column(sd.label_index(-j)).iter().copied().collect();
            let ca = conj_reflect(&a);
            assert!(ca.iter().zip(&b).all(|(x, y)| (x - y).norm() < 1e-12));
        }
        // B is block diagonal in psi with equal diagonal entries in each block.
        let bpsi = sd.spectral_power_psi(0.5);
        for r in 0..sd.n() {
            for c in 0..sd.n() {
                let (jr, jc) = (r as i64 - 24, c as i64 - 24);
                if jr.abs() != jc.abs() {
                    assert!(bpsi[(r, c)].norm() < 1e-9, "({jr},{jc})");
                }
            }
        }
        for n in 1..20 {
            let b = sd.b_block(n);
            assert!((b[(0, 0)] - b[(1, 1)]).norm() < 1e-10);
            let direct = bpsi.view((sd.label_index(-(n as i64)), sd.label_index(-(n as i64))), (1, 1))[(0, 0)];
            assert!((direct - b[(0, 0)]).norm() < 1e-10);
        }
    }

    #[test]
    fn refinement_against_large_cutoff() {
        let q = potentials::cosine(1, 2.0, 3.0, 4);
        let a = spectrum(&q, 32).unwrap();
        let b = spectrum(&q, 128).unwrap();
        for j in -16i64..=16 {
            assert!((a.d[a.label_index(j)] - b.d[b.label_index(j)]).abs() < 1e-8, "j = {j}");
        }
    }

    #[test]
    fn spectral_power_identities() {
        let sd = spectrum(&potentials::cosine(1, 1.0, 1.0, 4), 20).unwrap();
        assert!(maxabs(&(sd.spectral_power(1.0) - &sd.lq)) < 1e-10);
        let h = sd.spectral_power(0.5);
        assert!(maxabs(&(&h * &h - sd.spectral_power(1.0))) < 1e-10);
        let id = DMatrix::<C64>::identity(41, 41);
        assert!(maxabs(&(sd.spectral_power(-0.5) * &h - id)) < 1e-10);
    }

    #[test]
    fn c_bound_holds() {
        let q = potentials::smooth_random(1, 8, 4.0, 1.0, 3).add(&potentials::constant(1, 2.0, 8)).unwrap();
        let sd = spectrum(&q, 32).unwrap();
        assert!(sd.c.iter().all(|c| c.abs() <= sd.m_sq + 1e-12));
    }
}
