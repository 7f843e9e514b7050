//! Dense-matrix oracles for the block-operator algebra at nu = 1.
//!
//! Operators are unfolded on the truncated index set (l, j), |l| <= L, |j| <= J, and pairs
//! on its doubling. Products of unfolded matrices differ from the truncated block product
//! only through modes that leave |l| <= L, so comparisons use generators whose angle
//! support keeps every contributing term inside the window.

use crate::error::{Error, Result};
use crate::harmonics::{Lattice, C64};
use crate::opmatrix::{BlockOperator, OperatorPair};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Toeplitz-in-l unfolding of A: block (l, l') is A(l - l').
pub fn dense_operator(a: &BlockOperator) -> Result<DMatrix<C64>> {
    let lat = *a.lattice();
    if lat.nu != 1 {
        return Err(Error::Config(format!("dense oracle needs nu = 1, got {}", lat.nu)));
    }
    let (nl, d) = (lat.n_ell(), lat.n_space());
    let l = lat.l as i64;
    let mut out = DMatrix::zeros(nl * d, nl * d);
    for la in -l..=l {
        for lb in -l..=l {
            if let Some(e) = lat.ell_index(&[la - lb]) {
                let (r0, c0) = (((la + l) as usize) * d, ((lb + l) as usize) * d);
                out.view_mut((r0, c0), (d, d)).copy_from(&a.mode(e));
            }
        }
    }
    Ok(out)
}

/// (l, j) -> (-l, -j) followed by complex conjugation.
pub fn dense_reflect_conj(m: &DMatrix<C64>) -> DMatrix<C64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |r, c| m[(n - 1 - r, n - 1 - c)].conj())
}

/// [[A^d, A^o], [-conj A^o, -conj A^d]] unfolded.
pub fn dense_pair(p: &OperatorPair) -> Result<DMatrix<C64>> {
    let (d, o) = (dense_operator(&p.d)?, dense_operator(&p.o)?);
    let n = d.nrows();
    let mut f = DMatrix::zeros(2 * n, 2 * n);
    f.view_mut((0, 0), (n, n)).copy_from(&d);
    f.view_mut((0, n), (n, n)).copy_from(&o);
    f.view_mut((n, 0), (n, n)).copy_from(&(-dense_reflect_conj(&o)));
    f.view_mut((n, n), (n, n)).copy_from(&(-dense_reflect_conj(&d)));
    Ok(f)
}

/// exp(A) by scaling and squaring of a 30-term Taylor polynomial.
pub fn expm_taylor(a: &DMatrix<C64>) -> DMatrix<C64> {
    let nrm = a.iter().map(|c| c.norm()).sum::<f64>();
    let k = (nrm.max(1.0).log2().ceil() as i32 + 4).max(0);
    let b = a / C64::new(2f64.powi(k), 0.0);
    let n = a.nrows();
    let mut term = DMatrix::<C64>::identity(n, n);
    let mut sum = term.clone();
    for i in 1..30 {
        term = &term * &b / C64::new(i as f64, 0.0);
        sum += &term;
    }
    for _ in 0..k {
        sum = &sum * &sum;
    }
    sum
}

/// i [X, V] on the unfolded pair matrices.
pub fn dense_ad(x: &OperatorPair, v: &OperatorPair) -> Result<DMatrix<C64>> {
    let (fx, fv) = (dense_pair(x)?, dense_pair(v)?);
    Ok((&fx * &fv - &fv * &fx) * C64::new(0.0, 1.0))
}

/// e^{iX} V e^{-iX} on the unfolded pair matrices.
pub fn dense_lie(x: &OperatorPair, v: &OperatorPair) -> Result<DMatrix<C64>> {
    let ix = dense_pair(x)? * C64::new(0.0, 1.0);
    Ok(expm_taylor(&ix) * dense_pair(v)? * expm_taylor(&(-ix)))
}

/// Columns l' = 0 of an unfolded pair matrix, as the (d, o) blocks for each l.
pub fn column_zero(f: &DMatrix<C64>, lat: Lattice) -> Vec<(i64, DMatrix<C64>, DMatrix<C64>)> {
    let (d, l) = (lat.n_space(), lat.l as i64);
    let n = lat.n_ell() * d;
    let c0 = (l as usize) * d;
    (-l..=l)
        .map(|la| {
            let r0 = ((la + l) as usize) * d;
            (la, f.view((r0, c0), (d, d)).into_owned(), f.view((r0, n + c0), (d, d)).into_owned())
        })
        .collect()
}

fn random_block(rng: &mut ChaCha8Rng, d: usize, amp: f64) -> DMatrix<C64> {
    DMatrix::from_fn(d, d, |_, _| C64::new(rng.gen_range(-amp..amp), rng.gen_range(-amp..amp)))
}

/// Random pair with the conjugation structure, supported on |l| <= lmax.
pub fn random_structured_pair(lat: Lattice, amp: f64, lmax: i64, rng: &mut ChaCha8Rng) -> OperatorPair {
    let mut draw = || {
        let mut a = BlockOperator::zeros(lat);
        for e in 0..lat.n_ell() {
            if lat.ell_at(e).iter().all(|x| x.abs() <= lmax) {
                a.set(e, random_block(rng, lat.n_space(), amp));
            }
        }
        a
    };
    let (d, o) = (draw(), draw());
    let half = C64::new(0.5, 0.0);
    let d = d.add(&d.adjoint()).expect("same lattice").scale(half);
    let o = o.add(&o.adjoint().conj()).expect("same lattice").scale(half);
    OperatorPair { d, o }
}
