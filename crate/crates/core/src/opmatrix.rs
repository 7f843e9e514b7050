//! Block-matrix operators A(l) on span{basis_j : |j| <= J}, their s-decay
//! norms and the 2x2 operator matrices [[A^d, A^o], [-conj A^o, -conj A^d]].
//!
//! Each angle mode l carries a dense (2J+1) x (2J+1) matrix with row = output
//! index j and column = input index j', both stored at j + J. A block
//! A_[n]^[n'](l) is the submatrix with rows [n] and columns [n'], where
//! [0] = {0} and [n] = {-n, n}.
//!
//! The basis is assumed adapted to complex conjugation (basis_{-j} is the
//! conjugate of basis_j), which makes conj(A)(l)[j][j'] = conj(A(-l)[-j][-j']).

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harmonics::{bracket, dot, ell_norm, jbracket, Lattice, C64};

const ZERO: C64 = C64::new(0.0, 0.0);

/// Rows/columns of the block [n] inside a (2J+1)-dimensional index range.
pub fn block_indices(jmax: usize, n: usize) -> Vec<usize> {
    if n == 0 {
        vec![jmax]
    } else {
        vec![jmax - n, jmax + n]
    }
}

/// Time-dependent block operator, sparse in l and dense in (j, j').
#[derive(Clone, Debug, PartialEq)]
pub struct BlockOperator {
    lattice: Lattice,
    modes: Vec<Option<DMatrix<C64>>>,
}

impl BlockOperator {
    pub fn zeros(lattice: Lattice) -> Self {
        Self { lattice, modes: vec![None; lattice.n_ell()] }
    }

    pub fn identity(lattice: Lattice) -> Self {
        let d = lattice.n_space();
        Self::time_independent(lattice, DMatrix::identity(d, d))
    }

    /// An operator supported on l = 0.
    pub fn time_independent(lattice: Lattice, m: DMatrix<C64>) -> Self {
        let mut a = Self::zeros(lattice);
        a.set(lattice.zero_ell(), m);
        a
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn dim(&self) -> usize {
        self.lattice.n_space()
    }

    pub fn get(&self, e: usize) -> Option<&DMatrix<C64>> {
        self.modes[e].as_ref()
    }

    /// The l-mode matrix, zero if absent.
    pub fn mode(&self, e: usize) -> DMatrix<C64> {
        self.modes[e].clone().unwrap_or_else(|| DMatrix::zeros(self.dim(), self.dim()))
    }

    pub fn set(&mut self, e: usize, m: DMatrix<C64>) {
        assert_eq!(m.shape(), (self.dim(), self.dim()));
        self.modes[e] = if m.iter().all(|c| *c == ZERO) { None } else { Some(m) };
    }

    pub fn mode_mut(&mut self, e: usize) -> &mut DMatrix<C64> {
        let d = self.dim();
        self.modes[e].get_or_insert_with(|| DMatrix::zeros(d, d))
    }

    /// Indices of l-modes with stored data.
    pub fn support(&self) -> Vec<usize> {
        (0..self.modes.len()).filter(|&e| self.modes[e].is_some()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.modes.iter().all(|m| m.is_none())
    }

    /// A_[n]^[n'](l) with rows ordered (-n, n).
    pub fn block(&self, e: usize, n: usize, np: usize) -> DMatrix<C64> {
        let r = block_indices(self.lattice.j, n);
        let c = block_indices(self.lattice.j, np);
        match &self.modes[e] {
            Some(m) => DMatrix::from_fn(r.len(), c.len(), |a, b| m[(r[a], c[b])]),
            None => DMatrix::zeros(r.len(), c.len()),
        }
    }

    pub fn set_block(&mut self, e: usize, n: usize, np: usize, b: &DMatrix<C64>) {
        let r = block_indices(self.lattice.j, n);
        let c = block_indices(self.lattice.j, np);
        let m = self.mode_mut(e);
        for (a, &ri) in r.iter().enumerate() {
            for (k, &ci) in c.iter().enumerate() {
                m[(ri, ci)] = b[(a, k)];
            }
        }
    }

    fn check(&self, other: &BlockOperator) -> Result<()> {
        if self.lattice != other.lattice {
            return Err(Error::CutoffMismatch(format!("{:?} vs {:?}", self.lattice, other.lattice)));
        }
        Ok(())
    }

    fn zip(&self, other: &BlockOperator, f: impl Fn(&DMatrix<C64>, &DMatrix<C64>) -> DMatrix<C64>) -> BlockOperator {
        let d = self.dim();
        let z = DMatrix::zeros(d, d);
        let mut out = BlockOperator::zeros(self.lattice);
        for e in 0..self.modes.len() {
            match (&self.modes[e], &other.modes[e]) {
                (None, None) => {}
                (a, b) => out.set(e, f(a.as_ref().unwrap_or(&z), b.as_ref().unwrap_or(&z))),
            }
        }
        out
    }

    pub fn add(&self, other: &BlockOperator) -> Result<BlockOperator> {
        self.check(other)?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &BlockOperator) -> Result<BlockOperator> {
        self.check(other)?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn scale(&self, c: C64) -> BlockOperator {
        let mut out = BlockOperator::zeros(self.lattice);
        for e in self.support() {
            out.set(e, self.modes[e].as_ref().unwrap() * c);
        }
        out
    }

    /// (AB)(l) = sum_{l1} A(l - l1) B(l1), truncated to the l-box.
    pub fn mul(&self, other: &BlockOperator) -> Result<BlockOperator> {
        self.check(other)?;
        let lat = self.lattice;
        let ells = lat.ells();
        let mut out = BlockOperator::zeros(lat);
        let sa = self.support();
        let sb = other.support();
        for &ea in &sa {
            for &eb in &sb {
                let sum: Vec<i64> = ells[ea].iter().zip(&ells[eb]).map(|(a, b)| a + b).collect();
                let Some(ec) = lat.ell_index(&sum) else { continue };
                let p = self.modes[ea].as_ref().unwrap() * other.modes[eb].as_ref().unwrap();
                *out.mode_mut(ec) += p;
            }
        }
        Ok(out)
    }

    /// A*(l) = A(-l)^dagger.
    pub fn adjoint(&self) -> BlockOperator {
        let mut out = BlockOperator::zeros(self.lattice);
        for e in self.support() {
            out.set(self.lattice.neg_ell(e), self.modes[e].as_ref().unwrap().adjoint());
        }
        out
    }

    /// conj(A)(l)[j][j'] = conj(A(-l)[-j][-j']).
    pub fn conj(&self) -> BlockOperator {
        let d = self.dim();
        let mut out = BlockOperator::zeros(self.lattice);
        for e in self.support() {
            let m = self.modes[e].as_ref().unwrap();
            out.set(self.lattice.neg_ell(e), DMatrix::from_fn(d, d, |r, c| m[(d - 1 - r, d - 1 - c)].conj()));
        }
        out
    }

    pub fn transpose_conj_defect(&self, other: &BlockOperator) -> f64 {
        max_abs_op(&self.sub(other).expect("same lattice"))
    }

    /// max |A - A*|.
    pub fn self_adjoint_defect(&self) -> f64 {
        self.transpose_conj_defect(&self.adjoint())
    }

    /// omega . d_phi A: multiplies A(l) by i omega.l.
    pub fn phi_derivative(&self, omega: &[f64]) -> BlockOperator {
        let mut out = BlockOperator::zeros(self.lattice);
        for e in self.support() {
            let w = dot(omega, &self.lattice.ell_at(e));
            out.set(e, self.modes[e].as_ref().unwrap() * C64::new(0.0, w));
        }
        out
    }

    /// (Pi_N A, Pi_N^perp A) split at |l| <= N.
    pub fn project_modes(&self, n: f64) -> (BlockOperator, BlockOperator) {
        let mut lo = BlockOperator::zeros(self.lattice);
        let mut hi = BlockOperator::zeros(self.lattice);
        for e in self.support() {
            let m = self.modes[e].clone().unwrap();
            if ell_norm(&self.lattice.ell_at(e)) <= n {
                lo.set(e, m);
            } else {
                hi.set(e, m);
            }
        }
        (lo, hi)
    }

    /// <D>^a A <D>^b, entrywise <j>^a A[j][j'] <j'>^b.
    pub fn weighted(&self, a: f64, b: f64) -> BlockOperator {
        let d = self.dim();
        let jm = self.lattice.j as i64;
        let w: Vec<f64> = (0..d).map(|k| jbracket(k as i64 - jm)).collect();
        let mut out = BlockOperator::zeros(self.lattice);
        for e in self.support() {
            let m = self.modes[e].as_ref().unwrap();
            out.set(e, DMatrix::from_fn(d, d, |r, c| m[(r, c)] * (w[r].powf(a) * w[c].powf(b))));
        }
        out
    }

    /// <D>^s A <D>^{-s}.
    pub fn weight_conjugate(&self, s: f64) -> BlockOperator {
        self.weighted(s, -s)
    }

    /// |A|_s^2 = sum_{h, l} <l, h>^{2s} sup_{|n - n'| = h} |A_[n]^[n'](l)|_HS^2.
    pub fn s_decay_norm(&self, s: f64) -> f64 {
        let jm = self.lattice.j;
        let mut total = 0.0;
        for e in self.support() {
            let m = self.modes[e].as_ref().unwrap();
            let ell = self.lattice.ell_at(e);
            let mut sup = vec![0.0f64; jm + 1];
            for n in 0..=jm {
                let r = block_indices(jm, n);
                for np in 0..=jm {
                    let c = block_indices(jm, np);
                    let mut hs = 0.0;
                    for &ri in &r {
                        for &ci in &c {
                            hs += m[(ri, ci)].norm_sqr();
                        }
                    }
                    let h = n.abs_diff(np);
                    if hs > sup[h] {
                        sup[h] = hs;
                    }
                }
            }
            for (h, v) in sup.iter().enumerate() {
                if *v > 0.0 {
                    total += bracket(&ell, h as i64).powf(2.0 * s) * v;
                }
            }
        }
        total.sqrt()
    }

    /// Frobenius norm over all modes.
    pub fn frobenius(&self) -> f64 {
        self.modes.iter().flatten().map(|m| m.iter().map(|c| c.norm_sqr()).sum::<f64>()).sum::<f64>().sqrt()
    }

    /// Action on coefficients u(l, j) stored as in TorusFunction.
    pub fn apply(&self, u: &[C64]) -> Vec<C64> {
        let lat = self.lattice;
        let d = self.dim();
        let ells = lat.ells();
        let mut out = vec![ZERO; lat.len()];
        for ea in self.support() {
            let m = self.modes[ea].as_ref().unwrap();
            for eb in 0..lat.n_ell() {
                let sum: Vec<i64> = ells[ea].iter().zip(&ells[eb]).map(|(a, b)| a + b).collect();
                let Some(ec) = lat.ell_index(&sum) else { continue };
                let ub = &u[eb * d..(eb + 1) * d];
                if ub.iter().all(|c| *c == ZERO) {
                    continue;
                }
                for r in 0..d {
                    let mut acc = ZERO;
                    for c in 0..d {
                        acc += m[(r, c)] * ub[c];
                    }
                    out[ec * d + r] += acc;
                }
            }
        }
        out
    }

    /// Evaluate A(phi) = sum_l A(l) e^{i l.phi}.
    pub fn at_angle(&self, phi: &[f64]) -> DMatrix<C64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        for e in self.support() {
            let th: f64 = self.lattice.ell_at(e).iter().zip(phi).map(|(&l, p)| l as f64 * p).sum();
            out += self.modes[e].as_ref().unwrap() * C64::from_polar(1.0, th);
        }
        out
    }

    /// Same operator on a lattice with a different l-cutoff (extra modes zero, excess dropped).
    pub fn with_l(&self, l: usize) -> BlockOperator {
        let lat = Lattice { l, ..self.lattice };
        let mut out = BlockOperator::zeros(lat);
        for e in self.support() {
            if let Some(k) = lat.ell_index(&self.lattice.ell_at(e)) {
                out.set(k, self.modes[e].clone().unwrap());
            }
        }
        out
    }
}

pub fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

pub fn max_abs_op(a: &BlockOperator) -> f64 {
    a.modes.iter().flatten().map(max_abs).fold(0.0, f64::max)
}

/// The pair (A^d, A^o) standing for [[A^d, A^o], [-conj A^o, -conj A^d]].
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorPair {
    pub d: BlockOperator,
    pub o: BlockOperator,
}

/// One labelled term of the class norm.
#[derive(Clone, Debug, Serialize)]
pub struct NormTerm {
    pub label: String,
    pub value: f64,
}

/// All terms of |A|_{s, alpha, beta} with their sum.
#[derive(Clone, Debug, Serialize)]
pub struct NormBundle {
    pub s: f64,
    pub alpha: f64,
    pub beta: f64,
    pub terms: Vec<NormTerm>,
    pub total: f64,
}

impl OperatorPair {
    pub fn new(d: BlockOperator, o: BlockOperator) -> Result<Self> {
        d.check(&o)?;
        Ok(Self { d, o })
    }

    pub fn zeros(lattice: Lattice) -> Self {
        Self { d: BlockOperator::zeros(lattice), o: BlockOperator::zeros(lattice) }
    }

    pub fn lattice(&self) -> &Lattice {
        self.d.lattice()
    }

    pub fn is_zero(&self) -> bool {
        self.d.is_zero() && self.o.is_zero()
    }

    pub fn add(&self, other: &OperatorPair) -> Result<OperatorPair> {
        Ok(OperatorPair { d: self.d.add(&other.d)?, o: self.o.add(&other.o)? })
    }

    pub fn sub(&self, other: &OperatorPair) -> Result<OperatorPair> {
        Ok(OperatorPair { d: self.d.sub(&other.d)?, o: self.o.sub(&other.o)? })
    }

    /// Real scaling keeps the conjugation structure.
    pub fn scale(&self, c: f64) -> OperatorPair {
        OperatorPair { d: self.d.scale(C64::new(c, 0.0)), o: self.o.scale(C64::new(c, 0.0)) }
    }

    pub fn project_modes(&self, n: f64) -> (OperatorPair, OperatorPair) {
        let (dl, dh) = self.d.project_modes(n);
        let (ol, oh) = self.o.project_modes(n);
        (OperatorPair { d: dl, o: ol }, OperatorPair { d: dh, o: oh })
    }

    pub fn phi_derivative(&self, omega: &[f64]) -> OperatorPair {
        OperatorPair { d: self.d.phi_derivative(omega), o: self.o.phi_derivative(omega) }
    }

    /// max(|A^d - A^d*|, |A^o* - conj A^o|).
    pub fn structure_defect(&self) -> f64 {
        let a = self.d.self_adjoint_defect();
        let b = max_abs_op(&self.o.adjoint().sub(&self.o.conj()).expect("same lattice"));
        a.max(b)
    }

    pub fn frobenius(&self) -> f64 {
        (self.d.frobenius().powi(2) + self.o.frobenius().powi(2)).sqrt()
    }

    /// |A|_{s, alpha, beta} with repeated weights counted once.
    pub fn norm_bundle(&self, s: f64, alpha: f64, beta: f64) -> NormBundle {
        let mut terms = vec![
            NormTerm { label: format!("<D>^{alpha} Ad"), value: self.d.weighted(alpha, 0.0).s_decay_norm(s) },
            NormTerm { label: format!("Ad <D>^{alpha}"), value: self.d.weighted(0.0, alpha).s_decay_norm(s) },
            NormTerm { label: format!("<D>^{beta} Ao"), value: self.o.weighted(beta, 0.0).s_decay_norm(s) },
            NormTerm { label: format!("Ao <D>^{beta}"), value: self.o.weighted(0.0, beta).s_decay_norm(s) },
        ];
        let mut sig: Vec<f64> = Vec::new();
        for v in [alpha, -alpha, beta, -beta, 0.0] {
            if !sig.iter().any(|x| (x - v).abs() < 1e-15) {
                sig.push(v);
            }
        }
        for &v in &sig {
            terms.push(NormTerm { label: format!("<D>^{v} Ad <D>^{}", -v), value: self.d.weight_conjugate(v).s_decay_norm(s) });
            terms.push(NormTerm { label: format!("<D>^{v} Ao <D>^{}", -v), value: self.o.weight_conjugate(v).s_decay_norm(s) });
        }
        let total = terms.iter().map(|t| t.value).sum();
        NormBundle { s, alpha, beta, terms, total }
    }

    pub fn pair_norm(&self, s: f64, alpha: f64, beta: f64) -> f64 {
        self.norm_bundle(s, alpha, beta).total
    }
}

/// ad_X(V) = i[X, V] on operator matrices.
pub fn ad(x: &OperatorPair, v: &OperatorPair) -> Result<OperatorPair> {
    if x.lattice() != v.lattice() {
        return Err(Error::CutoffMismatch("ad: lattices differ".into()));
    }
    if x.is_zero() || v.is_zero() {
        return Ok(OperatorPair::zeros(*v.lattice()));
    }
    let (xdc, xoc, vdc, voc) = (x.d.conj(), x.o.conj(), v.d.conj(), v.o.conj());
    let wd = x.d.mul(&v.d)?.sub(&v.d.mul(&x.d)?)?.sub(&x.o.mul(&voc)?)?.add(&v.o.mul(&xoc)?)?;
    let wo = x.d.mul(&v.o)?.sub(&x.o.mul(&vdc)?)?.sub(&v.d.mul(&x.o)?)?.add(&v.o.mul(&xdc)?)?;
    let i = C64::new(0.0, 1.0);
    Ok(OperatorPair { d: wd.scale(i), o: wo.scale(i) })
}

/// Lie series for e^{iX} V e^{-iX}. Returns (result, result - V).
pub fn lie_conjugate(x: &OperatorPair, v: &OperatorPair, tol: f64) -> Result<(OperatorPair, OperatorPair)> {
    lie_series(x, v, tol, |_| 1.0)
}

/// sum_{k >= 0} coef(k) ad_X^k(V) / k!, stopped once a term drops below tol (1 + |result|).
pub fn lie_series(
    x: &OperatorPair,
    v: &OperatorPair,
    tol: f64,
    coef: impl Fn(usize) -> f64,
) -> Result<(OperatorPair, OperatorPair)> {
    const CAP: usize = 30;
    let mut term = v.clone();
    let mut result = v.scale(coef(0));
    let mut diff = OperatorPair::zeros(*v.lattice());
    let mut prev = term.frobenius();
    let mut growth = 0;
    for k in 1..=CAP {
        term = ad(x, &term)?.scale(1.0 / k as f64);
        let add = term.scale(coef(k));
        result = result.add(&add)?;
        diff = diff.add(&add)?;
        let tn = term.frobenius();
        if tn <= tol * (1.0 + result.frobenius()) {
            return Ok((result, diff));
        }
        if tn > prev {
            growth += 1;
            if growth >= 4 && k > 8 {
                return Err(Error::LieDivergence(tn / prev));
            }
        } else {
            growth = 0;
        }
        prev = tn;
    }
    Err(Error::LieDivergence(prev))
}

/// Matrices of X -> AX and X -> XB on the #[n] x #[n'] block space (column-major vec).
pub fn left_right_ops(a: &DMatrix<C64>, b: &DMatrix<C64>) -> (DMatrix<C64>, DMatrix<C64>) {
    let (p, q) = (a.nrows(), b.nrows());
    let ml = DMatrix::<C64>::identity(q, q).kronecker(a);
    let mr = b.transpose().kronecker(&DMatrix::<C64>::identity(p, p));
    (ml, mr)
}

/// Spectrum of a Hermitian matrix, ascending.
pub fn hermitian_spectrum(m: &DMatrix<C64>) -> Vec<f64> {
    let mut v: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// |G^{-1}|: 1/min|eig| for self-adjoint G, 1/sigma_min otherwise.
pub fn block_inverse_norm(g: &DMatrix<C64>) -> Result<f64> {
    let scale = max_abs(g).max(1e-300);
    let herm = max_abs(&(g - g.adjoint())) <= 1e-13 * scale;
    let m = if herm {
        hermitian_spectrum(g).iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min)
    } else {
        g.clone().singular_values().iter().copied().fold(f64::INFINITY, f64::min)
    };
    if m <= 1e-14 * scale {
        return Err(Error::Singular(m));
    }
    Ok(1.0 / m)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rmat(rng: &mut ChaCha8Rng, d: usize, amp: f64) -> DMatrix<C64> {
        DMatrix::from_fn(d, d, |_, _| C64::new(rng.gen_range(-amp..amp), rng.gen_range(-amp..amp)))
    }

    fn rand_op(lat: Lattice, amp: f64, lmax: i64, seed: u64) -> BlockOperator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = BlockOperator::zeros(lat);
        for e in 0..lat.n_ell() {
            if lat.ell_at(e).iter().all(|x| x.abs() <= lmax) {
                a.set(e, rmat(&mut rng, lat.n_space(), amp));
            }
        }
        a
    }

    /// A pair with the conjugation structure: symmetrized random data.
    pub(crate) fn rand_pair(lat: Lattice, amp: f64, lmax: i64, seed: u64) -> OperatorPair {
        let d = rand_op(lat, amp, lmax, seed);
        let d = d.add(&d.adjoint()).unwrap().scale(C64::new(0.5, 0.0));
        let o = rand_op(lat, amp, lmax, seed + 1000);
        // A^o* = conj(A^o) holds for (O + conj(O*)) / 2.
        let o = o.add(&o.adjoint().conj()).unwrap().scale(C64::new(0.5, 0.0));
        OperatorPair { d, o }
    }

    /// Dense matrix of A on (l, j) with |l| <= L, nu = 1.
    fn dense(a: &BlockOperator) -> DMatrix<C64> {
        let lat = *a.lattice();
        let (nl, d) = (lat.n_ell(), lat.n_space());
        let l = lat.l as i64;
        let mut out = DMatrix::zeros(nl * d, nl * d);
        for la in -l..=l {
            for lb in -l..=l {
                if let Some(e) = lat.ell_index(&[la - lb]) {
                    let m = a.mode(e);
                    let (r0, c0) = (((la + l) as usize) * d, ((lb + l) as usize) * d);
                    out.view_mut((r0, c0), (d, d)).copy_from(&m);
                }
            }
        }
        out
    }

    /// Reflection (l, j) -> (-l, -j) composed with complex conjugation.
    fn dense_conj(m: &DMatrix<C64>) -> DMatrix<C64> {
        let n = m.nrows();
        DMatrix::from_fn(n, n, |r, c| m[(n - 1 - r, n - 1 - c)].conj())
    }

    fn full(p: &OperatorPair) -> DMatrix<C64> {
        let (d, o) = (dense(&p.d), dense(&p.o));
        let n = d.nrows();
        let mut f = DMatrix::zeros(2 * n, 2 * n);
        f.view_mut((0, 0), (n, n)).copy_from(&d);
        f.view_mut((0, n), (n, n)).copy_from(&o);
        f.view_mut((n, 0), (n, n)).copy_from(&(-dense_conj(&o)));
        f.view_mut((n, n), (n, n)).copy_from(&(-dense_conj(&d)));
        f
    }

    #[test]
    fn identity_norm_is_sqrt2() {
        let lat = Lattice::new(1, 2, 5).unwrap();
        let id = BlockOperator::identity(lat);
        assert!((id.s_decay_norm(3.0) - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn single_block_norm() {
        let lat = Lattice::new(1, 3, 5).unwrap();
        let mut a = BlockOperator::zeros(lat);
        let b = DMatrix::from_row_slice(2, 2, &[C64::new(1.0, 0.0), C64::new(0.0, 2.0), ZERO, C64::new(-1.0, 0.0)]);
        a.set_block(lat.ell_index(&[2]).unwrap(), 4, 1, &b);
        let want = 3f64.powf(1.5) * 6f64.sqrt();
        assert!((a.s_decay_norm(1.5) - want).abs() < 1e-12);
    }

    #[test]
    fn s_decay_matches_direct_loop() {
        let lat = Lattice::new(1, 2, 4).unwrap();
        let a = rand_op(lat, 1.0, 2, 3);
        let s = 2.0;
        let mut total = 0.0;
        for e in 0..lat.n_ell() {
            let l = lat.ell_at(e)[0];
            for h in 0..=4usize {
                let mut sup = 0.0f64;
                for n in 0..=4usize {
                    for np in 0..=4usize {
                        if n.abs_diff(np) != h {
                            continue;
                        }
                        let hs: f64 = a.block(e, n, np).iter().map(|c| c.norm_sqr()).sum();
                        sup = sup.max(hs);
                    }
                }
                let br = 1f64.max(l.abs() as f64).max(h as f64);
                total += br.powf(2.0 * s) * sup;
            }
        }
        assert!((a.s_decay_norm(s) - total.sqrt()).abs() < 1e-12 * total.sqrt());
    }

    #[test]
    fn pair_norm_weight_free_dedup() {
        let lat = Lattice::new(1, 2, 4).unwrap();
        let p = rand_pair(lat, 1.0, 1, 5);
        let b = p.norm_bundle(2.0, 0.0, 0.0);
        assert_eq!(b.terms.len(), 6);
        let want = 3.0 * p.d.s_decay_norm(2.0) + 3.0 * p.o.s_decay_norm(2.0);
        assert!((b.total - want).abs() < 1e-12 * want);
        assert_eq!(OperatorPair::zeros(lat).pair_norm(2.0, 0.5, 0.0), 0.0);
        assert_eq!(p.norm_bundle(2.0, 0.5, 0.5).terms.len(), 10);
        assert_eq!(p.norm_bundle(2.0, 0.5, 0.25).terms.len(), 14);
    }

    #[test]
    fn pair_norm_diagonal_closed_form() {
        // A^d_[n]^[n] = <n>^{-1} Id, alpha = 1: <D> Ad and Ad <D> are the identity.
        let lat = Lattice::new(1, 1, 6).unwrap();
        let d = DMatrix::from_fn(13, 13, |r, c| if r == c { C64::new(1.0 / jbracket(r as i64 - 6), 0.0) } else { ZERO });
        let p = OperatorPair { d: BlockOperator::time_independent(lat, d), o: BlockOperator::zeros(lat) };
        let b = p.norm_bundle(1.0, 1.0, 0.0);
        let r2 = 2f64.sqrt();
        assert!((b.terms[0].value - r2).abs() < 1e-14);
        assert!((b.terms[1].value - r2).abs() < 1e-14);
        // Conjugations leave a diagonal operator unchanged: sup_n |<n>^{-1} Id|_HS = sqrt 2.
        let expect = 2.0 * r2 + 3.0 * r2;
        assert!((b.total - expect).abs() < 1e-12);
    }

    #[test]
    fn weight_conjugate_round_trip() {
        let lat = Lattice::new(1, 1, 5).unwrap();
        let a = rand_op(lat, 1.0, 1, 8);
        assert_eq!(a.weight_conjugate(0.0), a);
        let back = a.weight_conjugate(0.7).weight_conjugate(-0.7);
        assert!(max_abs_op(&back.sub(&a).unwrap()) < 1e-14);
        let diag = BlockOperator::time_independent(lat, DMatrix::from_diagonal(&nalgebra::DVector::from_fn(11, |k, _| C64::new(k as f64, 0.0))));
        assert!(max_abs_op(&diag.weight_conjugate(1.3).sub(&diag).unwrap()) < 1e-14);
    }

    #[test]
    fn ad_matches_dense_commutator() {
        let lat = Lattice::new(1, 3, 3).unwrap();
        let x = rand_pair(lat, 0.5, 1, 11);
        let v = rand_pair(lat, 0.5, 1, 12);
        let w = ad(&x, &v).unwrap();
        let (fx, fv) = (full(&x), full(&v));
        let fw = (&fx * &fv - &fv * &fx) * C64::new(0.0, 1.0);
        // Column block l' = 0 of the dense commutator carries W(l).
        let (nl, d) = (lat.n_ell(), lat.n_space());
        let n = nl * d;
        for l in -3i64..=3 {
            let e = lat.ell_index(&[l]).unwrap();
            let r0 = ((l + 3) as usize) * d;
            let c0 = 3 * d;
            let gd = fw.view((r0, c0), (d, d)).into_owned();
            let go = fw.view((r0, n + c0), (d, d)).into_owned();
            assert!(max_abs(&(gd - w.d.mode(e))) < 1e-12);
            assert!(max_abs(&(go - w.o.mode(e))) < 1e-12);
        }
        assert!(w.structure_defect() < 1e-12);
        assert!(ad(&x, &OperatorPair::zeros(lat)).unwrap().is_zero());
    }

    #[test]
    fn ad_of_commuting_diagonals_vanishes() {
        let lat = Lattice::new(1, 1, 4).unwrap();
        let dg = |f: fn(f64) -> f64| {
            DMatrix::from_diagonal(&nalgebra::DVector::from_fn(9, |k, _| C64::new(f((k as f64 - 4.0).abs()), 0.0)))
        };
        let x = OperatorPair { d: BlockOperator::time_independent(lat, dg(|t| t + 1.0)), o: BlockOperator::zeros(lat) };
        let v = OperatorPair { d: BlockOperator::time_independent(lat, dg(|t| t * t)), o: BlockOperator::zeros(lat) };
        assert!(max_abs_op(&ad(&x, &v).unwrap().d) < 1e-14);
    }

    fn expm(a: &DMatrix<C64>) -> DMatrix<C64> {
        // Scaling and squaring with a long Taylor series.
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

    #[test]
    fn lie_series_matches_dense_expm() {
        let lat = Lattice::new(1, 1, 4).unwrap();
        let x = rand_pair(lat, 0.05, 0, 21);
        let v = rand_pair(lat, 1.0, 0, 22);
        let (res, diff) = lie_conjugate(&x, &v, 1e-15).unwrap();
        let fx = full(&x) * C64::new(0.0, 1.0);
        let want = expm(&fx) * full(&v) * expm(&(-fx));
        let got = full(&res);
        assert!(max_abs(&(want - got)) < 1e-9);
        assert!(max_abs_op(&diff.sub(&res.sub(&v).unwrap()).unwrap().d) < 1e-14);
        let (same, _) = lie_conjugate(&OperatorPair::zeros(lat), &v, 1e-15).unwrap();
        assert_eq!(same, v);
    }

    #[test]
    fn lie_series_detects_large_generator() {
        let lat = Lattice::new(1, 1, 4).unwrap();
        let x = rand_pair(lat, 20.0, 1, 1);
        let v = rand_pair(lat, 1.0, 1, 2);
        assert!(matches!(lie_conjugate(&x, &v, 1e-14), Err(Error::LieDivergence(_))));
    }

    #[test]
    fn projection_and_smoothing() {
        let lat = Lattice::new(1, 4, 3).unwrap();
        let a = rand_op(lat, 1.0, 4, 31);
        let (lo, hi) = a.project_modes(10.0);
        assert_eq!(lo, a);
        assert!(hi.is_zero());
        let (avg, _) = a.project_modes(0.0);
        assert_eq!(avg.support(), vec![lat.zero_ell()]);
        for b in [1.0, 2.0] {
            let (_, hi) = a.project_modes(2.0);
            assert!(hi.s_decay_norm(1.0) <= 2f64.powf(-b) * a.s_decay_norm(1.0 + b) + 1e-12);
        }
    }

    #[test]
    fn left_right_spectra() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let a = rmat(&mut rng, 2, 1.0);
            let a = (&a + a.adjoint()) * C64::new(0.5, 0.0);
            let b = rmat(&mut rng, 2, 1.0);
            let b = (&b + b.adjoint()) * C64::new(0.5, 0.0);
            let (ml, mr) = left_right_ops(&a, &b);
            let (sa, sb) = (hermitian_spectrum(&a), hermitian_spectrum(&b));
            for sign in [1.0, -1.0] {
                let g = &ml + &mr * C64::new(sign, 0.0);
                let got = hermitian_spectrum(&g);
                let mut want: Vec<f64> = sa.iter().flat_map(|x| sb.iter().map(move |y| x + sign * y)).collect();
                want.sort_by(f64::total_cmp);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12);
                }
            }
            let hs = a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            let op = ml.clone().singular_values().max();
            assert!(op <= hs + 1e-12);
        }
        let (ml, mr) = left_right_ops(&(DMatrix::identity(2, 2) * C64::new(2.0, 0.0)), &(DMatrix::identity(1, 1) * C64::new(0.5, 0.0)));
        assert!(max_abs(&(ml - mr - DMatrix::identity(2, 2) * C64::new(1.5, 0.0))) < 1e-15);
    }

    #[test]
    fn inverse_norms() {
        let g = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![C64::new(2.0, 0.0), C64::new(3.0, 0.0)]));
        assert!((block_inverse_norm(&g).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(block_inverse_norm(&DMatrix::identity(3, 3)).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rmat(&mut rng, 4, 1.0);
        let h = (&a + a.adjoint()) * C64::new(0.5, 0.0);
        let inv = h.clone().try_inverse().unwrap();
        let want = inv.singular_values().max();
        assert!((block_inverse_norm(&h).unwrap() - want).abs() < 1e-12 * want);
        assert!(block_inverse_norm(&DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn conj_and_adjoint_involutions() {
        let lat = Lattice::new(2, 1, 3).unwrap();
        let a = rand_op(lat, 1.0, 1, 51);
        assert_eq!(a.conj().conj(), a);
        assert_eq!(a.adjoint().adjoint(), a);
        let p = rand_pair(lat, 1.0, 1, 52);
        assert!(p.structure_defect() < 1e-15);
    }
}
