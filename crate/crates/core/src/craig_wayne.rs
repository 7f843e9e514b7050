//! Lyapunov-Schmidt localization of the eigenfunctions of L_q near e_{+-n},
//! the basis change between exponentials and the adapted eigenbasis, and the
//! embedding of exponential-basis operators into the block classes.
//!
//! Vectors here are spatial coefficient arrays over m in [-J, J] (index m + J).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harmonics::{jbracket, TorusFunction, C64};
use crate::opmatrix::{block_indices, BlockOperator, NormBundle, OperatorPair};
use crate::schrodinger::{RawSpectrum, SpectralData};

const ZERO: C64 = C64::new(0.0, 0.0);

/// sup_m sum_k <m>^{2s} / (<k>^{2s} <m-k>^{2s}).
pub fn c_s(s: f64) -> f64 {
    const K: i64 = 2000;
    let mut best = 0.0f64;
    for m in 0..=1024i64 {
        let bm = jbracket(m).powf(2.0 * s);
        let mut acc = 0.0;
        for k in -K..=m + K {
            acc += bm / (jbracket(k).powf(2.0 * s) * jbracket(m - k).powf(2.0 * s));
        }
        best = best.max(acc);
    }
    best
}

/// The constant of the T_n bound: 1.2 * sqrt(4 C_s).
pub fn c_tilde(s: f64) -> f64 {
    1.2 * 2.0 * c_s(s).sqrt()
}

/// (sum_m <m + j>^{2s} |u(m)|^2)^{1/2}.
pub fn shifted_norm_coeffs(u: &[C64], s: f64, j: i64) -> f64 {
    let jm = (u.len() / 2) as i64;
    u.iter()
        .enumerate()
        .map(|(k, c)| jbracket(k as i64 - jm + j).powf(2.0 * s) * c.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

pub fn shifted_norm(u: &TorusFunction, s: f64, j: i64) -> f64 {
    shifted_norm_coeffs(&u.spatial_coeffs(), s, j)
}

/// Data for one Lyapunov-Schmidt reduction at block n.
#[derive(Clone, Debug)]
pub struct LsContext {
    pub n: usize,
    pub s: f64,
    pub jmax: usize,
    /// Coefficients of q over |k| <= Jq.
    pub q: Vec<C64>,
    pub q_norm: f64,
    pub lambda: f64,
    pub c_tilde: f64,
    pub enforce: bool,
}

impl LsContext {
    /// Context with the admissibility gate |q|_s <= n / (2 C~_s).
    pub fn new(n: usize, s: f64, q: &TorusFunction, jmax: usize, c_tilde: f64) -> Result<Self> {
        if !q.is_real() {
            return Err(Error::ComplexPotential);
        }
        if n == 0 || n > jmax {
            return Err(Error::Lattice(format!("block n = {n} outside 1..={jmax}")));
        }
        let q_norm = q.sobolev_norm(s)?;
        Ok(Self { n, s, jmax, q: q.spatial_coeffs(), q_norm, lambda: (n * n) as f64, c_tilde, enforce: true })
    }

    /// Same context without the admissibility gate.
    pub fn unchecked(n: usize, s: f64, q: &TorusFunction, jmax: usize) -> Result<Self> {
        let mut c = Self::new(n, s, q, jmax, f64::INFINITY)?;
        c.enforce = false;
        Ok(c)
    }

    pub fn admissible(&self) -> bool {
        self.q_norm <= self.n as f64 / (2.0 * self.c_tilde)
    }

    fn check_admissible(&self) -> Result<()> {
        if self.enforce && !self.admissible() {
            return Err(Error::Admissibility { norm: self.q_norm, bound: self.n as f64 / (2.0 * self.c_tilde) });
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    /// Radius of D_n = {|mu - n^2| <= (2 C~_s / 3) |q|_s}.
    pub fn disc_radius(&self) -> f64 {
        2.0 * self.c_tilde / 3.0 * self.q_norm
    }

    fn dim(&self) -> usize {
        2 * self.jmax + 1
    }

    /// (q w)^(m) over |m| <= J.
    pub fn multiply_q(&self, w: &[C64]) -> Vec<C64> {
        let jm = self.jmax as i64;
        let qj = (self.q.len() / 2) as i64;
        let mut out = vec![ZERO; self.dim()];
        for (a, wa) in w.iter().enumerate() {
            if *wa == ZERO {
                continue;
            }
            let ma = a as i64 - jm;
            for (b, qb) in self.q.iter().enumerate() {
                let m = ma + b as i64 - qj;
                if m.abs() <= jm {
                    out[(m + jm) as usize] += qb * wa;
                }
            }
        }
        out
    }
}

/// (T_n w)^(m) = (lambda - m^2)^{-1} (q w)^(m) for |m| != n, zero at +-n.
pub fn apply_tn(w: &[C64], ctx: &LsContext) -> Result<Vec<C64>> {
    let n2 = (ctx.n * ctx.n) as f64;
    if (ctx.lambda - n2).abs() > ctx.n as f64 / 2.0 {
        return Err(Error::OutsideUn { n: ctx.n, lambda: ctx.lambda });
    }
    let jm = ctx.jmax as i64;
    let mut out = ctx.multiply_q(w);
    for (k, c) in out.iter_mut().enumerate() {
        let m = k as i64 - jm;
        if m.unsigned_abs() as usize == ctx.n {
            *c = ZERO;
        } else {
            *c /= ctx.lambda - (m * m) as f64;
        }
    }
    Ok(out)
}

fn l2(v: &[C64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Neumann series y = sum_{k >= 0} T^k x. Returns y and the number of terms.
fn neumann(x: &[C64], ctx: &LsContext, tol: f64) -> Result<(Vec<C64>, usize)> {
    let mut y = x.to_vec();
    let mut term = x.to_vec();
    let mut prev = l2(&term);
    for k in 1..=200 {
        term = apply_tn(&term, ctx)?;
        let tn = l2(&term);
        y.iter_mut().zip(&term).for_each(|(a, b)| *a += b);
        if tn <= tol * l2(&y).max(f64::MIN_POSITIVE) || tn == 0.0 {
            return Ok((y, k));
        }
        if k > 3 && tn >= prev {
            return Err(Error::NeumannDivergence(tn / prev));
        }
        prev = tn;
    }
    Err(Error::NeumannDivergence(1.0))
}

/// Solution of the Q-equation with its certificates.
#[derive(Clone, Debug)]
pub struct QSolution {
    pub v: Vec<C64>,
    pub terms: usize,
    pub residual: f64,
    /// |v|_{s;j} / (2 C~_s n^{-1} |q|_s |u|_{s;j}) at the shift j = -n.
    pub bound_ratio: f64,
}

/// v = sum_{k >= 1} T_n^k u for u in span{e_n, e_{-n}}.
pub fn solve_q_equation(u: &[C64], ctx: &LsContext, tol: f64) -> Result<QSolution> {
    ctx.check_admissible()?;
    let tu = apply_tn(u, ctx)?;
    let (v, terms) = neumann(&tu, ctx, tol)?;
    let tv = apply_tn(&v, ctx)?;
    let res: Vec<C64> = v.iter().zip(&tv).zip(&tu).map(|((a, b), c)| a - b - c).collect();
    let j = -(ctx.n as i64);
    let un = shifted_norm_coeffs(u, ctx.s, j);
    let bound = 2.0 * ctx.c_tilde / ctx.n as f64 * ctx.q_norm * un;
    let bound_ratio = if bound > 0.0 { shifted_norm_coeffs(&v, ctx.s, j) / bound } else { 0.0 };
    Ok(QSolution { v, terms, residual: l2(&res), bound_ratio })
}

fn unit(jmax: usize, m: i64) -> Vec<C64> {
    let mut v = vec![ZERO; 2 * jmax + 1];
    v[(m + jmax as i64) as usize] = C64::new(1.0, 0.0);
    v
}

/// K = [[a_{-n}, c_{-n}], [c_n, a_n]] with K_{j j'} = (V (Id - T_n)^{-1} e_{j'}, e_j).
/// S_n(lambda) = (lambda - n^2) Id - K.
#[derive(Clone, Debug, Serialize)]
pub struct SnMatrix {
    pub a_minus: C64,
    pub a_plus: C64,
    pub c_minus: C64,
    pub c_plus: C64,
    pub symmetry_defect: f64,
}

impl SnMatrix {
    pub fn k(&self) -> [[C64; 2]; 2] {
        [[self.a_minus, self.c_minus], [self.c_plus, self.a_plus]]
    }

    pub fn s_matrix(&self, lambda: f64, n: usize) -> [[C64; 2]; 2] {
        let d = C64::new(lambda - (n * n) as f64, 0.0);
        [[d - self.a_minus, -self.c_minus], [-self.c_plus, d - self.a_plus]]
    }
}

pub fn assemble_sn(ctx: &LsContext) -> Result<SnMatrix> {
    ctx.check_admissible()?;
    let jm = ctx.jmax as i64;
    let n = ctx.n as i64;
    let mut k = [[ZERO; 2]; 2];
    for (col, jp) in [-n, n].into_iter().enumerate() {
        let (w, _) = neumann(&unit(ctx.jmax, jp), ctx, 1e-16)?;
        let vw = ctx.multiply_q(&w);
        for (row, j) in [-n, n].into_iter().enumerate() {
            k[row][col] = vw[(j + jm) as usize];
        }
    }
    let defect = (k[0][0] - k[1][1]).norm().max((k[0][1] - k[1][0].conj()).norm());
    Ok(SnMatrix { a_minus: k[0][0], a_plus: k[1][1], c_minus: k[0][1], c_plus: k[1][0], symmetry_defect: defect })
}

/// Eigenvalues (ascending) and unit eigenvectors of a Hermitian 2x2 matrix.
fn eig2(k: [[C64; 2]; 2]) -> ([f64; 2], [[C64; 2]; 2]) {
    let a = k[0][0].re;
    let d = k[1][1].re;
    let b = (k[1][0] + k[0][1].conj()) * 0.5;
    let mid = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
    let vals = [mid - rad, mid + rad];
    let mut vecs = [[ZERO; 2]; 2];
    for (i, &lam) in vals.iter().enumerate() {
        // Rows of K - lam: (a - lam) x + conj(b) y = 0, b x + (d - lam) y = 0.
        let v1 = [b.conj(), C64::new(lam - a, 0.0)];
        let v2 = [C64::new(lam - d, 0.0), b];
        let (n1, n2) = ((v1[0].norm_sqr() + v1[1].norm_sqr()).sqrt(), (v2[0].norm_sqr() + v2[1].norm_sqr()).sqrt());
        vecs[i] = if n1.max(n2) < 1e-14 * (1.0 + a.abs() + d.abs()) {
            if i == 0 {
                [C64::new(1.0, 0.0), ZERO]
            } else {
                [ZERO, C64::new(1.0, 0.0)]
            }
        } else if n1 >= n2 {
            [v1[0] / n1, v1[1] / n1]
        } else {
            [v2[0] / n2, v2[1] / n2]
        };
    }
    (vals, vecs)
}

/// One localized eigenpair from the 2x2 reduction.
#[derive(Clone, Debug)]
pub struct LsEigenpair {
    pub n: usize,
    pub lambda: f64,
    pub f: Vec<C64>,
    /// (u(-n), u(n)).
    pub u: [C64; 2],
    pub residual: f64,
    pub iterations: usize,
}

fn branch_g(ctx: &LsContext, lam: f64, branch: usize) -> Result<(f64, [C64; 2])> {
    let c = ctx.with_lambda(lam);
    let sn = assemble_sn(&c)?;
    let (vals, vecs) = eig2(sn.k());
    Ok((lam - (ctx.n * ctx.n) as f64 - vals[branch], vecs[branch]))
}

/// Roots lambda_{n,-} <= lambda_{n,+} of det S_n and the eigenfunctions f = (Id - T_n)^{-1} u.
pub fn ls_block_eigenpairs(n: usize, q: &TorusFunction, s: f64, jmax: usize, c_tilde: f64) -> Result<[LsEigenpair; 2]> {
    let ctx = LsContext::new(n, s, q, jmax, c_tilde)?;
    ctx.check_admissible()?;
    ls_pairs_in(&ctx)
}

fn ls_pairs_in(ctx: &LsContext) -> Result<[LsEigenpair; 2]> {
    let n2 = (ctx.n * ctx.n) as f64;
    let tol = 1e-13 * n2.max(1.0);
    let mut out = Vec::with_capacity(2);
    for branch in 0..2 {
        // Fixed point lam = n^2 + eig(K(lam)) with secant acceleration.
        let mut x0 = n2;
        let (g0, _) = branch_g(ctx, x0, branch)?;
        let mut x1 = x0 - g0;
        let mut gprev = g0;
        let mut it = 0;
        let mut root = None;
        while it < 60 {
            it += 1;
            if (x1 - n2).abs() > ctx.n as f64 / 2.0 {
                break;
            }
            let (g1, _) = branch_g(ctx, x1, branch)?;
            if g1.abs() <= tol {
                root = Some(x1);
                break;
            }
            let slope = (g1 - gprev) / (x1 - x0);
            let step = if slope.is_finite() && slope > 0.1 { g1 / slope } else { g1 };
            x0 = x1;
            gprev = g1;
            x1 -= step;
            if (x1 - x0).abs() <= 1e-15 * n2.max(1.0) {
                root = Some(x1);
                break;
            }
        }
        let lam = match root {
            Some(r) => r,
            None => {
                // g is increasing on U_n: bisection.
                let (mut lo, mut hi) = (n2 - ctx.n as f64 / 2.0 + 1e-12, n2 + ctx.n as f64 / 2.0 - 1e-12);
                let (glo, _) = branch_g(ctx, lo, branch)?;
                let (ghi, _) = branch_g(ctx, hi, branch)?;
                if glo > 0.0 || ghi < 0.0 {
                    return Err(Error::RootEscape { n: ctx.n, detail: format!("no sign change on U_n (branch {branch})") });
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let (gm, _) = branch_g(ctx, mid, branch)?;
                    if gm < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    it += 1;
                    if hi - lo <= tol {
                        break;
                    }
                }
                0.5 * (lo + hi)
            }
        };
        if ctx.enforce && (lam - n2).abs() > ctx.disc_radius() {
            return Err(Error::RootEscape {
                n: ctx.n,
                detail: format!("|lambda - n^2| = {:.3e} > {:.3e}", (lam - n2).abs(), ctx.disc_radius()),
            });
        }
        let (_, u) = branch_g(ctx, lam, branch)?;
        let c = ctx.with_lambda(lam);
        let jm = ctx.jmax as i64;
        let n = ctx.n as i64;
        let mut uvec = vec![ZERO; 2 * ctx.jmax + 1];
        uvec[(-n + jm) as usize] = u[0];
        uvec[(n + jm) as usize] = u[1];
        let (f, _) = neumann(&uvec, &c, 1e-16)?;
        out.push(LsEigenpair { n: ctx.n, lambda: lam, residual: eigen_residual(&c, &f, lam), f, u, iterations: it });
    }
    let b = out.pop().unwrap();
    let a = out.pop().unwrap();
    Ok([a, b])
}

/// |L_q f - lambda f|_0 / |f|_0 on the truncated space.
pub fn eigen_residual(ctx: &LsContext, f: &[C64], lambda: f64) -> f64 {
    let jm = ctx.jmax as i64;
    let qf = ctx.multiply_q(f);
    let r: Vec<C64> = f
        .iter()
        .zip(&qf)
        .enumerate()
        .map(|(k, (fv, qv))| {
            let m = (k as i64 - jm) as f64;
            fv * (m * m - lambda) + qv
        })
        .collect();
    l2(&r) / l2(f)
}

/// max_m |(f, e_m)| <m-bracket(|m| - n)>^s for f with |P_n f| normalized to 1.
pub fn verify_localization(f: &[C64], n: usize, s: f64) -> f64 {
    let jm = (f.len() / 2) as i64;
    let pn = (f[(jm - n as i64) as usize].norm_sqr() + f[(jm + n as i64) as usize].norm_sqr()).sqrt();
    let scale = if pn > 0.0 { pn } else { 1.0 };
    f.iter()
        .enumerate()
        .map(|(k, c)| {
            let m = k as i64 - jm;
            c.norm() / scale * jbracket(m.abs() - n as i64).powf(s)
        })
        .fold(0.0, f64::max)
}

/// Least-squares decay rate sigma in |(f, e_m)| ~ C e^{-sigma ||m| - n|}.
pub fn exp_decay_fit(f: &[C64], n: usize) -> f64 {
    let jm = (f.len() / 2) as i64;
    let pts: Vec<(f64, f64)> = f
        .iter()
        .enumerate()
        .filter_map(|(k, c)| {
            let d = ((k as i64 - jm).abs() - n as i64).abs();
            (d > 0 && c.norm() > 1e-250).then(|| (d as f64, c.norm().ln()))
        })
        .collect();
    let k = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / k, sy / k);
    let (num, den) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + (p.0 - mx) * (p.1 - my), a.1 + (p.0 - mx).powi(2)));
    -num / den
}

/// Localization certificate row.
#[derive(Clone, Debug, Serialize)]
pub struct DecayRow {
    pub n: usize,
    pub s: f64,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    pub dense_minus: f64,
    pub dense_plus: f64,
    pub worst_ratio: f64,
    pub residual: f64,
    pub pass: bool,
}

/// Runs the LS reduction over every admissible n <= n_max and compares with a dense solve.
pub fn decay_certificates(q: &TorusFunction, s: f64, jmax: usize, n_max: usize, raw: &RawSpectrum) -> Result<Vec<DecayRow>> {
    let ct = c_tilde(s);
    let qn = q.sobolev_norm(s)?;
    let n_min = (2.0 * ct * qn).ceil().max(1.0) as usize;
    let mut rows = Vec::new();
    for n in n_min..=n_max {
        let pairs = ls_block_eigenpairs(n, q, s, jmax, ct)?;
        let worst = pairs.iter().map(|p| verify_localization(&p.f, n, s)).fold(0.0, f64::max);
        let res = pairs.iter().map(|p| p.residual).fold(0.0, f64::max);
        let dm = raw.values[raw.jmax - n];
        let dp = raw.values[raw.jmax + n];
        rows.push(DecayRow {
            n,
            s,
            lambda_minus: pairs[0].lambda,
            lambda_plus: pairs[1].lambda,
            dense_minus: dm,
            dense_plus: dp,
            worst_ratio: worst,
            residual: res,
            pass: worst <= 2.0 + 1e-8,
        });
    }
    Ok(rows)
}

/// Matrix of the basis change, M[n][m] = (psi_n, e_m), rows and columns at index + J.
#[derive(Clone, Debug)]
pub struct BasisMatrix {
    pub jmax: usize,
    pub m: DMatrix<C64>,
    /// Columns are psi_j in the exponential basis.
    pub psi: DMatrix<C64>,
}

pub fn build_basis_matrix(sd: &SpectralData) -> BasisMatrix {
    basis_from_psi(sd.jmax, &sd.psi)
}

pub fn basis_from_psi(jmax: usize, psi: &DMatrix<C64>) -> BasisMatrix {
    BasisMatrix { jmax, m: psi.transpose(), psi: psi.clone() }
}

impl BasisMatrix {
    /// M_[n]^[m] with rows (psi_{-n}, psi_n) and columns (e_{-m}, e_m).
    pub fn block(&self, n: usize, m: usize) -> DMatrix<C64> {
        let r = block_indices(self.jmax, n);
        let c = block_indices(self.jmax, m);
        DMatrix::from_fn(r.len(), c.len(), |a, b| self.m[(r[a], c[b])])
    }

    /// max |M M* - Id|.
    pub fn unitarity_defect(&self) -> f64 {
        let d = self.m.nrows();
        crate::opmatrix::max_abs(&(&self.m * self.m.adjoint() - DMatrix::<C64>::identity(d, d)))
    }

    /// |M|_{s;M}^2 = sum_h <h>^{2s} sup_{|n - m| = h} |M_[n]^[m]|_HS^2.
    pub fn decay_norm(&self, s: f64) -> f64 {
        Self::norm_of(&self.m, self.jmax, s)
    }

    pub fn transpose_decay_norm(&self, s: f64) -> f64 {
        Self::norm_of(&self.m.transpose(), self.jmax, s)
    }

    fn norm_of(m: &DMatrix<C64>, jmax: usize, s: f64) -> f64 {
        let mut sup = vec![0.0f64; jmax + 1];
        for n in 0..=jmax {
            let r = block_indices(jmax, n);
            for k in 0..=jmax {
                let c = block_indices(jmax, k);
                let hs: f64 = r.iter().flat_map(|&a| c.iter().map(move |&b| (a, b))).map(|(a, b)| m[(a, b)].norm_sqr()).sum();
                let h = n.abs_diff(k);
                sup[h] = sup[h].max(hs);
            }
        }
        sup.iter().enumerate().map(|(h, v)| jbracket(h as i64).powf(2.0 * s) * v).sum::<f64>().sqrt()
    }
}

/// A' = Psi^dagger A Psi per angle mode: exponential basis to the adapted eigenbasis.
pub fn change_basis(a: &BlockOperator, basis: &BasisMatrix) -> Result<BlockOperator> {
    conjugate_modes(a, basis, true)
}

/// Inverse of [`change_basis`].
pub fn change_basis_back(a: &BlockOperator, basis: &BasisMatrix) -> Result<BlockOperator> {
    conjugate_modes(a, basis, false)
}

fn conjugate_modes(a: &BlockOperator, basis: &BasisMatrix, forward: bool) -> Result<BlockOperator> {
    if a.lattice().j != basis.jmax {
        return Err(Error::CutoffMismatch(format!("operator J = {} but basis J = {}", a.lattice().j, basis.jmax)));
    }
    let psi = &basis.psi;
    let psi_h = psi.adjoint();
    let mut out = BlockOperator::zeros(*a.lattice());
    for e in a.support() {
        let m = a.get(e).unwrap();
        let c = if forward { &psi_h * m * psi } else { psi * m * &psi_h };
        out.set(e, c);
    }
    Ok(out)
}

/// Regularity loss N - s with N = max(floor(s + s0 + 2 - max|a_i|), floor(s) + 1).
pub fn sigma_m(s: f64, s0: f64, a1: f64, a2: f64) -> (usize, f64) {
    let n = ((s + s0 + 2.0 - a1.abs().max(a2.abs())).floor() as i64).max(s.floor() as i64 + 1) as usize;
    (n, n as f64 - s)
}

/// Change basis of an exponential-basis pair, check the structure and measure its class norms.
pub fn embed_pair(
    ad: &BlockOperator,
    ao: &BlockOperator,
    basis: &BasisMatrix,
    s: f64,
    alpha: f64,
    beta: f64,
) -> Result<(OperatorPair, NormBundle)> {
    let exp_pair = OperatorPair::new(ad.clone(), ao.clone())?;
    let scale = crate::opmatrix::max_abs_op(ad).max(crate::opmatrix::max_abs_op(ao)).max(1.0);
    let defect = exp_pair.structure_defect();
    if defect > 1e-10 * scale {
        return Err(Error::Structure(format!("[Ad]* = Ad, [Ao]* = conj Ao violated by {defect:.3e}")));
    }
    let pair = OperatorPair::new(change_basis(ad, basis)?, change_basis(ao, basis)?)?;
    let bundle = pair.norm_bundle(s, alpha, beta);
    Ok((pair, bundle))
}

/// Dense matrix of T_n on the truncated space (test oracle and small problems).
pub fn tn_matrix(ctx: &LsContext) -> DMatrix<C64> {
    let d = 2 * ctx.jmax + 1;
    let mut t = DMatrix::zeros(d, d);
    for c in 0..d {
        let mut e = vec![ZERO; d];
        e[c] = C64::new(1.0, 0.0);
        let col = apply_tn(&e, ctx).expect("lambda checked by caller");
        t.set_column(c, &DVector::from_vec(col));
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials;
    use crate::schrodinger::{assemble_lq, eigensolve_raw, spectrum};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rvec(rng: &mut ChaCha8Rng, d: usize) -> Vec<C64> {
        (0..d).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn shifted_norm_identities() {
        let q = potentials::smooth_random(1, 6, 2.0, 1.0, 4);
        let u = q.spatial_coeffs();
        assert!((shifted_norm(&q, 2.0, 0) - q.sobolev_norm(2.0).unwrap()).abs() < 1e-12);
        let mut e3 = vec![ZERO; 13];
        e3[6 + 3] = C64::new(1.0, 0.0);
        assert!((shifted_norm_coeffs(&e3, 2.5, 0) - 3f64.powf(2.5)).abs() < 1e-12);
        // |u|_{s;5} = |u e_5|_s with the product taken on a lattice wide enough to hold the shift.
        let mut wide = vec![ZERO; 2 * 12 + 1];
        for (k, c) in u.iter().enumerate() {
            wide[k + 6 + 5] = *c;
        }
        let shifted = TorusFunction::spatial(1, &wide).unwrap();
        assert!((shifted_norm(&q, 3.0, 5) - shifted.sobolev_norm(3.0).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn tn_examples() {
        let zero = potentials::constant(1, 0.0, 2);
        let ctx = LsContext::unchecked(10, 4.0, &zero, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(apply_tn(&rvec(&mut rng, 41), &ctx).unwrap().iter().all(|c| *c == ZERO));
        // q = e_1 + e_{-1}, w = e_{n+2}, lambda = n^2.
        let q = potentials::cosine(1, 2.0, 0.0, 2);
        let n = 7usize;
        let ctx = LsContext::unchecked(n, 4.0, &q, 20).unwrap();
        let w = unit(20, n as i64 + 2);
        let t = apply_tn(&w, &ctx).unwrap();
        let n2 = (n * n) as f64;
        for (k, c) in t.iter().enumerate() {
            let m = k as i64 - 20;
            let want = if m == n as i64 + 1 {
                1.0 / (n2 - ((n + 1) * (n + 1)) as f64)
            } else if m == n as i64 + 3 {
                1.0 / (n2 - ((n + 3) * (n + 3)) as f64)
            } else {
                0.0
            };
            assert!((c.re - want).abs() < 1e-15 && c.im == 0.0, "m = {m}");
        }
        assert!(matches!(apply_tn(&w, &ctx.with_lambda(n2 + 4.0)), Err(Error::OutsideUn { .. })));
    }

    #[test]
    fn tn_bound_on_random_inputs() {
        let s = 2.0;
        let ct = c_tilde(s);
        let q = potentials::smooth_random(1, 6, 3.0, 1.0, 9);
        let qn = q.sobolev_norm(s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..100 {
            let n = rng.gen_range(3..30usize);
            let lam = (n * n) as f64 + rng.gen_range(-0.5..0.5) * n as f64;
            let ctx = LsContext::unchecked(n, s, &q, 40).unwrap().with_lambda(lam);
            let mut w = rvec(&mut rng, 81);
            w[40 - n] = ZERO;
            w[40 + n] = ZERO;
            let j = rng.gen_range(-20..=20i64);
            let lhs = shifted_norm_coeffs(&apply_tn(&w, &ctx).unwrap(), s, j);
            let rhs = ct / n as f64 * qn * shifted_norm_coeffs(&w, s, j);
            assert!(lhs <= rhs, "trial {trial}: {lhs} > {rhs}");
        }
    }

    #[test]
    fn q_equation_oracles() {
        let zero = potentials::constant(1, 0.0, 2);
        let ctx = LsContext::new(10, 4.0, &zero, 30, c_tilde(4.0)).unwrap();
        let u = unit(30, 10);
        assert!(solve_q_equation(&u, &ctx, 1e-15).unwrap().v.iter().all(|c| *c == ZERO));

        let q = potentials::smooth_random(1, 4, 3.0, 0.01, 5);
        let ctx = LsContext::new(10, 4.0, &q, 30, c_tilde(4.0)).unwrap().with_lambda(101.0);
        let mut u = unit(30, 10);
        u[20] = C64::new(0.3, -0.2);
        let sol = solve_q_equation(&u, &ctx, 1e-15).unwrap();
        assert!(sol.residual <= 1e-14);
        assert!(sol.bound_ratio <= 1.0);
        // First-order agreement with T u.
        let tu = apply_tn(&u, &ctx).unwrap();
        let diff: Vec<C64> = sol.v.iter().zip(&tu).map(|(a, b)| a - b).collect();
        let tnorm = c_tilde(4.0) / 10.0 * q.sobolev_norm(4.0).unwrap();
        assert!(l2(&diff) <= tnorm * tnorm * l2(&u));
        // Dense solve of (Id - T) v = T u.
        let t = tn_matrix(&ctx);
        let a = DMatrix::<C64>::identity(61, 61) - &t;
        let rhs = DVector::from_vec(tu.clone());
        let v = a.lu().solve(&rhs).unwrap();
        assert!(v.iter().zip(&sol.v).all(|(x, y)| (x - y).norm() < 1e-10));
    }

    #[test]
    fn sn_examples() {
        let c = potentials::constant(1, 0.05, 2);
        let ctx = LsContext::new(5, 4.0, &c, 20, c_tilde(4.0)).unwrap();
        let sn = assemble_sn(&ctx).unwrap();
        assert!((sn.a_plus - C64::new(0.05, 0.0)).norm() < 1e-15);
        assert!(sn.c_plus.norm() < 1e-15);

        // q = 2 cos(2 n x): c_n = q^(2n) = 1 to first order.
        let n = 6usize;
        let mut qc = vec![ZERO; 4 * n + 1];
        qc[0] = C64::new(1.0, 0.0);
        qc[4 * n] = C64::new(1.0, 0.0);
        let q = TorusFunction::spatial(1, &qc).unwrap();
        let ctx = LsContext::unchecked(n, 4.0, &q, 40).unwrap();
        let sn = assemble_sn(&ctx).unwrap();
        assert!((sn.c_plus - C64::new(1.0, 0.0)).norm() < 2.0 / n as f64);

        let q = potentials::smooth_random(1, 5, 3.0, 0.1, 17);
        let ctx = LsContext::new(12, 4.0, &q, 40, c_tilde(4.0)).unwrap().with_lambda(145.0);
        assert!(assemble_sn(&ctx).unwrap().symmetry_defect < 1e-12);
    }

    #[test]
    fn ls_matches_dense_for_cosine() {
        let q = potentials::cosine(1, 2.0, 0.0, 2);
        let raw = eigensolve_raw(&assemble_lq(&q, 64).unwrap());
        let n = 8;
        let pairs = LsContext::unchecked(n, 4.0, &q, 64).and_then(|c| ls_pairs_in(&c)).unwrap();
        assert!((pairs[0].lambda - raw.values[64 - n]).abs() < 1e-8);
        assert!((pairs[1].lambda - raw.values[64 + n]).abs() < 1e-8);
        for p in &pairs {
            assert!(p.residual < 1e-8);
        }
    }

    #[test]
    fn constant_potential_pairs() {
        let q = potentials::constant(1, 0.04, 2);
        let pairs = ls_block_eigenpairs(4, &q, 4.0, 16, c_tilde(4.0)).unwrap();
        for p in &pairs {
            assert!((p.lambda - 16.04).abs() < 1e-12);
            assert!((p.f.iter().map(|c| c.norm_sqr()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((pairs[0].f[16 - 4].norm() - 1.0).abs() < 1e-12);
        assert!((pairs[1].f[16 + 4].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn localization_for_cosine() {
        let q = potentials::cosine(1, 1.0, 0.0, 2);
        let ct = c_tilde(4.0);
        let qn = q.sobolev_norm(4.0).unwrap();
        let n = (2.0 * ct * qn).ceil() as usize;
        let pairs = ls_block_eigenpairs(n, &q, 4.0, 64, ct).unwrap();
        for p in &pairs {
            assert!(verify_localization(&p.f, n, 4.0) <= 2.0 + 1e-8);
            assert!(exp_decay_fit(&p.f, n) > 0.5);
        }
        assert!(ls_block_eigenpairs(2, &q, 4.0, 64, ct).is_err());
        let mut e = unit(20, 5);
        e[25] = C64::new(1.0, 0.0);
        assert!(verify_localization(&e, 5, 4.0) <= 1.0);
    }

    #[test]
    fn basis_matrix_properties() {
        let free = build_basis_matrix(&spectrum(&potentials::constant(1, 1.0, 2), 8).unwrap());
        assert!(crate::opmatrix::max_abs(&(&free.m - DMatrix::<C64>::identity(17, 17))) < 1e-12);
        let q = potentials::cosine(1, 2.0, 2.5, 2);
        let b64 = build_basis_matrix(&spectrum(&q, 64).unwrap());
        let b128 = build_basis_matrix(&spectrum(&q, 128).unwrap());
        assert!(b64.unitarity_defect() < 1e-10);
        let (n64, n128) = (b64.decay_norm(4.0), b128.decay_norm(4.0));
        assert!((n64 - n128).abs() <= 0.01 * n128);
        assert!((b64.decay_norm(4.0) - b64.transpose_decay_norm(4.0)).abs() < 1e-10 * n64);
    }

    #[test]
    fn change_basis_round_trip_and_action() {
        let q = potentials::cosine(1, 1.0, 1.5, 2);
        let sd = spectrum(&q, 10).unwrap();
        let basis = build_basis_matrix(&sd);
        let lat = crate::harmonics::Lattice::new(1, 2, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = BlockOperator::zeros(lat);
        for e in 0..lat.n_ell() {
            a.set(e, DMatrix::from_fn(21, 21, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))));
        }
        let back = change_basis_back(&change_basis(&a, &basis).unwrap(), &basis).unwrap();
        assert!(crate::opmatrix::max_abs_op(&back.sub(&a).unwrap()) < 1e-10);
        let id = BlockOperator::identity(lat);
        assert!(crate::opmatrix::max_abs_op(&change_basis(&id, &basis).unwrap().sub(&id).unwrap()) < 1e-12);
        // Coordinates: (change_basis A) (Psi^dagger u) = Psi^dagger (A u).
        let u = DVector::from_vec(rvec(&mut rng, 21));
        let a0 = a.mode(lat.zero_ell());
        let lhs = change_basis(&a, &basis).unwrap().mode(lat.zero_ell()) * (basis.psi.adjoint() * &u);
        let rhs = basis.psi.adjoint() * (a0 * &u);
        assert!((lhs - rhs).iter().all(|c| c.norm() < 1e-10));
    }

    #[test]
    fn duality_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let f = rvec(&mut rng, 31);
            let g = rvec(&mut rng, 31);
            let j = rng.gen_range(-10..=10i64);
            let ip: C64 = f.iter().zip(&g).map(|(a, b)| a * b.conj()).sum();
            assert!(ip.norm() <= shifted_norm_coeffs(&f, 2.0, j) * shifted_norm_coeffs(&g, -2.0, j) + 1e-12);
        }
    }

    #[test]
    fn sigma_m_choice() {
        assert_eq!(sigma_m(4.0, 3.0, 1.0, 0.0), (8, 4.0));
        assert_eq!(sigma_m(1.5, 3.0, 5.0, 0.0), (2, 0.5));
    }

    #[test]
    fn c_tilde_value() {
        // The supremum sits at m = 2, where k = 1 contributes 2^8.
        let oracle: f64 = (-100_000i64..=100_000)
            .map(|k| 256.0 / (jbracket(k).powi(8) * jbracket(2 - k).powi(8)))
            .sum();
        assert!((c_s(4.0) - oracle).abs() < 1e-9 * oracle);
        assert!((c_tilde(4.0) - 2.4 * oracle.sqrt()).abs() < 1e-9);
    }
}
