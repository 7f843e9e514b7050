//! KAM reducibility on the adapted eigenbasis: blockwise homological
//! equations, Lie-series conjugation and the block-diagonal normal form.
//!
//! The Hamiltonian at step p is H0^(p) + V^(p), with H0^(p) a block-diagonal
//! matrix standing for the pair (H0, 0), i.e. [[H0, 0], [0, -conj H0]], and
//! V^(p) an [`OperatorPair`]. One step conjugates with Phi_p = exp(-i X^(p)).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::craig_wayne::{embed_pair, BasisMatrix};
use crate::error::{Error, Result};
use crate::harmonics::{dot, ell_norm, jbracket, Lattice, C64};
use crate::magnus::MagnusOperators;
use crate::opmatrix::{ad, block_indices, left_right_ops, lie_conjugate, lie_series, max_abs, BlockOperator, NormBundle, OperatorPair};
use crate::psdo::Cutoff;
use crate::schrodinger::SpectralData;

const I: C64 = C64::new(0.0, 1.0);

/// Parameters of the iteration; every derived constant is recomputed from (tau, N0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KamParameters {
    pub tau: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub n0: f64,
    pub p_max: usize,
    /// Stop once delta_{s0} drops below this floor.
    pub delta_floor: f64,
    pub lie_tol: f64,
    pub cutoff: Cutoff,
    /// Carry a twin run at a nearby frequency for the Lipschitz parts of delta.
    pub lipschitz: bool,
    pub calibration: Calibration,
}

impl Default for KamParameters {
    fn default() -> Self {
        Self {
            tau: 3.0,
            gamma: 0.1,
            alpha: 0.5,
            n0: 16.0,
            p_max: 8,
            delta_floor: 1e-14,
            lie_tol: 1e-16,
            cutoff: Cutoff::Exp,
            lipschitz: true,
            calibration: Calibration::default(),
        }
    }
}

impl KamParameters {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha = {} must lie in (0, 1)", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma = {} must lie in (0, 1)", self.gamma)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau = {} must be positive", self.tau)));
        }
        if !(self.n0 >= 1.0) {
            return Err(Error::Config(format!("N0 = {} must be at least 1", self.n0)));
        }
        Ok(())
    }

    pub fn chi(&self) -> f64 {
        1.5
    }

    pub fn rho(&self) -> f64 {
        6.0 * self.tau + 4.0
    }

    pub fn beta(&self) -> f64 {
        self.rho() + 1.0
    }

    pub fn lambda(&self) -> f64 {
        2.0 * self.tau + 2.0 + self.rho()
    }

    /// Sigma = sigma0 + sigma_M + beta.
    pub fn sigma_total(&self, sigma0: f64, sigma_m: f64) -> f64 {
        sigma0 + sigma_m + self.beta()
    }

    /// N_p = N0^{chi^p}, N_{-1} = 1.
    pub fn n_p(&self, p: i64) -> f64 {
        if p < 0 {
            1.0
        } else {
            self.n0.powf(self.chi().powi(p as i32))
        }
    }

    /// Lipschitz weight gamma / M^alpha.
    pub fn weight(&self, m: f64) -> f64 {
        self.gamma / m.powf(self.alpha)
    }
}

/// One frequency of the iteration: omega, H0^(p) and V^(p).
#[derive(Clone, Debug)]
pub struct Branch {
    pub omega: Vec<f64>,
    pub h0: DMatrix<C64>,
    pub v: OperatorPair,
}

/// Sup part, Lipschitz quotient and weighted total of a norm.
#[derive(Clone, Copy, Debug, Default, Serialize, PartialEq)]
pub struct Delta {
    pub sup: f64,
    pub lip: f64,
    pub total: f64,
}

/// Per-step diagnostics.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub p: usize,
    pub n_p: f64,
    pub delta_s0: Delta,
    pub delta_s0_beta: Delta,
    /// |X^(p-1)|_{s0, alpha, alpha} of the generator that produced this step (0 at p = 0).
    pub x_norm: f64,
    /// |X|_{s0,alpha,alpha} / (N^{2 tau + 1} (M^alpha / gamma) delta_{s0}) for that generator.
    pub x_bound_ratio: f64,
    /// sup_n <n>^alpha |H0^(p)_[n] - H0^(0)_[n]|_HS.
    pub drift: Delta,
    /// sup_n <n>^alpha |H0^(p)_[n] - H0^(p-1)_[n]|_HS.
    pub drift_step: Delta,
    pub h0_adjoint_defect: f64,
    pub structure_defect: f64,
    /// Max entry of i[X, H0] - omega.d_phi X + Pi_N V - Z on blocks where the cutoff is one.
    pub homological_residual: f64,
    pub cut_blocks: usize,
    /// delta^(p)_{s0} / (delta^(p-1)_{s0+beta} N_{p-1}^{-beta} + N_{p-1}^{2 tau + 1} (M^alpha / gamma) delta^(p-1)_{s0}^2).
    pub nash_moser_ratio: f64,
}

/// Initialization certificate.
#[derive(Clone, Debug, Serialize)]
pub struct InitialReport {
    pub embedding: NormBundle,
    /// delta^(0)_{s0} gamma0 M, to be compared with C_s.
    pub scaled_delta: f64,
    pub m_sq: f64,
}

/// KAM state at step p.
#[derive(Clone, Debug)]
pub struct KamState {
    pub p: usize,
    pub lattice: Lattice,
    pub m: f64,
    pub gamma0: f64,
    pub m_sq: f64,
    pub main: Branch,
    pub twin: Option<Branch>,
    pub h0_initial: DMatrix<C64>,
    pub twin_h0_initial: Option<DMatrix<C64>>,
    pub generators: Vec<OperatorPair>,
    pub history: Vec<StepRecord>,
    pub initial: Option<InitialReport>,
}

/// Sign of the Melnikov combination mu_n +- mu_n'.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Sign {
    Minus,
    Plus,
}

impl Sign {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Sign::Minus => a - b,
            Sign::Plus => a + b,
        }
    }

    fn combine(self, n: usize, np: usize) -> i64 {
        match self {
            Sign::Minus => n as i64 - np as i64,
            Sign::Plus => (n + np) as i64,
        }
    }
}

/// out[r][c] = conj(m[d-1-r][d-1-c]): complex conjugation in a conjugation-adapted basis.
pub fn conj_matrix(m: &DMatrix<C64>) -> DMatrix<C64> {
    let (r, c) = m.shape();
    DMatrix::from_fn(r, c, |a, b| m[(r - 1 - a, c - 1 - b)].conj())
}

/// The [n]-block of a (2J+1)-square matrix.
pub fn extract_block(m: &DMatrix<C64>, jmax: usize, n: usize, np: usize) -> DMatrix<C64> {
    let r = block_indices(jmax, n);
    let c = block_indices(jmax, np);
    DMatrix::from_fn(r.len(), c.len(), |a, b| m[(r[a], c[b])])
}

fn place_block(m: &mut DMatrix<C64>, jmax: usize, n: usize, b: &DMatrix<C64>) {
    let r = block_indices(jmax, n);
    for (a, &ra) in r.iter().enumerate() {
        for (c, &rc) in r.iter().enumerate() {
            m[(ra, rc)] = b[(a, c)];
        }
    }
}

fn hermitize(b: &DMatrix<C64>) -> DMatrix<C64> {
    (b + b.adjoint()) * C64::new(0.5, 0.0)
}

/// Block-diagonal part of a matrix, with each block made exactly Hermitian.
pub fn block_diagonal(m: &DMatrix<C64>, jmax: usize) -> DMatrix<C64> {
    let d = 2 * jmax + 1;
    let mut out = DMatrix::zeros(d, d);
    for n in 0..=jmax {
        place_block(&mut out, jmax, n, &hermitize(&extract_block(m, jmax, n, n)));
    }
    out
}

/// H0^(0): the blocks of B = L_q^{1/2} in the adapted basis.
pub fn h0_from_spectrum(sd: &SpectralData) -> DMatrix<C64> {
    block_diagonal(&sd.spectral_power_psi(0.5), sd.jmax)
}

/// G = omega.l 1 + M_L(a) +- M_R(b) on the block space, column-major vec.
pub fn build_g(omega_l: f64, a: &DMatrix<C64>, b: &DMatrix<C64>, sign: Sign) -> DMatrix<C64> {
    let (ml, mr) = left_right_ops(a, b);
    let k = ml.nrows();
    let id = DMatrix::<C64>::identity(k, k) * C64::new(omega_l, 0.0);
    match sign {
        Sign::Minus => id + ml - mr,
        Sign::Plus => id + ml + mr,
    }
}

/// sup_n <n>^alpha |A_[n] - B_[n]|_HS over block-diagonal matrices.
pub fn weighted_block_drift(a: &DMatrix<C64>, b: &DMatrix<C64>, jmax: usize, alpha: f64) -> f64 {
    (0..=jmax)
        .map(|n| {
            let diff = extract_block(a, jmax, n, n) - extract_block(b, jmax, n, n);
            jbracket(n as i64).powf(alpha) * diff.norm()
        })
        .fold(0.0, f64::max)
}

fn h0_pair(lat: Lattice, h0: &DMatrix<C64>) -> OperatorPair {
    OperatorPair { d: BlockOperator::time_independent(lat, h0.clone()), o: BlockOperator::zeros(lat) }
}

fn omega_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl KamState {
    /// State from explicit parts (H0 block-diagonal in the adapted basis).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        lattice: Lattice,
        m: f64,
        gamma0: f64,
        m_sq: f64,
        main: Branch,
        twin: Option<Branch>,
        params: &KamParameters,
    ) -> Result<Self> {
        params.validate()?;
        let d = lattice.n_space();
        for b in std::iter::once(&main).chain(twin.as_ref()) {
            if b.h0.shape() != (d, d) || b.v.lattice() != &lattice || b.omega.len() != lattice.nu {
                return Err(Error::CutoffMismatch("KAM branch does not match the lattice".into()));
            }
        }
        let mut main = main;
        main.h0 = block_diagonal(&main.h0, lattice.j);
        let twin = twin.map(|mut t| {
            t.h0 = block_diagonal(&t.h0, lattice.j);
            t
        });
        let mut st = Self {
            p: 0,
            lattice,
            m,
            gamma0,
            m_sq,
            h0_initial: main.h0.clone(),
            twin_h0_initial: twin.as_ref().map(|t| t.h0.clone()),
            main,
            twin,
            generators: Vec::new(),
            history: Vec::new(),
            initial: None,
        };
        let rec = st.record(params, None, 0.0, 0.0, 0.0, 0, f64::NAN);
        st.history.push(rec);
        Ok(st)
    }

    pub fn s0(&self) -> f64 {
        self.lattice.s0()
    }

    pub fn h0_block(&self, n: usize) -> DMatrix<C64> {
        extract_block(&self.main.h0, self.lattice.j, n, n)
    }

    /// Eigenvalues of every H0 block, ascending within each block.
    pub fn block_eigenvalues(&self) -> Vec<Vec<f64>> {
        block_eigenvalues(&self.main.h0, self.lattice.j)
    }

    /// G^{+-}_{l,n,n'} for the current H0; the right factor of G^+ is conj H0.
    pub fn g_operator(&self, ell: &[i64], n: usize, np: usize, sign: Sign) -> DMatrix<C64> {
        let a = self.h0_block(n);
        let b = match sign {
            Sign::Minus => self.h0_block(np),
            Sign::Plus => extract_block(&conj_matrix(&self.main.h0), self.lattice.j, np, np),
        };
        build_g(dot(&self.main.omega, ell), &a, &b, sign)
    }

    /// delta_s = |V|_{s,alpha,0} + w |Delta V|_{s-1,alpha,0} / |Delta omega|.
    pub fn delta(&self, s: f64, params: &KamParameters) -> Delta {
        let sup = self.main.v.pair_norm(s, params.alpha, 0.0);
        let lip = match &self.twin {
            Some(t) => {
                let dv = self.main.v.sub(&t.v).expect("same lattice");
                dv.pair_norm(s - 1.0, params.alpha, 0.0) / omega_distance(&self.main.omega, &t.omega)
            }
            None => 0.0,
        };
        Delta { sup, lip, total: sup + params.weight(self.m) * lip }
    }

    fn drift_delta(&self, a: &DMatrix<C64>, b: &DMatrix<C64>, ta: Option<(&DMatrix<C64>, &DMatrix<C64>)>, params: &KamParameters) -> Delta {
        let j = self.lattice.j;
        let sup = weighted_block_drift(a, b, j, params.alpha);
        let lip = match (ta, &self.twin) {
            (Some((ta, tb)), Some(t)) => {
                let da = a - b;
                let db = ta - tb;
                weighted_block_drift(&da, &db, j, params.alpha) / omega_distance(&self.main.omega, &t.omega)
            }
            _ => 0.0,
        };
        Delta { sup, lip, total: sup + params.weight(self.m) * lip }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        params: &KamParameters,
        prev: Option<(&StepRecord, &DMatrix<C64>, Option<&DMatrix<C64>>)>,
        x_norm: f64,
        x_bound_ratio: f64,
        hom_res: f64,
        cut_blocks: usize,
        nash: f64,
    ) -> StepRecord {
        let s0 = self.s0();
        let twin_init = self.twin_h0_initial.as_ref().zip(self.twin.as_ref()).map(|(i, t)| (&t.h0, i));
        let drift = self.drift_delta(&self.main.h0, &self.h0_initial, twin_init, params);
        let drift_step = match prev {
            Some((_, h_prev, t_prev)) => {
                let tw = self.twin.as_ref().zip(t_prev).map(|(t, tp)| (&t.h0, tp));
                self.drift_delta(&self.main.h0, h_prev, tw, params)
            }
            None => Delta::default(),
        };
        let h0_adjoint_defect = max_abs(&(&self.main.h0 - self.main.h0.adjoint()));
        StepRecord {
            p: self.p,
            n_p: params.n_p(self.p as i64),
            delta_s0: self.delta(s0, params),
            delta_s0_beta: self.delta(s0 + params.beta(), params),
            x_norm,
            x_bound_ratio,
            drift,
            drift_step,
            h0_adjoint_defect,
            structure_defect: self.main.v.structure_defect(),
            homological_residual: hom_res,
            cut_blocks,
            nash_moser_ratio: nash,
        }
    }

    pub fn last(&self) -> &StepRecord {
        self.history.last().expect("history starts at p = 0")
    }

    /// Dense 2d x 2d frame Phi_0(phi) ... Phi_{p-1}(phi), Phi_k = exp(-i X^(k)(phi)).
    pub fn frame_at(&self, phi: &[f64], upto: usize) -> DMatrix<C64> {
        let d = self.lattice.n_space();
        let mut f = DMatrix::<C64>::identity(2 * d, 2 * d);
        for x in self.generators.iter().take(upto) {
            f *= (pair_at(x, phi) * (-I)).exp();
        }
        f
    }
}

/// Ascending eigenvalues of each Hermitian block.
pub fn block_eigenvalues(h0: &DMatrix<C64>, jmax: usize) -> Vec<Vec<f64>> {
    (0..=jmax).map(|n| crate::opmatrix::hermitian_spectrum(&extract_block(h0, jmax, n, n))).collect()
}

/// [[A^d, A^o], [-conj A^o, -conj A^d]] at the angle phi.
pub fn pair_at(a: &OperatorPair, phi: &[f64]) -> DMatrix<C64> {
    let d = a.lattice().n_space();
    let mut m = DMatrix::zeros(2 * d, 2 * d);
    m.view_mut((0, 0), (d, d)).copy_from(&a.d.at_angle(phi));
    m.view_mut((0, d), (d, d)).copy_from(&a.o.at_angle(phi));
    m.view_mut((d, 0), (d, d)).copy_from(&(-a.o.conj().at_angle(phi)));
    m.view_mut((d, d), (d, d)).copy_from(&(-a.d.conj().at_angle(phi)));
    m
}

/// Build the KAM state from the Magnus output at omega (and optionally at a partner frequency).
pub fn init_state(
    ops: &MagnusOperators,
    sd: &SpectralData,
    basis: &BasisMatrix,
    gamma0: f64,
    m: f64,
    twin: Option<&MagnusOperators>,
    params: &KamParameters,
) -> Result<KamState> {
    let lat = ops.lattice;
    if sd.jmax != lat.j || basis.jmax != lat.j {
        return Err(Error::CutoffMismatch("spectral data, basis and lattice disagree on J".into()));
    }
    let h0 = h0_from_spectrum(sd);
    let embed = |o: &MagnusOperators| -> Result<(OperatorPair, NormBundle)> {
        let vd = o.vd.add(&o.homological_residual)?;
        let vo = o.vo.add(&o.homological_residual)?;
        embed_pair(&vd, &vo, basis, lat.s0(), params.alpha, 0.0)
    };
    let (v, bundle) = embed(ops)?;
    let main = Branch { omega: ops.omega.clone(), h0: h0.clone(), v };
    let twin = match twin {
        Some(t) => {
            if t.lattice != lat {
                return Err(Error::CutoffMismatch("twin Magnus run on a different lattice".into()));
            }
            if omega_distance(&t.omega, &ops.omega) == 0.0 {
                return Err(Error::FrequencyMismatch);
            }
            Some(Branch { omega: t.omega.clone(), h0: h0.clone(), v: embed(t)?.0 })
        }
        None => None,
    };
    let mut st = KamState::from_parts(lat, m, gamma0, sd.m_sq, main, twin, params)?;
    let scaled = st.history[0].delta_s0.total * gamma0 * m;
    st.initial = Some(InitialReport { embedding: bundle, scaled_delta: scaled, m_sq: sd.m_sq });
    Ok(st)
}

/// Magnus operators at omega and the initial KAM state (with the Lipschitz twin if requested).
#[allow(clippy::too_many_arguments)]
pub fn setup(
    sd: &SpectralData,
    basis: &BasisMatrix,
    v: &crate::harmonics::TorusFunction,
    lat: Lattice,
    omega: &[f64],
    m: f64,
    gamma0: f64,
    tau0: f64,
    params: &KamParameters,
) -> Result<(MagnusOperators, KamState)> {
    let ops = crate::magnus::magnus_operators(sd, v, lat, omega, m, gamma0, tau0, params.cutoff)?;
    let twin = if params.lipschitz {
        let w2 = crate::magnus::lipschitz_partner(omega, m);
        Some(crate::magnus::magnus_operators(sd, v, lat, &w2, m, gamma0, tau0, params.cutoff)?)
    } else {
        None
    };
    let st = init_state(&ops, sd, basis, gamma0, m, twin.as_ref(), params)?;
    Ok((ops, st))
}

/// C_{s0} N0^Lambda (M^alpha / gamma) delta^(0)_{s0+beta} <= 1.
#[derive(Clone, Debug, Serialize)]
pub struct SmallnessReport {
    pub lhs: f64,
    /// 1 / lhs; infinite when V = 0.
    pub margin: f64,
    pub passed: bool,
}

pub fn smallness_check(state: &KamState, params: &KamParameters) -> SmallnessReport {
    let rec = &state.history[0];
    let lhs = params.calibration.c_small
        * params.n0.powf(params.lambda())
        * state.m.powf(params.alpha)
        / params.gamma
        * rec.delta_s0_beta.total;
    let margin = if lhs == 0.0 { f64::INFINITY } else { 1.0 / lhs };
    SmallnessReport { lhs, margin, passed: lhs <= 1.0 && lhs.is_finite() }
}

/// Worst triple of a Melnikov scan.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Offender {
    pub ell: Vec<i64>,
    pub n: usize,
    pub np: usize,
    pub sign: Sign,
    /// min |eig G| divided by the required lower bound.
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MelnikovStepReport {
    pub passed: bool,
    pub n_cut: f64,
    pub checked: usize,
    pub pruned: usize,
    pub worst: Option<Offender>,
}

/// |n +- n'| beyond which G^{+-} cannot be resonant for any omega in R_M.
pub fn lemma_far_threshold(m: f64, ell: &[i64], m_sq: f64, c_drift: f64, gamma0: f64) -> f64 {
    2.0 * m * ell_norm(ell) + 2.0 * m_sq + 2.0 * c_drift / (gamma0 * m)
}

/// The conditions of Omega_{p+1}: |G^{-1}| <= 2 N_p^tau M^alpha / (gamma <n +- n'>^alpha) on |l| <= N_p.
pub fn melnikov_step_test(state: &KamState, params: &KamParameters) -> MelnikovStepReport {
    let n_cut = params.n_p(state.p as i64);
    let lat = state.lattice;
    let eig = state.block_eigenvalues();
    let mut checked = 0;
    let mut pruned = 0;
    let mut worst: Option<Offender> = None;
    let ma = state.m.powf(params.alpha);
    for e in 0..lat.n_ell() {
        let ell = lat.ell_at(e);
        if ell_norm(&ell) > n_cut {
            continue;
        }
        let wl = dot(&state.main.omega, &ell);
        let far = lemma_far_threshold(state.m, &ell, state.m_sq, params.calibration.c_drift, state.gamma0);
        let zero = ell.iter().all(|&x| x == 0);
        for n in 0..=lat.j {
            for np in 0..=lat.j {
                for sign in [Sign::Minus, Sign::Plus] {
                    if sign == Sign::Minus && zero && n == np {
                        continue;
                    }
                    let k = sign.combine(n, np);
                    let need = params.gamma * jbracket(k).powf(params.alpha) / (2.0 * n_cut.powf(params.tau) * ma);
                    if (k.unsigned_abs() as f64) - far >= params.gamma * jbracket(k).powf(params.alpha) / ma {
                        pruned += 1;
                        continue;
                    }
                    checked += 1;
                    let mut mn = f64::INFINITY;
                    for &a in &eig[n] {
                        for &b in &eig[np] {
                            mn = mn.min((wl + sign.apply(a, b)).abs());
                        }
                    }
                    let ratio = mn / need;
                    if worst.as_ref().is_none_or(|w| ratio < w.ratio) {
                        worst = Some(Offender { ell: ell.clone(), n, np, sign, ratio });
                    }
                }
            }
        }
    }
    let passed = worst.as_ref().is_none_or(|w| w.ratio >= 1.0);
    MelnikovStepReport { passed, n_cut, checked, pruned, worst }
}

/// Solution of the homological equation at one step.
#[derive(Clone, Debug)]
pub struct Homological {
    pub x: OperatorPair,
    /// Block-diagonal Z^(p).
    pub z: DMatrix<C64>,
    /// i[X, H0] (reused by the step).
    pub ad_h0: OperatorPair,
    /// i[X, H0] - omega.d_phi X + Pi_N V - Z.
    pub residual: OperatorPair,
    /// Max residual entry over blocks where the cutoff equals one.
    pub residual_uncut: f64,
    pub cut_blocks: usize,
}

struct BlockSolve {
    x: DMatrix<C64>,
    cut: bool,
}

/// X block = -i chi(sigma_min / rho) G^{-1} V block, with G Hermitian.
fn solve_block(g: &DMatrix<C64>, v: &DMatrix<C64>, rho: f64, cutoff: Cutoff) -> BlockSolve {
    let (p, q) = v.shape();
    let eig = g.clone().symmetric_eigen();
    let smin = eig.eigenvalues.iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min);
    let chi = if smin == 0.0 { 0.0 } else { cutoff.value(smin / rho) };
    if chi == 0.0 {
        return BlockSolve { x: DMatrix::zeros(p, q), cut: true };
    }
    let vec = DMatrix::from_column_slice(p * q, 1, v.as_slice());
    let u = &eig.eigenvectors;
    let mut coef = u.adjoint() * vec;
    for (k, c) in coef.iter_mut().enumerate() {
        *c /= C64::new(eig.eigenvalues[k], 0.0);
    }
    let sol = u * coef * (-I * chi);
    BlockSolve { x: DMatrix::from_column_slice(p, q, sol.as_slice()), cut: chi < 1.0 }
}

/// Solve the homological equation for X^(p) on |l| <= N_p with the cutoff extension.
pub fn solve_homological(
    branch: &Branch,
    lat: Lattice,
    m: f64,
    n_cut: f64,
    params: &KamParameters,
) -> Result<Homological> {
    let jm = lat.j;
    let (pv, _) = branch.v.project_modes(n_cut);
    let hc = conj_matrix(&branch.h0);
    let blocks_a: Vec<DMatrix<C64>> = (0..=jm).map(|n| extract_block(&branch.h0, jm, n, n)).collect();
    let blocks_c: Vec<DMatrix<C64>> = (0..=jm).map(|n| extract_block(&hc, jm, n, n)).collect();
    let ma = m.powf(params.alpha);
    let mut xd = BlockOperator::zeros(lat);
    let mut xo = BlockOperator::zeros(lat);
    let mut z = DMatrix::zeros(lat.n_space(), lat.n_space());
    let mut cut_mask: Vec<(usize, usize, usize, Sign)> = Vec::new();
    let e0 = lat.zero_ell();
    for (op, sign) in [(&pv.d, Sign::Minus), (&pv.o, Sign::Plus)] {
        for e in op.support() {
            let ell = lat.ell_at(e);
            let wl = dot(&branch.omega, &ell);
            let lb = ell_norm(&ell).max(1.0);
            let vm = op.get(e).unwrap();
            let mut xm = DMatrix::zeros(lat.n_space(), lat.n_space());
            for n in 0..=jm {
                for np in 0..=jm {
                    let vb = extract_block(vm, jm, n, np);
                    if vb.iter().all(|c| *c == C64::new(0.0, 0.0)) {
                        continue;
                    }
                    if sign == Sign::Minus && e == e0 && n == np {
                        place_block(&mut z, jm, n, &hermitize(&vb));
                        continue;
                    }
                    let right = if sign == Sign::Minus { &blocks_a[np] } else { &blocks_c[np] };
                    let g = build_g(wl, &blocks_a[n], right, sign);
                    let rho = 0.5 * params.gamma / ma * jbracket(sign.combine(n, np)).powf(params.alpha) * lb.powf(-params.tau);
                    let s = solve_block(&g, &vb, rho, params.cutoff);
                    if s.cut {
                        cut_mask.push((e, n, np, sign));
                    }
                    let r = block_indices(jm, n);
                    let c = block_indices(jm, np);
                    for (a, &ra) in r.iter().enumerate() {
                        for (b, &cb) in c.iter().enumerate() {
                            xm[(ra, cb)] = s.x[(a, b)];
                        }
                    }
                }
            }
            match sign {
                Sign::Minus => xd.set(e, xm),
                Sign::Plus => xo.set(e, xm),
            }
        }
    }
    let x = OperatorPair::new(xd, xo)?;
    let h0p = h0_pair(lat, &branch.h0);
    let ad_h0 = ad(&x, &h0p)?;
    let zp = h0_pair(lat, &z);
    let residual = ad_h0.sub(&x.phi_derivative(&branch.omega))?.add(&pv)?.sub(&zp)?;
    let mut uncut = 0.0f64;
    for (op, sign) in [(&residual.d, Sign::Minus), (&residual.o, Sign::Plus)] {
        for e in op.support() {
            let mm = op.get(e).unwrap();
            for n in 0..=jm {
                for np in 0..=jm {
                    if cut_mask.iter().any(|c| *c == (e, n, np, sign)) {
                        continue;
                    }
                    uncut = uncut.max(max_abs(&extract_block(mm, jm, n, np)));
                }
            }
        }
    }
    Ok(Homological { x, z, ad_h0, residual, residual_uncut: uncut, cut_blocks: cut_mask.len() })
}

/// V^(p+1) = sum_{k>=2} ad_X^k H0 / k! + Pi_perp V + (e^{iX} V e^{-iX} - V) - sum_{k>=1} ad_X^k Xdot / (k+1)! + R_hom.
fn step_branch(branch: &Branch, lat: Lattice, m: f64, n_cut: f64, params: &KamParameters) -> Result<(Branch, Homological)> {
    let hom = solve_homological(branch, lat, m, n_cut, params)?;
    let coef = |k: usize| if k == 0 { 0.0 } else { 1.0 / (k + 1) as f64 };
    let (t1, _) = lie_series(&hom.x, &hom.ad_h0, params.lie_tol, coef)?;
    let (_, t2) = lie_conjugate(&hom.x, &branch.v, params.lie_tol)?;
    let xdot = hom.x.phi_derivative(&branch.omega);
    let (t3, _) = lie_series(&hom.x, &xdot, params.lie_tol, coef)?;
    let (_, perp) = branch.v.project_modes(n_cut);
    let v = t1.add(&perp)?.add(&t2)?.sub(&t3)?.add(&hom.residual)?;
    let h0 = &branch.h0 + &hom.z;
    Ok((Branch { omega: branch.omega.clone(), h0, v }, hom))
}

/// One KAM step p -> p+1.
pub fn kam_step(state: &KamState, params: &KamParameters) -> Result<KamState> {
    let lat = state.lattice;
    let n_cut = params.n_p(state.p as i64);
    let prev = state.last().clone();
    if state.main.v.is_zero() {
        let mut next = state.clone();
        next.p += 1;
        next.generators.push(OperatorPair::zeros(lat));
        let rec = next.record(params, Some((&prev, &state.main.h0, state.twin.as_ref().map(|t| &t.h0))), 0.0, 0.0, 0.0, 0, 0.0);
        next.history.push(rec);
        return Ok(next);
    }
    let (main, hom) = step_branch(&state.main, lat, state.m, n_cut, params)?;
    let twin = match &state.twin {
        Some(t) => Some(step_branch(t, lat, state.m, n_cut, params)?.0),
        None => None,
    };
    let s0 = state.s0();
    let x_norm = hom.x.pair_norm(s0, params.alpha, params.alpha);
    let ma = state.m.powf(params.alpha);
    let x_bound = n_cut.powf(2.0 * params.tau + 1.0) * ma / params.gamma * prev.delta_s0.sup;
    let x_ratio = if x_bound > 0.0 { x_norm / x_bound } else { 0.0 };
    let mut next = KamState {
        p: state.p + 1,
        main,
        twin,
        generators: state.generators.iter().cloned().chain(std::iter::once(hom.x.clone())).collect(),
        history: state.history.clone(),
        ..state.clone()
    };
    let rhs = n_cut.powf(-params.beta()) * prev.delta_s0_beta.sup
        + n_cut.powf(2.0 * params.tau + 1.0) * ma / params.gamma * prev.delta_s0.sup * prev.delta_s0.sup;
    let mut rec = next.record(
        params,
        Some((&prev, &state.main.h0, state.twin.as_ref().map(|t| &t.h0))),
        x_norm,
        x_ratio,
        hom.residual_uncut,
        hom.cut_blocks,
        0.0,
    );
    rec.nash_moser_ratio = if rhs > 0.0 { rec.delta_s0.sup / rhs } else { 0.0 };
    next.history.push(rec);
    Ok(next)
}

/// Outcome of the full iteration.
#[derive(Clone, Debug)]
pub struct KamResult {
    pub state: KamState,
    pub converged: bool,
    pub aborted: Option<String>,
    /// max_phi |F_{p+1}(phi) - F_p(phi)| in operator norm, F_p the accumulated frame.
    pub cauchy: Vec<f64>,
    /// max_phi |F_p(phi) - Id| at the final p.
    pub frame_distance: f64,
}

/// Angle grid used by the frame checks.
pub fn angle_grid(nu: usize) -> Vec<Vec<f64>> {
    let k = match nu {
        1 => 16,
        2 => 6,
        _ => 3,
    };
    let mut pts = vec![vec![]];
    for _ in 0..nu {
        pts = pts
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                (0..k).map(move |i| {
                    let mut q = p.clone();
                    q.push(2.0 * std::f64::consts::PI * i as f64 / k as f64);
                    q
                })
            })
            .collect();
    }
    pts
}

fn spectral_norm(m: &DMatrix<C64>) -> f64 {
    m.clone().singular_values().iter().copied().fold(0.0, f64::max)
}

/// Iterate until delta_{s0} < floor or p = p_max, then audit the frame sequence.
pub fn kam_iterate(state: KamState, params: &KamParameters) -> Result<KamResult> {
    params.validate()?;
    let mut st = state;
    let mut aborted = None;
    while st.p < params.p_max && st.last().delta_s0.sup >= params.delta_floor {
        match kam_step(&st, params) {
            Ok(next) => {
                let grew = next.last().delta_s0.sup > 10.0 * st.history[0].delta_s0.sup;
                st = next;
                if grew || !st.last().delta_s0.sup.is_finite() {
                    aborted = Some(format!("delta_s0 grew to {:.3e} at p = {}", st.last().delta_s0.sup, st.p));
                    break;
                }
            }
            Err(e) => {
                aborted = Some(e.to_string());
                break;
            }
        }
    }
    let converged = aborted.is_none() && (st.last().delta_s0.sup < params.delta_floor || st.p == params.p_max);
    let grid = angle_grid(st.lattice.nu);
    let d = st.lattice.n_space();
    let mut cauchy = vec![0.0f64; st.generators.len()];
    let mut frame_distance = 0.0f64;
    let id = DMatrix::<C64>::identity(2 * d, 2 * d);
    for phi in &grid {
        let mut f = id.clone();
        for (k, x) in st.generators.iter().enumerate() {
            let next = &f * (pair_at(x, phi) * (-I)).exp();
            cauchy[k] = cauchy[k].max(spectral_norm(&(&next - &f)));
            f = next;
        }
        frame_distance = frame_distance.max(spectral_norm(&(f - &id)));
    }
    Ok(KamResult { state: st, converged, aborted, cauchy, frame_distance })
}

/// One row of the final spectrum table.
#[derive(Clone, Debug, Serialize)]
pub struct SpectrumRow {
    pub n: usize,
    pub lambda: Vec<f64>,
    pub lambda_inf: Vec<f64>,
    pub eps: Vec<f64>,
    /// <n>^alpha max |eps|.
    pub weighted: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FinalSpectrum {
    pub rows: Vec<SpectrumRow>,
    pub sup_weighted: f64,
    /// Every final eigenvalue is real and positive.
    pub positive: bool,
}

/// Eigenvalues of the final blocks against those of H0^(0).
pub fn final_spectrum(state: &KamState, alpha: f64) -> FinalSpectrum {
    let jm = state.lattice.j;
    let fin = block_eigenvalues(&state.main.h0, jm);
    let ini = block_eigenvalues(&state.h0_initial, jm);
    let rows: Vec<SpectrumRow> = (0..=jm)
        .map(|n| {
            let eps: Vec<f64> = fin[n].iter().zip(&ini[n]).map(|(a, b)| a - b).collect();
            let weighted = jbracket(n as i64).powf(alpha) * eps.iter().map(|x| x.abs()).fold(0.0, f64::max);
            SpectrumRow { n, lambda: ini[n].clone(), lambda_inf: fin[n].clone(), eps, weighted }
        })
        .collect();
    let sup_weighted = rows.iter().map(|r| r.weighted).fold(0.0, f64::max);
    let positive = fin.iter().flatten().all(|&x| x > 0.0);
    FinalSpectrum { rows, sup_weighted, positive }
}

impl FinalSpectrum {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["n", "lambda_minus_inf", "lambda_plus_inf", "lambda_minus", "lambda_plus", "eps_weighted"])?;
        for r in &self.rows {
            let pick = |v: &[f64], k: usize| v.get(k).or(v.first()).copied().unwrap_or(f64::NAN);
            wr.write_record([
                r.n.to_string(),
                format!("{:.16e}", pick(&r.lambda_inf, 0)),
                format!("{:.16e}", pick(&r.lambda_inf, 1)),
                format!("{:.16e}", pick(&r.lambda, 0)),
                format!("{:.16e}", pick(&r.lambda, 1)),
                format!("{:.6e}", r.weighted),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// History CSV: p, N_p, delta_{s0}, delta_{s0+beta}, |X| norm.
pub fn write_history_csv<W: std::io::Write>(history: &[StepRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["p", "N_p", "delta_s0", "delta_s0_beta", "x_norm", "drift", "cut_blocks"])?;
    for r in history {
        wr.write_record([
            r.p.to_string(),
            format!("{:.6e}", r.n_p),
            format!("{:.6e}", r.delta_s0.total),
            format!("{:.6e}", r.delta_s0_beta.total),
            format!("{:.6e}", r.x_norm),
            format!("{:.6e}", r.drift.total),
            r.cut_blocks.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
