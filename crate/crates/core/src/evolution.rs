//! Time propagation of the driven system i phi_t = H(t) phi in x-modes, the
//! Floquet decomposition U(t, tau) = G(omega t) e^{-i(t - tau) H^infty} G(omega tau)^{-1}
//! and Sobolev-norm traces.
//!
//! The integrator is Strang splitting: exact rotation by e^{-i dt B s3} in the eigenbasis
//! of B, and a midpoint kick by e^{-i dt W s4} = 1 - i dt W s4 (s4 is nilpotent).

use nalgebra::DMatrix;
use serde::Serialize;

use crate::craig_wayne::BasisMatrix;
use crate::error::{Error, Result};
use crate::harmonics::{dot, jbracket, Lattice, TorusFunction, C64};
use crate::kam::{conj_matrix, KamState};
use crate::magnus::{multiplication_operator, MagnusOperators};
use crate::opmatrix::max_abs;
use crate::schrodinger::{conj_reflect, SpectralData};

const I: C64 = C64::new(0.0, 1.0);

/// The pair (phi, phibar) in exponential x-modes j = -J..J (index j + J).
#[derive(Clone, Debug, PartialEq)]
pub struct PairedState {
    pub phi: Vec<C64>,
    pub phibar: Vec<C64>,
}

impl PairedState {
    pub fn zeros(d: usize) -> Self {
        Self { phi: vec![C64::new(0.0, 0.0); d], phibar: vec![C64::new(0.0, 0.0); d] }
    }

    /// max_j |phibar_j - conj(phi_{-j})|: zero on the reality submanifold.
    pub fn reality_defect(&self) -> f64 {
        conj_reflect(&self.phi).iter().zip(&self.phibar).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
}

fn mat_vec(m: &DMatrix<C64>, v: &[C64]) -> Vec<C64> {
    (m * DMatrix::from_column_slice(v.len(), 1, v)).column(0).iter().copied().collect()
}

/// phi = B^{1/2} u + i B^{-1/2} u_t, phibar = B^{1/2} u - i B^{-1/2} u_t.
pub fn complexify(u: &[C64], u_t: &[C64], sd: &SpectralData) -> Result<PairedState> {
    let d = sd.n();
    if u.len() != d || u_t.len() != d {
        return Err(Error::CutoffMismatch(format!("data of length {} / {} on a lattice with {d} modes", u.len(), u_t.len())));
    }
    let bp = mat_vec(&sd.spectral_power(0.25), u);
    let bm = mat_vec(&sd.spectral_power(-0.25), u_t);
    Ok(PairedState {
        phi: bp.iter().zip(&bm).map(|(a, b)| a + I * b).collect(),
        phibar: bp.iter().zip(&bm).map(|(a, b)| a - I * b).collect(),
    })
}

/// Inverse of `complexify`: (u, u_t).
pub fn decomplexify(s: &PairedState, sd: &SpectralData) -> (Vec<C64>, Vec<C64>) {
    let sum: Vec<C64> = s.phi.iter().zip(&s.phibar).map(|(a, b)| (a + b) * 0.5).collect();
    let diff: Vec<C64> = s.phi.iter().zip(&s.phibar).map(|(a, b)| (a - b) * (-0.5 * I)).collect();
    (mat_vec(&sd.spectral_power(-0.25), &sum), mat_vec(&sd.spectral_power(0.25), &diff))
}

/// Splitting propagator for H(t) = B s3 + W(omega t) s4, W = (1/2) B^{-1/2} V B^{-1/2}.
#[derive(Clone, Debug)]
pub struct Propagator {
    pub omega: Vec<f64>,
    /// Eigenvalues of B; the columns of `basis` are the eigenvectors.
    pub lambda: Vec<f64>,
    basis: DMatrix<C64>,
    /// (l, W_l) in the eigenbasis of B.
    w_modes: Vec<(Vec<i64>, DMatrix<C64>)>,
}

impl Propagator {
    pub fn new(sd: &SpectralData, v: &TorusFunction, lat: Lattice, omega: &[f64]) -> Result<Self> {
        if sd.jmax != lat.j {
            return Err(Error::CutoffMismatch(format!("spectral data at J = {} but lattice J = {}", sd.jmax, lat.j)));
        }
        if omega.len() != lat.nu {
            return Err(Error::FrequencyMismatch);
        }
        let vop = multiplication_operator(v, lat)?;
        let e = sd.eigvecs.clone();
        let lambda: Vec<f64> = sd.mu_sq.iter().map(|m| m.sqrt()).collect();
        let scale = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            lambda.len(),
            lambda.iter().map(|l| C64::new(0.5f64.sqrt() / l.sqrt(), 0.0)),
        ));
        let mut w_modes = Vec::new();
        for idx in vop.support() {
            let (ell, m) = (lat.ell_at(idx), vop.get(idx).expect("supported mode"));
            w_modes.push((ell, &scale * e.adjoint() * m * &e * &scale));
        }
        Ok(Self { omega: omega.to_vec(), lambda, basis: e, w_modes })
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    /// dt <= 0.1 / max(|omega|, lambda_J).
    pub fn max_dt(&self) -> f64 {
        let w = self.omega.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let l = self.lambda.iter().copied().fold(0.0, f64::max);
        0.1 / w.max(l)
    }

    /// W(omega t) in the eigenbasis.
    fn w_at(&self, t: f64) -> DMatrix<C64> {
        let d = self.dim();
        let phi: Vec<f64> = self.omega.iter().map(|w| w * t).collect();
        let mut out = DMatrix::zeros(d, d);
        for (ell, m) in &self.w_modes {
            out += m * C64::from_polar(1.0, dot(&phi, ell));
        }
        out
    }

    fn rotate(&self, a: &mut DMatrix<C64>, b: &mut DMatrix<C64>, h: f64) {
        for (k, &l) in self.lambda.iter().enumerate() {
            let ph = C64::from_polar(1.0, -l * h);
            a.row_mut(k).iter_mut().for_each(|x| *x *= ph);
            b.row_mut(k).iter_mut().for_each(|x| *x *= ph.conj());
        }
    }

    /// One Strang step from t on eigenbasis coordinates (columns are independent states).
    fn step(&self, a: &mut DMatrix<C64>, b: &mut DMatrix<C64>, t: f64, dt: f64) {
        self.rotate(a, b, 0.5 * dt);
        let kick = self.w_at(t + 0.5 * dt) * (&*a + &*b) * (I * dt);
        *a -= &kick;
        *b += kick;
        self.rotate(a, b, 0.5 * dt);
    }

    /// Number of steps used on [t0, t1] with steps no longer than dt.
    fn steps(&self, t0: f64, t1: f64, dt: f64) -> Result<usize> {
        if dt > self.max_dt() * (1.0 + 1e-12) {
            return Err(Error::TimeStep { dt, limit: self.max_dt() });
        }
        if !(dt > 0.0) || t1 < t0 {
            return Err(Error::Config(format!("need dt > 0 and t1 >= t0 (dt = {dt}, [{t0}, {t1}])")));
        }
        Ok(((t1 - t0) / dt - 1e-9).ceil().max(0.0) as usize)
    }

    /// Evolve the columns of (a, b) given in x-modes from t0 to t1.
    fn evolve_modes(&self, a: &DMatrix<C64>, b: &DMatrix<C64>, t0: f64, t1: f64, dt: f64) -> Result<(DMatrix<C64>, DMatrix<C64>)> {
        let n = self.steps(t0, t1, dt)?;
        let et = self.basis.adjoint();
        let (mut x, mut y) = (&et * a, &et * b);
        let h = if n == 0 { 0.0 } else { (t1 - t0) / n as f64 };
        for k in 0..n {
            self.step(&mut x, &mut y, t0 + k as f64 * h, h);
        }
        Ok((&self.basis * x, &self.basis * y))
    }

    pub fn evolve(&self, s: &PairedState, t0: f64, t1: f64, dt: f64) -> Result<PairedState> {
        let d = self.dim();
        let (a, b) = self.evolve_modes(&DMatrix::from_column_slice(d, 1, &s.phi), &DMatrix::from_column_slice(d, 1, &s.phibar), t0, t1, dt)?;
        Ok(PairedState { phi: a.column(0).iter().copied().collect(), phibar: b.column(0).iter().copied().collect() })
    }

    /// The 2d x 2d propagator U(t1, t0) in x-modes, (phi, phibar) ordering.
    pub fn matrix(&self, t0: f64, t1: f64, dt: f64) -> Result<DMatrix<C64>> {
        let d = self.dim();
        let id = DMatrix::<C64>::identity(2 * d, 2 * d);
        let (a, b) = self.evolve_modes(&id.rows(0, d).into_owned(), &id.rows(d, d).into_owned(), t0, t1, dt)?;
        let mut u = DMatrix::zeros(2 * d, 2 * d);
        u.view_mut((0, 0), (d, 2 * d)).copy_from(&a);
        u.view_mut((d, 0), (d, 2 * d)).copy_from(&b);
        Ok(u)
    }

    /// Record the state every `record_every` steps on [0, t_end].
    pub fn integrate(&self, s0: &PairedState, t_end: f64, dt: f64, record_every: usize) -> Result<Trajectory> {
        let n = self.steps(0.0, t_end, dt)?;
        let h = if n == 0 { 0.0 } else { t_end / n as f64 };
        let d = self.dim();
        let et = self.basis.adjoint();
        let mut x = &et * DMatrix::from_column_slice(d, 1, &s0.phi);
        let mut y = &et * DMatrix::from_column_slice(d, 1, &s0.phibar);
        let every = record_every.max(1);
        let mut tr = Trajectory { times: vec![0.0], states: vec![s0.clone()] };
        for k in 0..n {
            self.step(&mut x, &mut y, k as f64 * h, h);
            if (k + 1) % every == 0 || k + 1 == n {
                let (a, b) = (&self.basis * &x, &self.basis * &y);
                tr.times.push((k + 1) as f64 * h);
                tr.states.push(PairedState { phi: a.column(0).iter().copied().collect(), phibar: b.column(0).iter().copied().collect() });
            }
        }
        Ok(tr)
    }

    /// sum_k |a_k|^2 and sum_k lambda_k |a_k|^2 of the phi component: both invariant when V = 0.
    pub fn free_invariants(&self, s: &PairedState) -> (f64, f64) {
        let a = self.basis.adjoint() * DMatrix::from_column_slice(self.dim(), 1, &s.phi);
        let mass = a.iter().map(|c| c.norm_sqr()).sum();
        let energy = a.iter().zip(&self.lambda).map(|(c, l)| l * c.norm_sqr()).sum();
        (mass, energy)
    }
}

/// Sampled solution.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PairedState>,
}

/// (sum_j <j>^{2r} |c_j|^2)^{1/2} over modes j = -J..J.
pub fn sobolev_norm(c: &[C64], r: f64) -> f64 {
    let jm = (c.len() / 2) as i64;
    c.iter().enumerate().map(|(k, x)| jbracket(k as i64 - jm).powf(2.0 * r) * x.norm_sqr()).sum::<f64>().sqrt()
}

/// sup and inf over the trajectory of |phi(t)|_{H^r} / |phi(0)|_{H^r}, against the band [1 - c, 1 + c].
#[derive(Clone, Debug, Serialize)]
pub struct SobolevTrace {
    pub r: f64,
    pub sup_ratio: f64,
    pub inf_ratio: f64,
    /// max_t |ratio - 1|.
    pub width: f64,
    /// c = c' M^{-(1 - alpha)/2}.
    pub band: f64,
    pub inside: bool,
    pub ratios: Vec<f64>,
}

/// Band constant c' at r = 1: twice the worst width * M^{(1 - alpha)/2} over q = 1 + cos x,
/// V = cos phi cos x, J = 8, L = 4, M in `BAND_CORPUS_M`, 200 angle periods.
pub const BAND_C_PRIME: f64 = 1.34;
pub const BAND_CORPUS_M: [f64; 3] = [1e2, 1e3, 1e4];

pub fn band_width(c_prime: f64, m: f64, alpha: f64) -> f64 {
    c_prime * m.powf(-(1.0 - alpha) / 2.0)
}

pub fn sobolev_trace(tr: &Trajectory, r: f64, band: f64) -> Result<SobolevTrace> {
    if r < 0.0 {
        return Err(Error::NegativeRegularity(r));
    }
    let n0 = sobolev_norm(&tr.states[0].phi, r);
    if n0 == 0.0 {
        return Err(Error::Config("zero initial datum".into()));
    }
    let ratios: Vec<f64> = tr.states.iter().map(|s| sobolev_norm(&s.phi, r) / n0).collect();
    let sup_ratio = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let inf_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let width = (sup_ratio - 1.0).max(1.0 - inf_ratio);
    Ok(SobolevTrace { r, sup_ratio, inf_ratio, width, band, inside: width <= band, ratios })
}

/// t, |phi|_{H^r} for each requested r.
pub fn write_trajectory_csv<W: std::io::Write>(tr: &Trajectory, rs: &[f64], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut head = vec!["t".to_string()];
    head.extend(rs.iter().map(|r| format!("H{r}")));
    wr.write_record(&head)?;
    for (t, s) in tr.times.iter().zip(&tr.states) {
        let mut row = vec![format!("{t:.10e}")];
        row.extend(rs.iter().map(|&r| format!("{:.12e}", sobolev_norm(&s.phi, r))));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Horizon covering 200 periods of the slowest angle.
pub fn default_horizon(omega: &[f64]) -> f64 {
    let w = omega.iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min);
    200.0 * std::f64::consts::TAU / w
}

/// Errors |y_dt - y_{dt/2}| and |y_{dt/2} - y_{dt/4}| at t_end, and their ratio (4 for order 2).
#[derive(Clone, Debug, Serialize)]
pub struct OrderCheck {
    pub dt: f64,
    pub err_coarse: f64,
    pub err_fine: f64,
    pub ratio: f64,
}

pub fn order_check(p: &Propagator, s0: &PairedState, t_end: f64, dt: f64) -> Result<OrderCheck> {
    let runs: Vec<PairedState> = [1.0, 0.5, 0.25].iter().map(|f| p.evolve(s0, 0.0, t_end, dt * f)).collect::<Result<_>>()?;
    let dist = |a: &PairedState, b: &PairedState| a.phi.iter().zip(&b.phi).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    let (e1, e2) = (dist(&runs[0], &runs[1]), dist(&runs[1], &runs[2]));
    Ok(OrderCheck { dt, err_coarse: e1, err_fine: e2, ratio: e1 / e2 })
}

/// max |U(t, s) U(s, tau) - U(t, tau)|.
pub fn cocycle_defect(p: &Propagator, tau: f64, s: f64, t: f64, dt: f64) -> Result<f64> {
    let a = p.matrix(s, t, dt)? * p.matrix(tau, s, dt)?;
    Ok(max_abs(&(a - p.matrix(tau, t, dt)?)))
}

/// Dense Floquet data at one omega: Magnus frame, adapted basis and KAM frames.
pub struct FloquetModel<'a> {
    pub magnus: &'a MagnusOperators,
    pub basis: &'a BasisMatrix,
    pub kam: &'a KamState,
}

impl FloquetModel<'_> {
    /// G(phi) = (1 - i Y s4) diag(Psi, Psi) Phi_0 ... Phi_{p-1}: new coordinates to x-modes.
    pub fn frame(&self, phi: &[f64]) -> DMatrix<C64> {
        let d = self.basis.psi.nrows();
        let mut k = DMatrix::zeros(2 * d, 2 * d);
        k.view_mut((0, 0), (d, d)).copy_from(&self.basis.psi);
        k.view_mut((d, d), (d, d)).copy_from(&self.basis.psi);
        self.magnus.frame_at(phi) * k * self.kam.frame_at(phi, self.kam.generators.len())
    }

    /// H^infty = diag(H0, -conj H0) in the adapted basis.
    pub fn h_infty(&self) -> DMatrix<C64> {
        let h0 = &self.kam.main.h0;
        let d = h0.nrows();
        let mut h = DMatrix::zeros(2 * d, 2 * d);
        h.view_mut((0, 0), (d, d)).copy_from(h0);
        h.view_mut((d, d), (d, d)).copy_from(&(-conj_matrix(h0)));
        h
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FloquetReport {
    pub residual: f64,
    /// delta^(p_final) + dt^2 T.
    pub budget: f64,
    pub pairs: Vec<(f64, f64, f64)>,
}

/// max over (t, tau) of the spectral norm of U(t, tau) - G(omega t) e^{-i(t - tau) H^infty} G(omega tau)^{-1}.
pub fn floquet_residual(p: &Propagator, model: &FloquetModel, pairs: &[(f64, f64)], dt: f64) -> Result<FloquetReport> {
    if model.magnus.omega != p.omega || model.kam.main.omega != p.omega {
        return Err(Error::FrequencyMismatch);
    }
    let h = model.h_infty();
    let angle = |t: f64| -> Vec<f64> { p.omega.iter().map(|w| w * t).collect() };
    let mut out = Vec::new();
    let mut worst = 0.0f64;
    let mut horizon = 0.0f64;
    for &(tau, t) in pairs {
        let u = p.matrix(tau, t, dt)?;
        let g_tau = model.frame(&angle(tau));
        let g_inv = g_tau.clone().try_inverse().ok_or(Error::Singular(0.0))?;
        let prop = (&h * C64::new(0.0, -(t - tau))).exp();
        let f = model.frame(&angle(t)) * prop * g_inv;
        let r = (u - f).singular_values().iter().copied().fold(0.0, f64::max);
        worst = worst.max(r);
        horizon = horizon.max(t - tau);
        out.push((tau, t, r));
    }
    let budget = model.kam.last().delta_s0.sup + dt * dt * horizon;
    Ok(FloquetReport { residual: worst, budget, pairs: out })
}

/// Driving a cos(phi) cos(2 n x) at omega = 2 lambda_n: parametric resonance of the mode pair +-n.
pub fn parametric_resonance(sd: &SpectralData, lat: Lattice, n: usize, amp: f64) -> Result<(TorusFunction, f64)> {
    if lat.nu != 1 || 2 * n > lat.j {
        return Err(Error::Config(format!("resonant drive needs nu = 1 and 2n <= J (n = {n}, J = {})", lat.j)));
    }
    let k = 2 * n as i64;
    let h = C64::new(0.25 * amp, 0.0);
    let v = TorusFunction::from_modes(lat, &[(vec![1], k, h), (vec![1], -k, h), (vec![-1], k, h), (vec![-1], -k, h)]);
    let lam = sd.lambda[sd.label_index(n as i64)];
    Ok((v, 2.0 * lam))
}
