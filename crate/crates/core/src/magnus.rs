//! Magnus normal form for H(t) = B sigma_3 + (1/2) B^{-1/2} V(omega t) B^{-1/2} sigma_4.
//!
//! The generator Y sigma_4 solves omega . d_phi Y = W mode by mode, and since
//! sigma_4^2 = 0 the conjugated Hamiltonian is exactly B sigma_3 + V with
//! V^d = i[Y, B] + 2YBY and V^o = -i(YB + BY) + 2YBY.
//!
//! Two realizations are kept side by side: symbols (through the psdo
//! calculus, used for the class norms) and Galerkin matrices built from the
//! spectral B (exact on the truncation, used by the KAM iteration).

use nalgebra::{DMatrix, Matrix2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::{dot, ell_norm, Lattice, TorusFunction, C64};
use crate::opmatrix::{max_abs, max_abs_op, BlockOperator};
use crate::psdo::{complex_power, compose, ContourSpec, Cutoff, EllipticSymbol, Symbol, SymbolShape};
use crate::schrodinger::SpectralData;
use crate::stats::slope_through_origin;

const I: C64 = C64::new(0.0, 1.0);

/// omega in R_M = {M <= |omega| <= 2M}.
pub fn in_annulus(omega: &[f64], m: f64) -> bool {
    let r = omega.iter().map(|w| w * w).sum::<f64>().sqrt();
    r >= m && r <= 2.0 * m
}

/// Uniform sample from R_M in R^nu.
pub fn sample_annulus<R: Rng>(nu: usize, m: f64, rng: &mut R) -> Vec<f64> {
    let mut dir: Vec<f64> = Vec::with_capacity(nu);
    loop {
        dir.clear();
        // Box-Muller normals give a uniform direction.
        while dir.len() < nu {
            let (u1, u2): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
            let r = (-2.0 * u1.ln()).sqrt();
            dir.push(r * (2.0 * std::f64::consts::PI * u2).cos());
            if dir.len() < nu {
                dir.push(r * (2.0 * std::f64::consts::PI * u2).sin());
            }
        }
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            dir.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let nu_f = nu as f64;
    let u: f64 = rng.gen();
    let radius = (m.powf(nu_f) + u * ((2.0 * m).powf(nu_f) - m.powf(nu_f))).powf(1.0 / nu_f);
    dir.into_iter().map(|d| d * radius).collect()
}

/// Nonzero l with |l| <= l_max (Euclidean), from the box |l_i| <= l_max.
pub fn nonzero_modes(nu: usize, l_max: usize) -> Vec<Vec<i64>> {
    let lat = Lattice { nu, l: l_max, j: 0 };
    lat.ells().into_iter().filter(|l| l.iter().any(|&x| x != 0) && ell_norm(l) <= l_max as f64).collect()
}

/// |omega . l| >= gamma0 M <l>^{-tau0} for 0 < |l| <= L; returns the verdict and
/// min_l |omega . l| <l>^{tau0} / (gamma0 M).
pub fn diophantine_test(omega: &[f64], m: f64, gamma0: f64, tau0: f64, l_max: usize) -> (bool, f64) {
    let mut worst = f64::INFINITY;
    for ell in nonzero_modes(omega.len(), l_max) {
        let r = dot(omega, &ell).abs() * ell_norm(&ell).max(1.0).powf(tau0) / (gamma0 * m);
        worst = worst.min(r);
    }
    (worst >= 1.0, worst)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DiophantineCertificate {
    pub gamma0: f64,
    pub tau0: f64,
    pub l_max: usize,
    pub worst_ratio: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FrequencySample {
    pub omega: Vec<f64>,
    #[serde(rename = "M")]
    pub m: f64,
    pub diophantine: Option<DiophantineCertificate>,
}

impl FrequencySample {
    pub fn new(omega: Vec<f64>, m: f64) -> Result<Self> {
        if !in_annulus(&omega, m) {
            return Err(Error::Config(format!("omega = {omega:?} is not in R_M for M = {m}")));
        }
        Ok(Self { omega, m, diophantine: None })
    }

    pub fn certify(&mut self, gamma0: f64, tau0: f64, l_max: usize) -> bool {
        let (passed, worst_ratio) = diophantine_test(&self.omega, self.m, gamma0, tau0, l_max);
        self.diophantine = Some(DiophantineCertificate { gamma0, tau0, l_max, worst_ratio, passed });
        passed
    }
}

/// Rejected fraction of R_M per gamma0 and the linear-through-origin fit.
#[derive(Clone, Debug, Serialize)]
pub struct DiophantineMeasure {
    pub nu: usize,
    #[serde(rename = "M")]
    pub m: f64,
    pub tau0: f64,
    pub l_max: usize,
    pub samples: usize,
    pub rows: Vec<(f64, f64)>,
    /// c0 in fraction = c0 gamma0.
    pub c0: f64,
    pub max_relative_deviation: f64,
}

/// Monte-Carlo rejected fraction on shared samples, for each gamma0.
pub fn diophantine_measure(nu: usize, m: f64, tau0: f64, l_max: usize, gammas: &[f64], samples: usize, seed: u64) -> DiophantineMeasure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes = nonzero_modes(nu, l_max);
    // Each sample's best ratio without gamma0: min_l |omega.l| <l>^tau0 / M.
    let ratios: Vec<f64> = (0..samples)
        .map(|_| {
            let w = sample_annulus(nu, m, &mut rng);
            modes.iter().map(|l| dot(&w, l).abs() * ell_norm(l).powf(tau0) / m).fold(f64::INFINITY, f64::min)
        })
        .collect();
    let rows: Vec<(f64, f64)> =
        gammas.iter().map(|&g| (g, ratios.iter().filter(|&&r| r < g).count() as f64 / samples.max(1) as f64)).collect();
    let (c0, max_relative_deviation) = slope_through_origin(&rows);
    DiophantineMeasure { nu, m, tau0, l_max, samples, rows, c0, max_relative_deviation }
}

/// chi(omega.l / rho_l) / (i omega.l), rho_l = gamma0 M <l>^{-tau0}; zero where chi vanishes.
pub fn divisor_factor(omega: &[f64], ell: &[i64], m: f64, gamma0: f64, tau0: f64, cutoff: Cutoff) -> C64 {
    let wl = dot(omega, ell);
    let rho = gamma0 * m * ell_norm(ell).max(1.0).powf(-tau0);
    let chi = cutoff.value(wl / rho);
    if chi == 0.0 {
        C64::new(0.0, 0.0)
    } else {
        C64::new(chi, 0.0) / (I * wl)
    }
}

/// Pauli matrices sigma_1..3 and sigma_4 = [[1, 1], [-1, -1]].
pub fn pauli(k: usize) -> Matrix2<C64> {
    let (o, z) = (C64::new(1.0, 0.0), C64::new(0.0, 0.0));
    match k {
        1 => Matrix2::new(z, o, o, z),
        2 => Matrix2::new(z, -I, I, z),
        3 => Matrix2::new(o, z, z, -o),
        4 => Matrix2::new(o, o, -o, -o),
        _ => Matrix2::identity(),
    }
}

/// Residuals of the Pauli identities behind the normal form (all exactly zero in exact arithmetic).
#[derive(Clone, Debug, Serialize)]
pub struct PauliReport {
    pub sigma4_squared: f64,
    /// i[Y s4, B s3] - (i[Y,B] 1 - i[Y,B]_a s1).
    pub ad_first: f64,
    /// -[Y s4, [Y s4, B s3]] - 4 YBY s4.
    pub ad_second: f64,
    /// ad^3 of H0.
    pub ad_third: f64,
    /// Assembled B s3 + W s4 against the [[B + W, W], [-W, -B - W]] form.
    pub kg_assembly: f64,
}

impl PauliReport {
    pub fn max(&self) -> f64 {
        [self.sigma4_squared, self.ad_first, self.ad_second, self.ad_third, self.kg_assembly].into_iter().fold(0.0, f64::max)
    }
}

fn kron2(s: &Matrix2<C64>, a: &DMatrix<C64>) -> DMatrix<C64> {
    let d = a.nrows();
    let mut out = DMatrix::zeros(2 * d, 2 * d);
    for r in 0..2 {
        for c in 0..2 {
            out.view_mut((r * d, c * d), (d, d)).copy_from(&(a * s[(r, c)]));
        }
    }
    out
}

/// Checks the Pauli identities on random Hermitian operator entries of size d.
pub fn pauli_algebra_check(d: usize, seed: u64) -> PauliReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut herm = |pos: bool| {
        let a = DMatrix::<C64>::from_fn(d, d, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let h = &a + a.adjoint();
        if pos {
            &h * &h + DMatrix::identity(d, d)
        } else {
            h
        }
    };
    let (b, y, v) = (herm(true), herm(false), herm(false));
    let s = |k| pauli(k);
    let s4sq = max_abs(&DMatrix::from_iterator(2, 2, (s(4) * s(4)).iter().copied()));
    let yy = kron2(&s(4), &y);
    let h0 = kron2(&s(3), &b);
    let comm = |a: &DMatrix<C64>, b: &DMatrix<C64>| a * b - b * a;
    let ad1 = comm(&yy, &h0) * I;
    let ybc = &y * &b - &b * &y;
    let yba = &y * &b + &b * &y;
    let want1 = kron2(&Matrix2::identity(), &(&ybc * I)) - kron2(&s(1), &(&yba * I));
    let ad2 = -comm(&yy, &comm(&yy, &h0));
    let want2 = kron2(&s(4), &(&y * &b * &y * C64::new(4.0, 0.0)));
    let ad3 = comm(&yy, &ad2);
    // B^{-1/2} from the eigendecomposition of the positive B.
    let eig = b.clone().symmetric_eigen();
    let mut ev = eig.eigenvectors.clone();
    for (k, mut col) in ev.column_iter_mut().enumerate() {
        col *= C64::new(eig.eigenvalues[k].powf(-0.5), 0.0);
    }
    let bmh = &ev * eig.eigenvectors.adjoint();
    let w = &bmh * &v * &bmh * C64::new(0.5, 0.0);
    let h = &h0 + kron2(&s(4), &w);
    let mut direct = DMatrix::zeros(2 * d, 2 * d);
    direct.view_mut((0, 0), (d, d)).copy_from(&(&b + &w));
    direct.view_mut((0, d), (d, d)).copy_from(&w);
    direct.view_mut((d, 0), (d, d)).copy_from(&(-&w));
    direct.view_mut((d, d), (d, d)).copy_from(&(-&b - &w));
    let u = nalgebra::DVector::<C64>::from_fn(2 * d, |i, _| C64::new((i as f64).sin(), (i as f64).cos()));
    PauliReport {
        sigma4_squared: s4sq,
        ad_first: max_abs(&(ad1 - want1)),
        ad_second: max_abs(&(ad2 - want2)),
        ad_third: max_abs(&ad3),
        kg_assembly: (&h * &u - &direct * &u).iter().map(|c| c.norm()).fold(0.0, f64::max),
    }
}

/// Matrix of multiplication by v(phi, x) on the lattice: M(l)[j][j'] = v^(l, j - j').
pub fn multiplication_operator(v: &TorusFunction, lat: Lattice) -> Result<BlockOperator> {
    if v.lattice().nu != lat.nu {
        return Err(Error::LatticeMismatch(format!("v has nu = {} but lattice nu = {}", v.lattice().nu, lat.nu)));
    }
    let jm = lat.j as i64;
    let d = lat.n_space();
    let mut out = BlockOperator::zeros(lat);
    for e in 0..lat.n_ell() {
        let ell = lat.ell_at(e);
        let m = DMatrix::from_fn(d, d, |r, c| v.coeff(&ell, (r as i64 - jm) - (c as i64 - jm)));
        out.set(e, m);
    }
    Ok(out)
}

/// Largest |l|_inf carried by v.
pub fn angle_degree(v: &TorusFunction) -> usize {
    let lat = *v.lattice();
    (0..lat.n_ell())
        .filter(|&e| (-(lat.j as i64)..=lat.j as i64).any(|j| v.coeff(&lat.ell_at(e), j).norm() > 0.0))
        .map(|e| lat.ell_at(e).iter().map(|x| x.unsigned_abs() as usize).max().unwrap_or(0))
        .max()
        .unwrap_or(0)
}

/// Parameters of the Magnus step.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagnusConfig {
    pub gamma0: f64,
    /// Defaults to nu.
    #[serde(default)]
    pub tau0: Option<f64>,
    /// Terms kept in every composition.
    #[serde(default = "default_compose")]
    pub n_compose: usize,
    /// Layers of the complex powers of xi^2 + q.
    #[serde(default = "default_compose")]
    pub n_power: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_contour")]
    pub contour: ContourSpec,
    /// Cutoff used in the extension of Y to all of R_M.
    #[serde(default)]
    pub cutoff: Cutoff,
    /// Lipschitz weight w in |.|^{Lip(w)} = |.|^sup + w |.|^lip.
    #[serde(default = "default_lip_weight")]
    pub lip_weight: f64,
}

fn default_compose() -> usize {
    3
}

fn default_depth() -> usize {
    12
}

fn default_contour() -> ContourSpec {
    ContourSpec { xi_scale: 4.0, ..ContourSpec::default() }
}

fn default_lip_weight() -> f64 {
    1.0
}

impl MagnusConfig {
    pub fn new(gamma0: f64) -> Self {
        Self {
            gamma0,
            tau0: None,
            n_compose: default_compose(),
            n_power: default_compose(),
            depth: default_depth(),
            contour: default_contour(),
            cutoff: Cutoff::default(),
            lip_weight: default_lip_weight(),
        }
    }

    pub fn tau0(&self, nu: usize) -> f64 {
        self.tau0.unwrap_or(nu as f64)
    }

    pub fn validate(&self, nu: usize) -> Result<()> {
        if !(self.gamma0 > 0.0 && self.gamma0 < 1.0) {
            return Err(Error::Config(format!("gamma0 must lie in (0, 1), got {}", self.gamma0)));
        }
        if self.tau0(nu) <= nu as f64 - 1.0 {
            return Err(Error::Config(format!("tau0 = {} must exceed nu - 1 = {}", self.tau0(nu), nu - 1)));
        }
        if self.n_compose == 0 || self.n_power == 0 {
            return Err(Error::Config("n_compose and n_power must be positive".into()));
        }
        Ok(())
    }
}

/// Exact Galerkin matrices of the Magnus step on span{e_j : |j| <= J}.
#[derive(Clone, Debug)]
pub struct MagnusOperators {
    pub lattice: Lattice,
    pub omega: Vec<f64>,
    pub b: BlockOperator,
    pub w: BlockOperator,
    pub y: BlockOperator,
    pub vd: BlockOperator,
    pub vo: BlockOperator,
    /// W - omega . d_phi Y; zero where the cutoff equals one.
    pub homological_residual: BlockOperator,
    /// L >= 2 deg_phi(v): YBY is then represented without truncation.
    pub l_closed: bool,
}

/// Self-adjointness and reality defects.
#[derive(Clone, Debug, Serialize)]
pub struct StructureReport {
    pub y_adjoint: f64,
    pub y_real: f64,
    pub vd_adjoint: f64,
    pub vo_conj: f64,
    pub homological_residual: f64,
}

impl StructureReport {
    pub fn max_structure(&self) -> f64 {
        [self.y_adjoint, self.y_real, self.vd_adjoint, self.vo_conj].into_iter().fold(0.0, f64::max)
    }
}

/// W, Y, V^d, V^o as matrices, with B = L_q^{1/2} from the spectral data.
pub fn magnus_operators(
    sd: &SpectralData,
    v: &TorusFunction,
    lat: Lattice,
    omega: &[f64],
    m: f64,
    gamma0: f64,
    tau0: f64,
    cutoff: Cutoff,
) -> Result<MagnusOperators> {
    if lat.j != sd.jmax {
        return Err(Error::CutoffMismatch(format!("lattice J = {} but spectral J = {}", lat.j, sd.jmax)));
    }
    if omega.len() != lat.nu {
        return Err(Error::FrequencyMismatch);
    }
    check_zero_average(v)?;
    let b = sd.spectral_power(0.5);
    let bmh = sd.spectral_power(-0.25);
    let vop = multiplication_operator(v, lat)?;
    let mut w = BlockOperator::zeros(lat);
    let mut y = BlockOperator::zeros(lat);
    let mut res = BlockOperator::zeros(lat);
    for e in vop.support() {
        let we = &bmh * vop.get(e).unwrap() * &bmh * C64::new(0.5, 0.0);
        let ell = lat.ell_at(e);
        let f = divisor_factor(omega, &ell, m, gamma0, tau0, cutoff);
        let chi = f * I * dot(omega, &ell);
        y.set(e, &we * f);
        res.set(e, &we * (C64::new(1.0, 0.0) - chi));
        w.set(e, we);
    }
    let bop = BlockOperator::time_independent(lat, b);
    let yb = y.mul(&bop)?;
    let by = bop.mul(&y)?;
    let yby = yb.mul(&y)?.scale(C64::new(2.0, 0.0));
    let vd = yb.sub(&by)?.scale(I).add(&yby)?;
    let vo = yb.add(&by)?.scale(-I).add(&yby)?;
    Ok(MagnusOperators {
        lattice: lat,
        omega: omega.to_vec(),
        b: bop,
        w,
        y,
        vd,
        vo,
        homological_residual: res,
        l_closed: lat.l >= 2 * angle_degree(v),
    })
}

fn check_zero_average(v: &TorusFunction) -> Result<()> {
    let (avg, vanishes) = v.phi_average();
    if !vanishes {
        let mx = avg.coeffs().iter().map(|c| c.norm()).fold(0.0, f64::max);
        return Err(Error::NonzeroAverage(mx));
    }
    Ok(())
}

impl MagnusOperators {
    pub fn structure(&self) -> StructureReport {
        let yc = max_abs_op(&self.y.conj().sub(&self.y).expect("same lattice"));
        let voc = max_abs_op(&self.vo.adjoint().sub(&self.vo.conj()).expect("same lattice"));
        StructureReport {
            y_adjoint: self.y.self_adjoint_defect(),
            y_real: yc,
            vd_adjoint: self.vd.self_adjoint_defect(),
            vo_conj: voc,
            homological_residual: max_abs_op(&self.homological_residual),
        }
    }

    /// 2d x 2d matrix of B s3 + W(phi) s4.
    pub fn original_at(&self, phi: &[f64]) -> DMatrix<C64> {
        let b = self.b.at_angle(phi);
        let w = self.w.at_angle(phi);
        kron2(&pauli(3), &b) + kron2(&pauli(4), &w)
    }

    /// 2d x 2d matrix of B s3 + [[Vd, Vo], [-conj Vo, -conj Vd]] + (W - Ydot) s4.
    pub fn transformed_at(&self, phi: &[f64]) -> DMatrix<C64> {
        let d = self.lattice.n_space();
        let b = self.b.at_angle(phi);
        let mut h = kron2(&pauli(3), &b);
        let vd = self.vd.at_angle(phi);
        let vo = self.vo.at_angle(phi);
        let vdc = self.vd.conj().at_angle(phi);
        let voc = self.vo.conj().at_angle(phi);
        let mut v = DMatrix::zeros(2 * d, 2 * d);
        v.view_mut((0, 0), (d, d)).copy_from(&vd);
        v.view_mut((0, d), (d, d)).copy_from(&vo);
        v.view_mut((d, 0), (d, d)).copy_from(&(-voc));
        v.view_mut((d, d), (d, d)).copy_from(&(-vdc));
        h += v;
        h += kron2(&pauli(4), &self.homological_residual.at_angle(phi));
        h
    }

    /// Frame change 1 - i Y(phi) s4 = exp(-i Y s4).
    pub fn frame_at(&self, phi: &[f64]) -> DMatrix<C64> {
        let d = self.lattice.n_space();
        DMatrix::identity(2 * d, 2 * d) - kron2(&pauli(4), &(self.y.at_angle(phi) * I))
    }

    /// Second-order commutator check: ad_Y^2(H0) = 4 YBY s4 and ad_Y^3(H0) = 0 at phi.
    pub fn remainder_check(&self, phi: &[f64]) -> (f64, f64) {
        let y = kron2(&pauli(4), &self.y.at_angle(phi));
        let h0 = kron2(&pauli(3), &self.b.at_angle(phi));
        let comm = |a: &DMatrix<C64>, b: &DMatrix<C64>| a * b - b * a;
        let ad2 = -comm(&y, &comm(&y, &h0));
        let yy = self.y.at_angle(phi);
        let want = kron2(&pauli(4), &(&yy * self.b.at_angle(phi) * &yy * C64::new(4.0, 0.0)));
        (max_abs(&(ad2.clone() - want)), max_abs(&comm(&y, &ad2)))
    }
}

/// RK4 propagator of i U' = H(omega t) U from t = 0 to t_end.
pub fn propagate(h: impl Fn(&[f64]) -> DMatrix<C64>, omega: &[f64], t_end: f64, steps: usize) -> DMatrix<C64> {
    let dim = h(&vec![0.0; omega.len()]).nrows();
    let mut u = DMatrix::<C64>::identity(dim, dim);
    let dt = t_end / steps as f64;
    let at = |t: f64| -> DMatrix<C64> {
        let phi: Vec<f64> = omega.iter().map(|w| w * t).collect();
        h(&phi) * (-I)
    };
    for k in 0..steps {
        let t = k as f64 * dt;
        let (a0, a1, a2) = (at(t), at(t + 0.5 * dt), at(t + dt));
        let k1 = &a0 * &u;
        let k2 = &a1 * (&u + &k1 * C64::new(0.5 * dt, 0.0));
        let k3 = &a1 * (&u + &k2 * C64::new(0.5 * dt, 0.0));
        let k4 = &a2 * (&u + &k3 * C64::new(dt, 0.0));
        u += (k1 + k2 * C64::new(2.0, 0.0) + k3 * C64::new(2.0, 0.0) + k4) * C64::new(dt / 6.0, 0.0);
    }
    u
}

/// Conjugation audit over [0, t_end]: |U(t) - F(t) U~(t) F(0)^{-1}| at two step counts.
#[derive(Clone, Debug, Serialize)]
pub struct ConjugationAudit {
    pub t_end: f64,
    pub steps: usize,
    pub residual: f64,
    pub residual_half_steps: f64,
}

pub fn conjugation_audit(ops: &MagnusOperators, t_end: f64, steps: usize) -> ConjugationAudit {
    let run = |n: usize| {
        let u = propagate(|p| ops.original_at(p), &ops.omega, t_end, n);
        let ut = propagate(|p| ops.transformed_at(p), &ops.omega, t_end, n);
        let phi_end: Vec<f64> = ops.omega.iter().map(|w| w * t_end).collect();
        let f0 = ops.frame_at(&vec![0.0; ops.omega.len()]);
        let f0_inv = DMatrix::identity(f0.nrows(), f0.nrows()) * C64::new(2.0, 0.0) - &f0;
        max_abs(&(u - ops.frame_at(&phi_end) * ut * f0_inv))
    };
    ConjugationAudit { t_end, steps, residual: run(steps), residual_half_steps: run(steps / 2) }
}

/// omega-independent symbols: B, B^{-1/2} and w = (1/2) B^{-1/2} # v # B^{-1/2}.
#[derive(Clone, Debug)]
pub struct MagnusBase {
    pub lattice: Lattice,
    pub shape: SymbolShape,
    pub b: Symbol,
    pub b_inv_half: Symbol,
    pub w: Symbol,
    pub config: MagnusConfig,
}

impl MagnusBase {
    /// First |xi| where the contour cutoff chi(|xi| / xi_scale) is identically one.
    pub fn xi_lo(&self) -> usize {
        (2.0 * self.config.contour.xi_scale / 3.0).ceil() as usize
    }
}

pub fn magnus_base(q: &TorusFunction, v: &TorusFunction, lat: Lattice, cfg: &MagnusConfig) -> Result<MagnusBase> {
    cfg.validate(lat.nu)?;
    check_zero_average(v)?;
    let shape = SymbolShape::for_lattice(&lat, cfg.depth);
    let a = EllipticSymbol::schrodinger(q, SymbolShape::spatial(&lat, cfg.depth))?;
    let b = complex_power(&a, 0.5, cfg.n_power, &cfg.contour)?;
    let bmh = complex_power(&a, -0.25, cfg.n_power, &cfg.contour)?;
    let vs = Symbol::function(shape, v)?;
    let w = compose(&compose(&bmh, &vs, cfg.n_compose)?, &bmh, cfg.n_compose)?.scale(C64::new(0.5, 0.0));
    Ok(MagnusBase { lattice: lat, shape, b, b_inv_half: bmh, w, config: cfg.clone() })
}

/// p^(l) = chi(omega.l / rho_l) / (i omega.l) w^(l); requires w^(0) = 0.
pub fn magnus_generator(w: &Symbol, omega: &[f64], m: f64, gamma0: f64, tau0: f64, cutoff: Cutoff) -> Result<Symbol> {
    let shape = *w.shape();
    if omega.len() != shape.nu {
        return Err(Error::FrequencyMismatch);
    }
    if let Some(d) = w.mode(shape.zero_ell()) {
        let mx = d.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if mx > 1e-14 {
            return Err(Error::NonzeroAverage(mx));
        }
    }
    let mut y = w.clone();
    for e in w.support() {
        let ell = shape.ell_at(e);
        let f = if ell.iter().all(|&x| x == 0) { C64::new(0.0, 0.0) } else { divisor_factor(omega, &ell, m, gamma0, tau0, cutoff) };
        y.scale_mode(e, f);
    }
    y.order = w.order;
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct MagnusSymbols {
    pub y: Symbol,
    pub vd: Symbol,
    pub vo: Symbol,
}

pub fn magnus_symbols(base: &MagnusBase, omega: &[f64], m: f64) -> Result<MagnusSymbols> {
    let cfg = &base.config;
    let n = cfg.n_compose;
    let y = magnus_generator(&base.w, omega, m, cfg.gamma0, cfg.tau0(base.lattice.nu), cfg.cutoff)?;
    let yb = compose(&y, &base.b, n)?;
    let by = compose(&base.b, &y, n)?;
    let yby = compose(&yb, &y, n)?.scale(C64::new(2.0, 0.0));
    let mut vd = yb.sub(&by)?.scale(I).add(&yby)?;
    vd.order = -1.0;
    let mut vo = yb.add(&by)?.scale(-I).add(&yby)?;
    vo.order = 0.0;
    Ok(MagnusSymbols { y, vd, vo })
}

/// sup part, finite-difference Lipschitz part and |.|^sup + w |.|^lip.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LipNorm {
    pub sup: f64,
    pub lip: f64,
    pub total: f64,
}

/// Class norms of Y, V^d, V^o at (s, delta) with the Lipschitz part from omega' = omega (1 +- 1/100).
#[derive(Clone, Debug, Serialize)]
pub struct MagnusNorms {
    pub s: f64,
    pub delta: usize,
    pub lip_weight: f64,
    /// Norms are taken over |xi| >= xi_lo; below it the symbols are a smoothing remainder.
    pub xi_lo: usize,
    pub y: LipNorm,
    pub vd: LipNorm,
    pub vo: LipNorm,
}

/// A second frequency at distance |omega| / 100 inside R_M.
pub fn lipschitz_partner(omega: &[f64], m: f64) -> Vec<f64> {
    let up: Vec<f64> = omega.iter().map(|w| w * 1.01).collect();
    if in_annulus(&up, m) {
        up
    } else {
        omega.iter().map(|w| w * 0.99).collect()
    }
}

pub fn magnus_norms(base: &MagnusBase, omega: &[f64], m: f64, s: f64, delta: usize) -> Result<(MagnusSymbols, MagnusNorms)> {
    let a = magnus_symbols(base, omega, m)?;
    let om2 = lipschitz_partner(omega, m);
    let b = magnus_symbols(base, &om2, m)?;
    let dist = omega.iter().zip(&om2).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let wgt = base.config.lip_weight;
    let lo = base.xi_lo();
    let lip = |x: &Symbol, y: &Symbol, order: f64, dl: usize| -> Result<LipNorm> {
        let sup = x.weighted_norm_above(order, s, dl, lo)?;
        let lip = x.sub(y)?.weighted_norm_above(order, (s - 1.0).max(0.0), dl, lo)? / dist;
        Ok(LipNorm { sup, lip, total: sup + wgt * lip })
    };
    let vdl = delta.min(a.vd.depth());
    let vol = delta.min(a.vo.depth());
    let norms = MagnusNorms {
        s,
        delta,
        lip_weight: wgt,
        xi_lo: lo,
        y: lip(&a.y, &b.y, -1.0, delta.min(a.y.depth()))?,
        vd: lip(&a.vd, &b.vd, -1.0, vdl)?,
        vo: lip(&a.vo, &b.vo, 0.0, vol)?,
    };
    Ok((a, norms))
}

/// Smallest sigma on a 1/4 grid in [0, 2 tau0 + 2 delta + 1] with |Y|_{-1,s} <= |w|_{-1,s+sigma} / (gamma0 M).
pub fn observed_loss(base: &MagnusBase, y: &Symbol, m: f64, s: f64) -> Result<Option<f64>> {
    let cfg = &base.config;
    let lo = base.xi_lo();
    let lhs = y.weighted_norm_above(-1.0, s, 0, lo)?;
    let top = 2.0 * cfg.tau0(base.lattice.nu) + 1.0;
    let mut sigma = 0.0;
    while sigma <= top + 1e-12 {
        let rhs = base.w.weighted_norm_above(-1.0, s + sigma, 0, lo)? / (cfg.gamma0 * m);
        if lhs <= rhs * (1.0 + 1e-12) {
            return Ok(Some(sigma));
        }
        sigma += 0.25;
    }
    Ok(None)
}

/// Everything the Magnus step produces at one frequency.
#[derive(Clone, Debug)]
pub struct MagnusOutput {
    pub sample: FrequencySample,
    pub gamma0: f64,
    pub tau0: f64,
    pub symbols: MagnusSymbols,
    pub norms: MagnusNorms,
    pub operators: MagnusOperators,
    pub structure: StructureReport,
    pub observed_loss: Option<f64>,
}

pub fn magnus_transform(base: &MagnusBase, sd: &SpectralData, v: &TorusFunction, omega: &[f64], m: f64) -> Result<MagnusOutput> {
    let cfg = &base.config;
    let lat = base.lattice;
    let tau0 = cfg.tau0(lat.nu);
    let mut sample = FrequencySample::new(omega.to_vec(), m)?;
    sample.certify(cfg.gamma0, tau0, lat.l);
    let s = lat.s0();
    let (symbols, norms) = magnus_norms(base, omega, m, s, 0)?;
    let operators = magnus_operators(sd, v, lat, omega, m, cfg.gamma0, tau0, cfg.cutoff)?;
    let structure = operators.structure();
    let observed_loss = observed_loss(base, &symbols.y, m, s)?;
    Ok(MagnusOutput { sample, gamma0: cfg.gamma0, tau0, symbols, norms, operators, structure, observed_loss })
}

impl MagnusOutput {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "sample": self.sample,
            "gamma0": self.gamma0,
            "tau0": self.tau0,
            "norms": self.norms,
            "structure": self.structure,
            "observed_loss": self.observed_loss,
            "l_closed": self.operators.l_closed,
        })
    }
}

#[cfg(test)]
mod tests;
