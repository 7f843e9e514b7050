//! The final non-resonance set Omega_infty: second-order balanced Melnikov
//! conditions on the final block eigenvalues, the emptiness lemmas that
//! prune most triples, and Monte-Carlo estimates of m_r(Omega_0 \ Omega_infty).
//!
//! Final eigenvalues come from a reduced-depth KAM run for n <= J; above J
//! they are the unperturbed lambda_n from windowed Galerkin solves of L_q.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::craig_wayne::{build_basis_matrix, BasisMatrix};
use crate::error::{Error, Result};
use crate::harmonics::{dot, ell_norm, jbracket, Lattice, TorusFunction, C64};
use crate::kam::{kam_step, lemma_far_threshold, melnikov_step_test, setup, KamParameters, KamState, Sign};
use crate::magnus::{diophantine_test, nonzero_modes, sample_annulus};
use crate::schrodinger::{spectrum, SpectralData};
use crate::stats::{loglog_slope, Proportion};

/// Constants of Omega_infty and of the pruning lemmas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelnikovParams {
    pub nu: usize,
    pub m: f64,
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub tau0: f64,
    /// Angle modes checked: 0 < |l| <= l_max.
    pub l_max: usize,
    /// C_{s0,beta} of the eigenvalue drift bound.
    pub c_drift: f64,
    /// m^2 = max{c_0(q), |q_bar| + |d|_{l^2}}.
    pub m_sq: f64,
}

impl MelnikovParams {
    /// Defaults for nu = 1: tau0 = 2, tau = 5 > nu - 1 + alpha + tau0 / alpha.
    pub fn new(m: f64, gamma: f64, m_sq: f64) -> Self {
        Self {
            nu: 1,
            m,
            gamma,
            tau: 5.0,
            alpha: 0.5,
            tau0: 2.0,
            l_max: 8,
            c_drift: crate::calibration::FROZEN.c_drift,
            m_sq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma = {} must lie in (0, 1)", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha = {} must lie in (0, 1)", self.alpha)));
        }
        let need = self.nu as f64 - 1.0 + self.alpha + self.tau0 / self.alpha;
        if self.tau <= need {
            return Err(Error::Config(format!("tau = {} must exceed nu - 1 + alpha + tau0 / alpha = {need}", self.tau)));
        }
        if self.m <= 0.0 || self.l_max == 0 {
            return Err(Error::Config("M and l_max must be positive".into()));
        }
        Ok(())
    }

    /// gamma0 = gamma^{alpha / 4}.
    pub fn gamma0(&self) -> f64 {
        self.gamma.powf(self.alpha / 4.0)
    }

    /// gamma1 = gamma0^2.
    pub fn gamma1(&self) -> f64 {
        self.gamma0().powi(2)
    }

    pub fn tau1(&self) -> f64 {
        self.tau0
    }

    /// gamma <k>^alpha / (<l>^tau M^alpha).
    pub fn threshold(&self, l_norm: f64, k: i64) -> f64 {
        self.gamma * jbracket(k).powf(self.alpha) / (l_norm.max(1.0).powf(self.tau) * self.m.powf(self.alpha))
    }

    /// R0(l) = 4 C / (gamma0 M)^2 <l>^{tau0}.
    pub fn r0(&self, l_norm: f64) -> f64 {
        4.0 * self.c_drift / (self.gamma0() * self.m).powi(2) * l_norm.max(1.0).powf(self.tau0)
    }

    /// R1(l) = 8 max{m^2, C / (gamma0 M)} M^alpha / gamma1 <l>^{tau1}.
    pub fn r1(&self, l_norm: f64) -> f64 {
        8.0 * self.m_sq.max(self.c_drift / (self.gamma0() * self.m)) * self.m.powf(self.alpha) / self.gamma1()
            * l_norm.max(1.0).powf(self.tau1())
    }

    /// |n +- n'| at which the nearly-resonant set is empty for every omega in R_M.
    pub fn far_threshold(&self, l: &[i64], k: i64) -> f64 {
        lemma_far_threshold(self.m, l, self.m_sq, self.c_drift, self.gamma0()) + self.threshold(ell_norm(l), k)
    }

    /// omega in R^1_{l,j}(gamma1, tau1).
    pub fn in_r1(&self, omega: &[f64], l: &[i64], j: i64) -> bool {
        let t = self.gamma1() * jbracket(j).powf(self.alpha) / (ell_norm(l).max(1.0).powf(self.tau1()) * self.m.powf(self.alpha));
        (dot(omega, l) + j as f64).abs() < t
    }
}

/// The paper's final gamma_* = min{gamma^{alpha/4}, gamma^{1/2}}.
pub fn gamma_star(gamma: f64, alpha: f64) -> f64 {
    gamma.powf(alpha / 4.0).min(gamma.sqrt())
}

/// Eigenvalues (mu_{n,-}, mu_{n,+}) of the final blocks for n = 0..len, with suffix bounds on |mu - n|.
#[derive(Clone, Debug)]
pub struct EigenTable {
    values: Vec<[f64; 2]>,
    /// fsup[m] = max_{n >= m} max_a |mu_{n,a} - n|.
    fsup: Vec<f64>,
}

impl EigenTable {
    pub fn new(values: Vec<[f64; 2]>) -> Self {
        let mut fsup = vec![0.0; values.len()];
        let mut acc = 0.0f64;
        for n in (0..values.len()).rev() {
            acc = acc.max((values[n][0] - n as f64).abs()).max((values[n][1] - n as f64).abs());
            fsup[n] = acc;
        }
        Self { values, fsup }
    }

    /// lambda_n of B = sqrt(L_q) for n <= n_max: dense solve for n <= 32, windows of
    /// Fourier modes |j -+ n| <= window above.
    pub fn unperturbed(q: &TorusFunction, n_max: usize, window: usize) -> Result<Self> {
        let dense_n = 32usize.min(n_max);
        let sd = spectrum(q, 2 * dense_n.max(window) + 8)?;
        let mut values = Vec::with_capacity(n_max + 1);
        for n in 0..=dense_n {
            let lo = sd.lambda[sd.label_index(-(n as i64))];
            let hi = sd.lambda[sd.label_index(n as i64)];
            values.push([lo.min(hi), lo.max(hi)]);
        }
        let qh = q.spatial_coeffs();
        let qj = (qh.len() / 2) as i64;
        for n in dense_n + 1..=n_max {
            values.push(window_pair(&qh, qj, n, window.max(2))?);
        }
        Ok(Self::new(values))
    }

    /// Replace n <= blocks.len() - 1 by the given block spectra.
    pub fn with_blocks(&self, blocks: &[Vec<f64>]) -> Self {
        let mut v = self.values.clone();
        for (n, b) in blocks.iter().enumerate().take(v.len()) {
            let lo = b.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            v[n] = [lo, hi];
        }
        Self::new(v)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, n: usize) -> [f64; 2] {
        self.values[n]
    }

    pub fn fsup(&self, m: usize) -> f64 {
        self.fsup.get(m).copied().unwrap_or(0.0)
    }

    fn dim(n: usize) -> usize {
        if n == 0 {
            1
        } else {
            2
        }
    }
}

/// Two eigenvalues of L_q near n^2 from the window |j -+ n| <= w, as square roots.
fn window_pair(qh: &[C64], qj: i64, n: usize, w: usize) -> Result<[f64; 2]> {
    let n = n as i64;
    let w = w as i64;
    let modes: Vec<i64> = (-n - w..=-n + w).chain(n - w..=n + w).collect();
    let d = modes.len();
    let nn = (n * n) as f64;
    let m = DMatrix::from_fn(d, d, |r, c| {
        let k = modes[r] - modes[c];
        let mut v = if k.abs() <= qj { qh[(k + qj) as usize] } else { C64::new(0.0, 0.0) };
        if r == c {
            v += C64::new((modes[r] * modes[r]) as f64 - nn, 0.0);
        }
        v
    });
    let eig = m.symmetric_eigen();
    let mut e: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut pair = [e[0], e[1]];
    pair.sort_by(f64::total_cmp);
    let root = |x: f64| {
        if nn + x <= 0.0 {
            return Err(Error::NonPositiveSpectrum(nn + x));
        }
        // sqrt(n^2 + x) = n + x / (n + sqrt(n^2 + x)) without cancellation.
        Ok(n as f64 + x / (n as f64 + (nn + x).sqrt()))
    };
    Ok([root(pair[0])?, root(pair[1])?])
}

/// A checked Melnikov triple.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Triple {
    pub ell: Vec<i64>,
    pub n: usize,
    pub np: usize,
    pub sign: Sign,
    /// |omega . l + mu_n +- mu_n'|.
    pub value: f64,
    pub threshold: f64,
    pub ratio: f64,
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    /// The tail beyond the eigenvalue table could not be decided.
    Indeterminate,
}

/// Outcome of the Omega_infty test at one omega.
#[derive(Clone, Debug, Serialize)]
pub struct OmegaInftyReport {
    pub verdict: Verdict,
    pub worst: Option<Triple>,
    /// Eigenvalue combinations evaluated explicitly.
    pub explicit: usize,
    /// Candidate (l, k) sequences cut short by the decay of |mu_n - n|.
    pub tail_pruned: usize,
    /// Sequences decided in the limit n -> infinity.
    pub tail_limit: usize,
    pub tail_undecided: usize,
}

#[derive(Default)]
struct Scan {
    worst: Option<Triple>,
    explicit: usize,
    tail_pruned: usize,
    tail_limit: usize,
    tail_undecided: usize,
    failed: bool,
}

impl Scan {
    fn consider(&mut self, t: Triple) {
        if t.ratio < 1.0 {
            self.failed = true;
        }
        if self.worst.as_ref().is_none_or(|w| t.ratio < w.ratio) {
            self.worst = Some(t);
        }
    }
}

/// (n, n') of the m-th pair in the sequence with n -+ n' = k.
fn pair_at(sign: Sign, k: i64, m: usize) -> (usize, usize) {
    match sign {
        Sign::Minus if k >= 0 => (m + k as usize, m),
        Sign::Minus => (m, m + k.unsigned_abs() as usize),
        Sign::Plus => (m, k as usize - m),
    }
}

/// Candidate k = n -+ n' for which |omega.l + mu_n -+ mu_n'| can fall below the threshold.
fn candidates(t: f64, spread: f64, params: &MelnikovParams, lb: f64, sign: Sign) -> Vec<i64> {
    let thr_hi = params.threshold(lb, (t.abs() + spread + 2.0) as i64);
    let lo = (t - spread - thr_hi).floor() as i64 - 1;
    let hi = (t + spread + thr_hi).ceil() as i64 + 1;
    (lo..=hi)
        .filter(|&k| sign == Sign::Minus || k >= 0)
        .filter(|&k| (t - k as f64).abs() < spread + params.threshold(lb, k))
        .collect()
}

/// Last m scanned explicitly for the sequence (l, sign, k), and how the rest was decided.
#[derive(Clone, Copy, Debug, PartialEq)]
enum SeqEnd {
    /// Remaining pairs pass by |mu - n| <= fsup(m).
    Pruned(usize),
    /// Reached the end of the finite sequence (plus sign).
    Finished,
    /// Ran off the table; the limit decided failure.
    LimitFail(usize),
    Undecided(usize),
}

fn scan_sequence(
    omega: &[f64],
    ell: &[i64],
    sign: Sign,
    k: i64,
    table: &EigenTable,
    params: &MelnikovParams,
    scan: &mut Scan,
) -> SeqEnd {
    let lb = ell_norm(ell);
    let wl = dot(omega, ell);
    let t = -wl;
    let thr = params.threshold(lb, k);
    let gap = (t - k as f64).abs();
    let last = match sign {
        Sign::Plus => k as usize / 2,
        Sign::Minus => usize::MAX,
    };
    let mut m = 0usize;
    loop {
        if gap - 2.0 * table.fsup(m) >= thr {
            return SeqEnd::Pruned(m);
        }
        if m > last {
            return SeqEnd::Finished;
        }
        let (n, np) = pair_at(sign, k, m);
        if n.max(np) >= table.len() {
            // mu_n -+ mu_n' - k -> 0 along the minus sequence.
            if sign == Sign::Minus && gap < thr {
                scan.consider(Triple { ell: ell.to_vec(), n, np, sign, value: gap, threshold: thr, ratio: gap / thr });
                return SeqEnd::LimitFail(m);
            }
            return SeqEnd::Undecided(m);
        }
        let (en, enp) = (table.get(n), table.get(np));
        for a in 0..EigenTable::dim(n) {
            for b in 0..EigenTable::dim(np) {
                let value = (wl + sign.apply(en[a], enp[b])).abs();
                scan.explicit += 1;
                scan.consider(Triple { ell: ell.to_vec(), n, np, sign, value, threshold: thr, ratio: value / thr });
            }
        }
        m += 1;
    }
}

fn angle_modes(params: &MelnikovParams) -> Vec<Vec<i64>> {
    let mut v = vec![vec![0i64; params.nu]];
    v.extend(nonzero_modes(params.nu, params.l_max));
    v
}

/// Check omega against every Melnikov condition with 0 <= |l| <= l_max using the final eigenvalues.
pub fn omega_infty_test(omega: &[f64], table: &EigenTable, params: &MelnikovParams) -> OmegaInftyReport {
    let mut scan = Scan::default();
    let spread = 2.0 * table.fsup(0);
    for ell in angle_modes(params) {
        let lb = ell_norm(&ell);
        let zero = ell.iter().all(|&x| x == 0);
        let t = -dot(omega, &ell);
        for sign in [Sign::Minus, Sign::Plus] {
            for k in candidates(t, spread, params, lb, sign) {
                if zero && sign == Sign::Minus && k == 0 {
                    continue;
                }
                match scan_sequence(omega, &ell, sign, k, table, params, &mut scan) {
                    SeqEnd::Pruned(_) => scan.tail_pruned += 1,
                    SeqEnd::Finished => {}
                    SeqEnd::LimitFail(_) => scan.tail_limit += 1,
                    SeqEnd::Undecided(_) => scan.tail_undecided += 1,
                }
            }
        }
    }
    let verdict = if scan.failed {
        Verdict::Fail
    } else if scan.tail_undecided > 0 {
        Verdict::Indeterminate
    } else {
        Verdict::Pass
    };
    OmegaInftyReport {
        verdict,
        worst: scan.worst,
        explicit: scan.explicit,
        tail_pruned: scan.tail_pruned,
        tail_limit: scan.tail_limit,
        tail_undecided: scan.tail_undecided,
    }
}

/// Double-check of pruned triples at one omega.
#[derive(Clone, Debug, Default, Serialize)]
pub struct AuditReport {
    pub checked: usize,
    pub violations: usize,
    pub worst_ratio: f64,
}

impl AuditReport {
    fn merge(&mut self, o: &AuditReport) {
        self.checked += o.checked;
        self.violations += o.violations;
        self.worst_ratio = self.worst_ratio.min(o.worst_ratio);
    }
}

/// Explicitly evaluate every triple the test skipped with |k - t| <= k_window and m < m_limit.
pub fn audit_pruning(omega: &[f64], table: &EigenTable, params: &MelnikovParams, k_window: i64, m_limit: usize) -> AuditReport {
    let spread = 2.0 * table.fsup(0);
    let mut rep = AuditReport { worst_ratio: f64::INFINITY, ..AuditReport::default() };
    for ell in angle_modes(params) {
        let lb = ell_norm(&ell);
        let zero = ell.iter().all(|&x| x == 0);
        let wl = dot(omega, &ell);
        let t = -wl;
        for sign in [Sign::Minus, Sign::Plus] {
            let cands = candidates(t, spread, params, lb, sign);
            let k0 = t.round() as i64;
            for k in k0 - k_window..=k0 + k_window {
                if (sign == Sign::Plus && k < 0) || (zero && sign == Sign::Minus && k == 0) {
                    continue;
                }
                let start = if cands.contains(&k) {
                    let mut scratch = Scan::default();
                    match scan_sequence(omega, &ell, sign, k, table, params, &mut scratch) {
                        SeqEnd::Pruned(m) => m,
                        _ => continue,
                    }
                } else {
                    0
                };
                let thr = params.threshold(lb, k);
                let last = if sign == Sign::Plus { (k as usize / 2).min(m_limit) } else { m_limit };
                for m in start..=last {
                    let (n, np) = pair_at(sign, k, m);
                    if n.max(np) >= table.len() {
                        break;
                    }
                    let (en, enp) = (table.get(n), table.get(np));
                    for a in 0..EigenTable::dim(n) {
                        for b in 0..EigenTable::dim(np) {
                            let r = (wl + sign.apply(en[a], enp[b])).abs() / thr;
                            rep.checked += 1;
                            rep.worst_ratio = rep.worst_ratio.min(r);
                            if r < 1.0 {
                                rep.violations += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    rep
}

/// Classification of one triple by the emptiness lemmas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Prune {
    /// (0, n, n) with the minus sign is not a Melnikov index.
    Excluded,
    /// |n +- n'| beyond the reach of omega . l for omega in R_M.
    Far,
    /// l != 0, n = n', minus: <n>^alpha >= R0(l).
    Diagonal,
    /// <min{n, n'}>^alpha <n +- n'>^alpha >= R1(l): empty unless omega is in R^1_{l, n +- n'}.
    Conditional,
    Explicit,
}

pub fn classify(ell: &[i64], n: usize, np: usize, sign: Sign, params: &MelnikovParams) -> Prune {
    let lb = ell_norm(ell);
    let zero = ell.iter().all(|&x| x == 0);
    let k = sign.apply(n as f64, np as f64) as i64;
    if zero && n == np && sign == Sign::Minus {
        return Prune::Excluded;
    }
    if (k.unsigned_abs() as f64) >= params.far_threshold(ell, k) {
        return Prune::Far;
    }
    if !zero && n == np && sign == Sign::Minus && (n == 0 || jbracket(n as i64).powf(params.alpha) >= params.r0(lb)) {
        return Prune::Diagonal;
    }
    if k != 0 && jbracket(n.min(np) as i64).powf(params.alpha) * jbracket(k).powf(params.alpha) >= params.r1(lb) {
        return Prune::Conditional;
    }
    Prune::Explicit
}

/// Lemma-based soundness check: for omega in Omega_0, every pruned triple passes.
pub fn lemma_soundness(omega: &[f64], table: &EigenTable, params: &MelnikovParams, triples: &[(Vec<i64>, usize, usize, Sign)]) -> AuditReport {
    let mut rep = AuditReport { worst_ratio: f64::INFINITY, ..AuditReport::default() };
    for (ell, n, np, sign) in triples {
        let class = classify(ell, *n, *np, *sign, params);
        let k = sign.apply(*n as f64, *np as f64) as i64;
        let pruned = match class {
            Prune::Far | Prune::Diagonal => true,
            Prune::Conditional => !params.in_r1(omega, ell, k),
            _ => false,
        };
        if !pruned || *n.max(np) >= table.len() {
            continue;
        }
        let thr = params.threshold(ell_norm(ell), k);
        let wl = dot(omega, ell);
        let (en, enp) = (table.get(*n), table.get(*np));
        for a in 0..EigenTable::dim(*n) {
            for b in 0..EigenTable::dim(*np) {
                let r = (wl + sign.apply(en[a], enp[b])).abs() / thr;
                rep.checked += 1;
                rep.worst_ratio = rep.worst_ratio.min(r);
                if r < 1.0 {
                    rep.violations += 1;
                }
            }
        }
    }
    rep
}

/// Pruning effectiveness on a random grid of triples.
#[derive(Clone, Debug, Serialize)]
pub struct Census {
    pub m: f64,
    pub samples: usize,
    pub excluded: usize,
    pub far: usize,
    pub diagonal: usize,
    pub conditional: usize,
    pub explicit: usize,
    /// Bracketed terms of I_- = I_{-,1} + I_{-,2} + I_{-,3}, each relative to M^nu.
    pub budget: [f64; 3],
}

impl Census {
    pub fn explicit_fraction(&self) -> f64 {
        self.explicit as f64 / self.samples.max(1) as f64
    }
}

/// Random triples (l, n, n', sign) with |l| <= l_max and n, n' <= 2 M l_max, classified by the lemmas.
pub fn resonance_census(params: &MelnikovParams, samples: usize, seed: u64) -> Census {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes = angle_modes(params);
    let n_hi = (2.0 * params.m * params.l_max as f64).ceil() as usize;
    let mut c = Census {
        m: params.m,
        samples,
        excluded: 0,
        far: 0,
        diagonal: 0,
        conditional: 0,
        explicit: 0,
        budget: budget_terms(params),
    };
    for _ in 0..samples {
        let ell = &modes[rng.gen_range(0..modes.len())];
        let n = rng.gen_range(0..=n_hi);
        // One draw in eight lands on the diagonal, which is otherwise never sampled.
        let np = if rng.gen_range(0..8) == 0 { n } else { rng.gen_range(0..=n_hi) };
        let sign = if rng.gen() { Sign::Minus } else { Sign::Plus };
        match classify(ell, n, np, sign, params) {
            Prune::Excluded => c.excluded += 1,
            Prune::Far => c.far += 1,
            Prune::Diagonal => c.diagonal += 1,
            Prune::Conditional => c.conditional += 1,
            Prune::Explicit => c.explicit += 1,
        }
    }
    c
}

/// gamma / (gamma0^{2/alpha} M^{1 + alpha + 2/alpha}), gamma1, gamma / gamma1^{1/alpha}.
pub fn budget_terms(params: &MelnikovParams) -> [f64; 3] {
    let a = params.alpha;
    [
        params.gamma / (params.gamma0().powf(2.0 / a) * params.m.powf(1.0 + a + 2.0 / a)),
        params.gamma1(),
        params.gamma / params.gamma1().powf(1.0 / a),
    ]
}

/// Exact |{omega in R_M : |(l + a).omega + b| <= delta}| against 2 delta (4M)^{nu-1} / (|l| - |a|).
#[derive(Clone, Debug, Serialize)]
pub struct SingleSetCheck {
    pub measure: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Area of {|x| <= r, u.x <= d} for a unit vector u in the plane.
fn disk_halfplane(r: f64, d: f64) -> f64 {
    if d >= r {
        std::f64::consts::PI * r * r
    } else if d <= -r {
        0.0
    } else {
        r * r * (-d / r).acos() + d * (r * r - d * d).sqrt()
    }
}

/// Lemma on the sublevel sets of f(omega) = omega.l + varsigma(omega) with varsigma(omega) = a.omega + b.
pub fn single_set_check(ell: &[i64], a: &[f64], b: f64, delta: f64, m: f64) -> Result<SingleSetCheck> {
    let nu = ell.len();
    if a.len() != nu || !(1..=2).contains(&nu) {
        return Err(Error::Config("single-set check supports nu = 1, 2 with matching slopes".into()));
    }
    let c0 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ln = ell_norm(ell);
    if c0 >= ln {
        return Err(Error::Config(format!("Lipschitz constant {c0} must be below |l| = {ln}")));
    }
    let g: Vec<f64> = ell.iter().zip(a).map(|(&l, &x)| l as f64 + x).collect();
    let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    // |g.omega + b| <= delta  <=>  u.omega in [(-delta - b) / |g|, (delta - b) / |g|].
    let (d1, d2) = ((-delta - b) / gn, (delta - b) / gn);
    let measure = if nu == 1 {
        let seg = |lo: f64, hi: f64| (d2.min(hi) - d1.max(lo)).max(0.0);
        seg(m, 2.0 * m) + seg(-2.0 * m, -m)
    } else {
        let ring = |d: f64| disk_halfplane(2.0 * m, d) - disk_halfplane(m, d);
        ring(d2) - ring(d1)
    };
    let bound = 2.0 * delta / (ln - c0) * (4.0 * m).powi(nu as i32 - 1);
    Ok(SingleSetCheck { measure, bound, holds: measure <= bound * (1.0 + 1e-12) })
}

/// Magnus + reduced KAM at a given omega, returning the final blocks.
#[derive(Clone, Debug)]
pub struct FinalBlockPipeline {
    pub lattice: Lattice,
    pub sd: SpectralData,
    pub basis: BasisMatrix,
    pub v: TorusFunction,
    pub kam: KamParameters,
}

impl FinalBlockPipeline {
    pub fn new(q: &TorusFunction, v: TorusFunction, lattice: Lattice, kam: KamParameters) -> Result<Self> {
        let sd = spectrum(q, lattice.j)?;
        let basis = build_basis_matrix(&sd);
        Ok(Self { lattice, sd, basis, v, kam })
    }

    /// KAM states p = 0..=p_max at omega (stops early at the delta floor).
    pub fn states(&self, omega: &[f64], m: f64, gamma0: f64, tau0: f64) -> Result<Vec<KamState>> {
        let (_, st) = setup(&self.sd, &self.basis, &self.v, self.lattice, omega, m, gamma0, tau0, &self.kam)?;
        let mut out = vec![st];
        while out.len() <= self.kam.p_max {
            let last = out.last().expect("nonempty");
            if last.last().delta_s0.sup < self.kam.delta_floor {
                break;
            }
            let next = kam_step(last, &self.kam)?;
            out.push(next);
        }
        Ok(out)
    }
}

const CENSUS_SAMPLES: usize = 20_000;

/// Settings of a measure run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    pub gammas: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    /// Fraction of samples whose pruning is double-checked.
    pub audit_fraction: f64,
    /// Eigenvalue table length is table_factor * M * l_max.
    pub table_factor: f64,
    pub window: usize,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self { gammas: vec![1e-2, 1e-3, 1e-4], samples: 2000, seed: 7, audit_fraction: 0.01, table_factor: 4.0, window: 10 }
    }
}

/// One row of the measure sweep.
#[derive(Clone, Debug, Serialize)]
pub struct MeasureReport {
    pub m: f64,
    pub gamma: f64,
    pub gamma0: f64,
    pub tau: f64,
    pub alpha: f64,
    pub n_samples: usize,
    pub omega0_rejected: usize,
    pub omega_infty_rejected: usize,
    pub indeterminate: usize,
    pub pipeline_failures: usize,
    /// m_r(Omega_0 \ Omega_infty); indeterminate and failed samples count as rejected.
    pub m_r: Proportion,
    pub explicit_checks: usize,
    pub tail_pruned: usize,
    pub audit: AuditReport,
    /// Audited samples in Omega_infty that failed a completed-step Melnikov test.
    pub chain_violations: usize,
    pub census: Census,
}

#[derive(Clone, Debug, Serialize)]
pub struct MeasureSweep {
    pub rows: Vec<MeasureReport>,
    /// Fitted exponent of m_r against gamma.
    pub exponent: f64,
    pub monotone: bool,
    /// Samples accepted at a larger gamma but rejected at a smaller one (must be 0).
    pub nesting_violations: usize,
}

impl MeasureSweep {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["gamma", "m_r", "ci_lo", "ci_hi", "omega0_rejected", "indeterminate"])?;
        for r in &self.rows {
            wr.write_record([
                format!("{:e}", r.gamma),
                format!("{:.6e}", r.m_r.estimate),
                format!("{:.6e}", r.m_r.lo),
                format!("{:.6e}", r.m_r.hi),
                r.omega0_rejected.to_string(),
                r.indeterminate.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Monte-Carlo estimate of m_r(Omega_0 \ Omega_infty) for each gamma on identical samples.
pub fn estimate_measure(
    base: &MelnikovParams,
    cfg: &MeasureConfig,
    pipeline: &FinalBlockPipeline,
    q: &TorusFunction,
) -> Result<MeasureSweep> {
    if cfg.samples < 100 {
        return Err(Error::TooFewSamples(cfg.samples));
    }
    if cfg.gammas.is_empty() {
        return Err(Error::Config("empty gamma sweep".into()));
    }
    for &g in &cfg.gammas {
        MelnikovParams { gamma: g, ..base.clone() }.validate()?;
    }
    let n_tab = (cfg.table_factor * base.m * base.l_max as f64).ceil() as usize + 8;
    let unperturbed = EigenTable::unperturbed(q, n_tab, cfg.window)?;
    let audit_every = if cfg.audit_fraction > 0.0 { (1.0 / cfg.audit_fraction).round().max(1.0) as usize } else { usize::MAX };
    let omegas: Vec<Vec<f64>> = (0..cfg.samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            sample_annulus(base.nu, base.m, &mut rng)
        })
        .collect();
    let mut rows = Vec::new();
    let mut accepted: Vec<Vec<bool>> = Vec::new();
    for &gamma in &cfg.gammas {
        let params = MelnikovParams { gamma, ..base.clone() };
        let kam = KamParameters { gamma, tau: params.tau, alpha: params.alpha, ..pipeline.kam.clone() };
        let pl = FinalBlockPipeline { kam, ..pipeline.clone() };
        let mut row = MeasureReport {
            m: params.m,
            gamma,
            gamma0: params.gamma0(),
            tau: params.tau,
            alpha: params.alpha,
            n_samples: cfg.samples,
            omega0_rejected: 0,
            omega_infty_rejected: 0,
            indeterminate: 0,
            pipeline_failures: 0,
            m_r: Proportion::new(0, cfg.samples),
            explicit_checks: 0,
            tail_pruned: 0,
            audit: AuditReport { worst_ratio: f64::INFINITY, ..AuditReport::default() },
            chain_violations: 0,
            census: resonance_census(&params, CENSUS_SAMPLES, cfg.seed),
        };
        let mut acc = vec![false; cfg.samples];
        for (i, omega) in omegas.iter().enumerate() {
            let (in_omega0, _) = diophantine_test(omega, params.m, params.gamma0(), params.tau0, params.l_max);
            if !in_omega0 {
                row.omega0_rejected += 1;
                continue;
            }
            let states = match pl.states(omega, params.m, params.gamma0(), params.tau0) {
                Ok(s) => s,
                Err(_) => {
                    row.pipeline_failures += 1;
                    continue;
                }
            };
            let fin = states.last().expect("nonempty");
            let table = unperturbed.with_blocks(&fin.block_eigenvalues());
            let rep = omega_infty_test(omega, &table, &params);
            row.explicit_checks += rep.explicit;
            row.tail_pruned += rep.tail_pruned;
            match rep.verdict {
                Verdict::Pass => acc[i] = true,
                Verdict::Fail => row.omega_infty_rejected += 1,
                Verdict::Indeterminate => row.indeterminate += 1,
            }
            if i % audit_every == 0 {
                row.audit.merge(&audit_pruning(omega, &table, &params, 3, 400));
                if rep.verdict == Verdict::Pass {
                    let mp = &pl.kam;
                    let bad = states[..states.len() - 1].iter().any(|s| !melnikov_step_test(s, mp).passed);
                    row.chain_violations += bad as usize;
                }
            }
        }
        let rejected = cfg.samples - row.omega0_rejected - acc.iter().filter(|&&x| x).count();
        row.m_r = Proportion::new(rejected, cfg.samples);
        rows.push(row);
        accepted.push(acc);
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.gamma, r.m_r.estimate)).collect();
    let exponent = loglog_slope(&pts);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].gamma.total_cmp(&rows[b].gamma));
    let monotone = order.windows(2).all(|w| rows[w[0]].m_r.estimate < rows[w[1]].m_r.estimate);
    let mut nesting_violations = 0;
    for w in order.windows(2) {
        let (small, big) = (&accepted[w[0]], &accepted[w[1]]);
        nesting_violations += small.iter().zip(big).filter(|(s, b)| **b && !**s).count();
    }
    Ok(MeasureSweep { rows, exponent, monotone, nesting_violations })
}

#[cfg(test)]
mod tests;
