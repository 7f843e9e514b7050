//! Resolvent parametrix and contour-integral powers of elliptic symbols.
//!
//! Parametrix layers are kept as polynomials sum_k p_k R^k in the principal
//! resolvent R = (a_m - lambda)^{-1} with lambda-free coefficients p_k, so the
//! same recursion serves a fixed lambda and the contour integral in lambda.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::calculus::{compose, default_fit_range, DecayReport};
use super::{Cutoff, Provenance, Symbol, SymbolShape};
use crate::error::{Error, Result};
use crate::harmonics::{Lattice, TorusFunction, C64};
use crate::opmatrix::BlockOperator;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Elliptic symbol a ~ a_m + a_{m-1} + ..., phi-independent.
#[derive(Clone, Debug)]
pub struct EllipticSymbol {
    pub m: f64,
    /// layers[k] is a_{m-k}; layers[0] is the principal part.
    pub layers: Vec<Symbol>,
}

impl EllipticSymbol {
    pub fn new(m: f64, layers: Vec<Symbol>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Ellipticity("no principal layer".into()));
        };
        for l in &layers {
            if !l.is_phi_independent() {
                return Err(Error::Structure("elliptic layers must be phi-independent".into()));
            }
            first.shape().compatible(l.shape())?;
        }
        Ok(Self { m, layers })
    }

    /// xi^2 + q(x) taken as a single principal layer.
    pub fn schrodinger(q: &TorusFunction, shape: SymbolShape) -> Result<Self> {
        let a = Symbol::xi_monomial(shape, 2).add(&Symbol::function(shape, q)?)?;
        Self::new(2.0, vec![Symbol { order: 2.0, ..a }])
    }

    /// Homogeneous layering a_2 = xi^2, a_1 = 0, a_0 = q.
    pub fn schrodinger_homogeneous(q: &TorusFunction, shape: SymbolShape) -> Result<Self> {
        let a2 = Symbol::xi_monomial(shape, 2);
        let a1 = Symbol::zeros(shape, 1.0);
        let a0 = Symbol::function(shape, q)?;
        Self::new(2.0, vec![a2, a1, a0])
    }

    pub fn full(&self) -> Symbol {
        let mut acc = self.layers[0].clone();
        for l in &self.layers[1..] {
            acc = acc.add(l).expect("compatible layers");
        }
        acc.order = self.m;
        acc
    }

    pub fn shape(&self) -> &SymbolShape {
        self.layers[0].shape()
    }
}

/// sum_k terms[k] R^k.
#[derive(Clone, Debug)]
struct RPoly {
    terms: Vec<Option<Symbol>>,
}

impl RPoly {
    fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    fn r(shape: SymbolShape) -> Self {
        Self { terms: vec![None, Some(Symbol::constant(shape, C64::new(1.0, 0.0)))] }
    }

    fn push(&mut self, k: usize, s: Symbol) -> Result<()> {
        if self.terms.len() <= k {
            self.terms.resize(k + 1, None);
        }
        self.terms[k] = Some(match self.terms[k].take() {
            Some(t) => t.add(&s)?,
            None => s,
        });
        Ok(())
    }

    fn add(&mut self, other: &RPoly) -> Result<()> {
        for (k, t) in other.terms.iter().enumerate() {
            if let Some(t) = t {
                self.push(k, t.clone())?;
            }
        }
        Ok(())
    }

    fn mul_sym(&self, s: &Symbol) -> Result<RPoly> {
        let mut out = RPoly::zero();
        for (k, t) in self.terms.iter().enumerate() {
            if let Some(t) = t {
                out.push(k, t.mul(s)?)?;
            }
        }
        Ok(out)
    }

    fn scale_shift(&self, c: C64, by: usize) -> RPoly {
        let mut terms = vec![None; by];
        terms.extend(self.terms.iter().map(|t| t.as_ref().map(|s| s.scale(c))));
        RPoly { terms }
    }

    /// d(p R^k) = (dp) R^k - k p (d a_m) R^{k+1}.
    fn derive(&self, dp: impl Fn(&Symbol) -> Result<Symbol>, dam: &Symbol) -> Result<RPoly> {
        let mut out = RPoly::zero();
        for (k, t) in self.terms.iter().enumerate() {
            let Some(t) = t else { continue };
            out.push(k, dp(t)?)?;
            if k > 0 {
                out.push(k + 1, t.mul(dam)?.scale(C64::new(-(k as f64), 0.0)))?;
            }
        }
        Ok(out)
    }

    fn eval(&self, r: &Symbol) -> Result<Option<Symbol>> {
        let mut acc: Option<Symbol> = None;
        let mut rk: Option<Symbol> = None;
        for t in &self.terms {
            if let Some(t) = t {
                let term = match &rk {
                    None => t.clone(),
                    Some(p) => t.mul(p)?,
                };
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(&term)?,
                });
            }
            rk = Some(match rk {
                None => r.clone(),
                Some(p) => p.mul(r)?,
            });
        }
        Ok(acc)
    }
}

/// Layers b^0_{-m-n}, n < count, of the formal resolvent parametrix with b^0 # (a - lambda) ~ 1.
fn parametrix_terms(a: &EllipticSymbol, count: usize) -> Result<Vec<RPoly>> {
    let shape = *a.shape();
    let am = &a.layers[0];
    let dxi_am = am.dxi(1)?;
    let mut b: Vec<RPoly> = vec![RPoly::r(shape)];
    // dxi_b[p][beta] = d_xi^beta b_p
    let mut dxi_b: Vec<Vec<RPoly>> = vec![vec![b[0].clone()]];
    for n in 1..count {
        let mut acc = RPoly::zero();
        for p in 0..n {
            if let Some(layer) = a.layers.get(n - p) {
                acc.add(&b[p].mul_sym(layer)?)?;
            }
        }
        let mut fact = 1.0;
        let mut ipow = C64::new(1.0, 0.0);
        for beta in 1..=n {
            fact *= beta as f64;
            ipow *= C64::new(0.0, 1.0);
            let coef = 1.0 / (ipow * fact);
            for p in 0..=(n - beta) {
                let Some(layer) = a.layers.get(n - beta - p) else { continue };
                while dxi_b[p].len() <= beta {
                    let last = dxi_b[p].last().unwrap().clone();
                    dxi_b[p].push(last.derive(|s| s.dxi(1), &dxi_am)?);
                }
                let term = dxi_b[p][beta].mul_sym(&layer.dx(beta))?;
                acc.add(&term.scale_shift(coef, 0))?;
            }
        }
        let bn = acc.scale_shift(C64::new(-1.0, 0.0), 1);
        dxi_b.push(vec![bn.clone()]);
        b.push(bn);
    }
    Ok(b)
}

/// B_(N)(lambda) = chi~(lambda; xi) sum_{n < N} b^0_{-m-n}(lambda), chi~ = chi(xi^2 + |lambda|^{2/m}).
pub fn resolvent_parametrix(a: &EllipticSymbol, lambda: C64, n: usize, cutoff: Cutoff) -> Result<Symbol> {
    if n == 0 {
        return Err(Error::Depth { have: 0, need: 1 });
    }
    let shape = *a.shape();
    let shifted = a.layers[0].sub(&Symbol::constant(shape, lambda))?;
    let r = shifted.recip().map_err(|e| match e {
        Error::Ellipticity(msg) => Error::Ellipticity(format!("a_m - lambda vanishes ({msg})")),
        other => other,
    })?;
    let terms = parametrix_terms(a, n)?;
    let mut acc: Option<Symbol> = None;
    for t in &terms {
        if let Some(v) = t.eval(&r)? {
            acc = Some(match acc {
                None => v,
                Some(s) => s.add(&v)?,
            });
        }
    }
    let c = lambda.norm().powf(2.0 / a.m);
    let mut out = acc.unwrap().mul_xi_jet(|xi| {
        let d = shape.depth;
        let mut t = vec![0.0; d + 1];
        t[0] = (xi * xi) as f64 + c;
        if d >= 1 {
            t[1] = 2.0 * xi as f64;
        }
        if d >= 2 {
            t[2] = 1.0;
        }
        cutoff.jet(&t).into_iter().map(|v| C64::new(v, 0.0)).collect()
    });
    out.order = -a.m;
    out.provenance = Provenance::Parametrix;
    Ok(out)
}

/// Residual Op(B_(N)(lambda)) Op(a - lambda) - Id on `lat`.
pub fn parametrix_residual(a: &EllipticSymbol, lambda: C64, n: usize, cutoff: Cutoff, lat: &Lattice) -> Result<DecayReport> {
    let b = resolvent_parametrix(a, lambda, n, cutoff)?;
    let shape = *a.shape();
    let al = a.full().sub(&Symbol::constant(shape, lambda))?;
    let r = b.quantize(lat)?.mul(&al.quantize(lat)?)?.sub(&BlockOperator::identity(*lat))?;
    let (lo, hi) = default_fit_range(lat);
    Ok(DecayReport::from_operator(&r, lo, hi))
}

/// The contour Gamma around (-inf, 0]: two rays at arg = +-pi from rho to r_max and the circle |lambda| = rho.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ContourSpec {
    pub rho: f64,
    pub r_max: f64,
    /// Gauss-Legendre nodes per unit panel in log r and per circle panel.
    pub n_quad: usize,
    #[serde(default)]
    pub cutoff: Cutoff,
    /// Low-frequency cutoff chi(|xi| / xi_scale) applied to the assembled layers.
    #[serde(default = "unit_scale")]
    pub xi_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for ContourSpec {
    fn default() -> Self {
        Self { rho: 0.5, r_max: 0.5 * 64f64.exp(), n_quad: 8, cutoff: Cutoff::Exp, xi_scale: 1.0 }
    }
}

impl ContourSpec {
    /// Refuses a contour that reaches the spectrum of the operator.
    pub fn check_spectrum(&self, min_eigenvalue: f64) -> Result<()> {
        if min_eigenvalue <= self.rho {
            return Err(Error::Contour(format!("rho = {} but min spectrum = {min_eigenvalue:.6e}", self.rho)));
        }
        Ok(())
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1] (Golub-Welsch).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut t = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = k as f64 / ((4 * k * k - 1) as f64).sqrt();
        t[(k, k - 1)] = b;
        t[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(t);
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Quadrature for I_k(c) = -(1/2 pi i) int_Gamma lambda^z (c - lambda)^{-k} d lambda, c > rho real.
pub struct ContourQuadrature {
    z: f64,
    rho: f64,
    r_max: f64,
    /// Ray nodes r_i and weights already carrying r^z dr.
    ray: Vec<(f64, f64)>,
    /// Circle nodes lambda_j and weights carrying lambda^z d lambda / (2 pi i) with orientation.
    circle: Vec<(C64, C64)>,
}

impl ContourQuadrature {
    pub fn new(z: f64, spec: &ContourSpec) -> Result<Self> {
        if z >= 0.0 {
            return Err(Error::Contour(format!("contour integral needs Re z < 0, got {z}")));
        }
        if !(spec.rho > 0.0 && spec.r_max > spec.rho) {
            return Err(Error::Contour(format!("need 0 < rho < R, got ({}, {})", spec.rho, spec.r_max)));
        }
        let (x, w) = gauss_legendre(spec.n_quad.max(2));
        let span = (spec.r_max / spec.rho).ln();
        let panels = span.ceil() as usize;
        let h = span / panels as f64;
        let mut ray = Vec::with_capacity(panels * x.len());
        for p in 0..panels {
            for (xi, wi) in x.iter().zip(&w) {
                let t = h * (p as f64 + 0.5 * (xi + 1.0));
                let r = spec.rho * t.exp();
                ray.push((r, 0.5 * h * wi * r.powf(z + 1.0)));
            }
        }
        let cpan = 64;
        let hc = 2.0 * std::f64::consts::PI / cpan as f64;
        let mut circle = Vec::with_capacity(cpan * x.len());
        for p in 0..cpan {
            for (xi, wi) in x.iter().zip(&w) {
                let phi = -std::f64::consts::PI + hc * (p as f64 + 0.5 * (xi + 1.0));
                let lam = C64::from_polar(spec.rho, phi);
                // (1/2pi) rho^{z+1} e^{i(z+1)phi} dphi
                let wt = C64::from_polar(spec.rho.powf(z + 1.0), (z + 1.0) * phi) * (0.5 * hc * wi / (2.0 * std::f64::consts::PI));
                circle.push((lam, wt));
            }
        }
        Ok(Self { z, rho: spec.rho, r_max: spec.r_max, ray, circle })
    }

    /// I_1(c), ..., I_kmax(c).
    pub fn kernels(&self, c: f64, kmax: usize) -> Result<Vec<f64>> {
        if c <= self.rho * (1.0 + 1e-9) {
            return Err(Error::Contour(format!("symbol value {c:.6e} inside |lambda| <= rho = {}", self.rho)));
        }
        let mut ray = vec![0.0; kmax];
        for &(r, w) in &self.ray {
            let inv = 1.0 / (c + r);
            let mut p = w * inv;
            for v in ray.iter_mut() {
                *v += p;
                p *= inv;
            }
        }
        let z = self.z;
        for (k, v) in ray.iter_mut().enumerate() {
            // Tail beyond r_max to leading order in c / r.
            let kk = (k + 1) as f64;
            *v += self.r_max.powf(z - kk + 1.0) / (kk - 1.0 - z);
        }
        let pre = -(std::f64::consts::PI * z).sin() / std::f64::consts::PI;
        let mut out: Vec<f64> = ray.iter().map(|v| pre * v).collect();
        let mut circ = vec![ZERO; kmax];
        for &(lam, w) in &self.circle {
            let inv = 1.0 / (C64::new(c, 0.0) - lam);
            let mut p = w * inv;
            for v in circ.iter_mut() {
                *v += p;
                p *= inv;
            }
        }
        out.iter_mut().zip(&circ).for_each(|(o, c)| *o += c.re);
        Ok(out)
    }
}

/// Closed form I_k(c) = (-1)^{k-1} binom(z, k-1) c^{z-k+1}.
pub fn contour_kernel_exact(c: f64, z: f64, k: usize) -> f64 {
    let sign = if (k - 1) % 2 == 0 { 1.0 } else { -1.0 };
    sign * super::binom(z, k - 1) * c.powf(z - k as f64 + 1.0)
}

/// Jet symbols of I_k(a_m(x, xi)) for k = 1..=kmax (zero at xi = 0).
fn kernel_symbols(am: &Symbol, quad: &ContourQuadrature, kmax: usize) -> Result<Vec<Symbol>> {
    let shape = *am.shape();
    let (nj, nx) = (shape.depth + 1, shape.nx);
    let e0 = shape.zero_ell();
    let data = am.mode(e0).ok_or_else(|| Error::Ellipticity("zero principal symbol".into()))?;
    let need = kmax + shape.depth;
    let mut outs: Vec<Vec<C64>> = vec![vec![ZERO; data.len()]; kmax];
    for xi in 0..shape.n_xi() {
        if xi == shape.xi_max {
            continue;
        }
        let base = xi * nj * nx;
        for ix in 0..nx {
            let jet: Vec<C64> = (0..nj).map(|k| data[base + k * nx + ix]).collect();
            if jet.iter().any(|v| v.im.abs() > 1e-12 * (1.0 + v.re.abs())) {
                return Err(Error::Contour("principal symbol must be real-valued".into()));
            }
            let c0 = jet[0].re;
            let ik = quad.kernels(c0, need)?;
            // delta^r for r <= depth, delta = jet - c0.
            let mut delta = vec![0.0; nj];
            for k in 1..nj {
                delta[k] = jet[k].re;
            }
            let mut powers = vec![vec![0.0; nj]; nj];
            powers[0][0] = 1.0;
            for r in 1..nj {
                powers[r] = super::scalar_jet_mul(&powers[r - 1], &delta);
            }
            for k in 1..=kmax {
                // f^{(r)}(c)/r! = (-1)^r binom(k + r - 1, r) I_{k+r}(c)
                let mut acc = vec![0.0; nj];
                for (r, pw) in powers.iter().enumerate() {
                    let coef = if r % 2 == 0 { 1.0 } else { -1.0 } * super::binom((k + r - 1) as f64, r) * ik[k + r - 1];
                    for (a, p) in acc.iter_mut().zip(pw) {
                        *a += coef * p;
                    }
                }
                for (q, v) in acc.into_iter().enumerate() {
                    outs[k - 1][base + q * nx + ix] = C64::new(v, 0.0);
                }
            }
        }
    }
    Ok(outs
        .into_iter()
        .map(|d| {
            let mut s = Symbol::zeros(shape, 0.0);
            s.modes[e0] = Some(d);
            s
        })
        .collect())
}

/// Symbol of A^z assembled from the layers n = 0..=N of the contour integral over the parametrix.
/// For z >= 0 the reduction A^z = A^k A_{z-k} is used with k = floor(z) + 1.
pub fn complex_power(a: &EllipticSymbol, z: f64, n: usize, spec: &ContourSpec) -> Result<Symbol> {
    if !(spec.xi_scale > 0.0) {
        return Err(Error::Contour(format!("xi_scale must be positive, got {}", spec.xi_scale)));
    }
    if z >= 0.0 {
        let k = z.floor() as usize + 1;
        let mut acc = complex_power(a, z - k as f64, n, spec)?;
        let full = a.full();
        let nc = (n + 1).max(3).min(full.depth() + 1);
        for _ in 0..k {
            acc = compose(&full, &acc, nc)?;
        }
        acc.order = a.m * z;
        acc.provenance = Provenance::Power;
        return Ok(acc);
    }
    let quad = ContourQuadrature::new(z, spec)?;
    let terms = parametrix_terms(a, n + 1)?;
    let kmax = terms.iter().map(|t| t.terms.len()).max().unwrap_or(1).max(2) - 1;
    let kern = kernel_symbols(&a.layers[0], &quad, kmax)?;
    let mut acc: Option<Symbol> = None;
    for t in &terms {
        for (k, p) in t.terms.iter().enumerate() {
            let Some(p) = p else { continue };
            if k == 0 {
                return Err(Error::Structure("parametrix layer with a lambda-free term".into()));
            }
            let v = p.mul(&kern[k - 1])?;
            acc = Some(match acc {
                None => v,
                Some(s) => s.add(&v)?,
            });
        }
    }
    let shape = *a.shape();
    let (cutoff, scale) = (spec.cutoff, spec.xi_scale);
    let mut out = acc.unwrap().mul_xi_jet(|xi| cutoff.abs_xi_jet(xi, shape.depth, scale));
    out.order = a.m * z;
    out.provenance = Provenance::Power;
    Ok(out)
}
