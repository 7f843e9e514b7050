//! Pseudodifferential symbols a(phi, x, xi) and their quantization.
//!
//! A [`Symbol`] is sampled at integer xi in [-Xi, Xi]. Each sample carries the
//! Taylor jet t_k = d_xi^k a / k! for k <= depth, stored as angle Fourier modes
//! l (|l_i| <= lphi) of values on a uniform x-grid. Products are pointwise in x,
//! convolutions in l, and Leibniz in the jet.

mod calculus;
mod functional;

pub use calculus::*;
pub use functional::*;

use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harmonics::{bracket, Lattice, TorusFunction, C64};
use crate::opmatrix::BlockOperator;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Sampling layout shared by symbols that are combined together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SymbolShape {
    pub nu: usize,
    /// Angle modes |l_i| <= lphi; 0 for phi-independent symbols.
    pub lphi: usize,
    /// Number of x-grid points.
    pub nx: usize,
    pub xi_max: usize,
    pub depth: usize,
}

impl SymbolShape {
    pub fn new(nu: usize, lphi: usize, nx: usize, xi_max: usize, depth: usize) -> Result<Self> {
        if nu == 0 || nx < 4 {
            return Err(Error::Lattice(format!("symbol shape needs nu >= 1 and nx >= 4, got ({nu}, {nx})")));
        }
        Ok(Self { nu, lphi, nx, xi_max, depth })
    }

    /// Grid fine enough to quantize on `lat`: nx >= 4J + 1 and Xi = J.
    pub fn for_lattice(lat: &Lattice, depth: usize) -> Self {
        Self { nu: lat.nu, lphi: lat.l, nx: 4 * lat.j + 4, xi_max: lat.j, depth }
    }

    /// As [`SymbolShape::for_lattice`] but phi-independent.
    pub fn spatial(lat: &Lattice, depth: usize) -> Self {
        Self { lphi: 0, ..Self::for_lattice(lat, depth) }
    }

    pub fn n_xi(&self) -> usize {
        2 * self.xi_max + 1
    }

    pub fn n_ell(&self) -> usize {
        (2 * self.lphi + 1).pow(self.nu as u32)
    }

    fn jets(&self) -> usize {
        self.depth + 1
    }

    fn mode_len(&self) -> usize {
        self.n_xi() * self.jets() * self.nx
    }

    pub fn ell_at(&self, idx: usize) -> Vec<i64> {
        let w = 2 * self.lphi + 1;
        let mut out = vec![0i64; self.nu];
        let mut r = idx;
        for k in (0..self.nu).rev() {
            out[k] = (r % w) as i64 - self.lphi as i64;
            r /= w;
        }
        out
    }

    pub fn ell_index(&self, ell: &[i64]) -> Option<usize> {
        let w = (2 * self.lphi + 1) as i64;
        let mut idx = 0i64;
        for &e in ell {
            if e.unsigned_abs() as usize > self.lphi {
                return None;
            }
            idx = idx * w + e + self.lphi as i64;
        }
        Some(idx as usize)
    }

    pub fn zero_ell(&self) -> usize {
        (self.n_ell() - 1) / 2
    }

    fn compatible(&self, other: &SymbolShape) -> Result<()> {
        if self.nu != other.nu || self.nx != other.nx || self.xi_max != other.xi_max {
            return Err(Error::CutoffMismatch(format!("symbol shapes {self:?} and {other:?} differ")));
        }
        Ok(())
    }

    pub fn x_grid(&self) -> Vec<f64> {
        (0..self.nx).map(|k| 2.0 * std::f64::consts::PI * k as f64 / self.nx as f64).collect()
    }
}

/// How a symbol was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Primitive,
    Composed,
    Parametrix,
    Power,
}

#[derive(Clone, Debug)]
pub struct Symbol {
    shape: SymbolShape,
    pub order: f64,
    pub provenance: Provenance,
    modes: Vec<Option<Vec<C64>>>,
}

/// <xi> = sqrt(1 + xi^2) for the symbol weights.
pub fn xi_bracket(xi: f64) -> f64 {
    (1.0 + xi * xi).sqrt()
}

impl Symbol {
    pub fn zeros(shape: SymbolShape, order: f64) -> Self {
        Self { shape, order, provenance: Provenance::Primitive, modes: vec![None; shape.n_ell()] }
    }

    /// phi-independent primitive from its jets: `f(xi, x)` returns t_0, t_1, ...
    pub fn from_jets<F>(shape: SymbolShape, order: f64, f: F) -> Self
    where
        F: Fn(i64, f64) -> Vec<C64>,
    {
        let xs = shape.x_grid();
        let (nj, nx) = (shape.jets(), shape.nx);
        let mut data = vec![ZERO; shape.mode_len()];
        for xi in 0..shape.n_xi() {
            let xv = xi as i64 - shape.xi_max as i64;
            for (ix, &x) in xs.iter().enumerate() {
                for (k, v) in f(xv, x).into_iter().take(nj).enumerate() {
                    data[(xi * nj + k) * nx + ix] = v;
                }
            }
        }
        let mut s = Self::zeros(shape, order);
        s.modes[shape.zero_ell()] = Some(data);
        s
    }

    pub fn constant(shape: SymbolShape, c: C64) -> Self {
        Self::from_jets(shape, 0.0, |_, _| vec![c])
    }

    /// xi^p with exact jets.
    pub fn xi_monomial(shape: SymbolShape, p: u32) -> Self {
        Self::from_jets(shape, p as f64, |xi, _| {
            let x = xi as f64;
            (0..=p.min(shape.depth as u32))
                .map(|k| C64::new(binom(p as f64, k as usize) * x.powi((p - k) as i32), 0.0))
                .collect()
        })
    }

    /// (1 + xi^2)^{m/2}.
    pub fn japanese(shape: SymbolShape, m: f64) -> Self {
        Self::from_jets(shape, m, |xi, _| {
            let x = xi as f64;
            let base = [C64::new(1.0 + x * x, 0.0), C64::new(2.0 * x, 0.0), C64::new(1.0, 0.0)];
            let mut b = vec![ZERO; shape.depth + 1];
            for (k, v) in base.iter().enumerate().take(b.len()) {
                b[k] = *v;
            }
            scalar_jet_pow(&b, m / 2.0)
        })
    }

    /// Multiplication by f(phi, x); xi-independent.
    pub fn function(shape: SymbolShape, f: &TorusFunction) -> Result<Self> {
        let lat = f.lattice();
        if lat.nu != shape.nu {
            return Err(Error::LatticeMismatch(format!("function nu = {} but symbol nu = {}", lat.nu, shape.nu)));
        }
        if shape.nx < 2 * lat.j + 1 {
            return Err(Error::CutoffMismatch(format!("x-grid of {} points cannot hold |j| <= {}", shape.nx, lat.j)));
        }
        let (nj, nx) = (shape.jets(), shape.nx);
        let mut s = Self::zeros(shape, 0.0);
        let fft = Fft::new(nx);
        for e in 0..lat.n_ell() {
            let ell = lat.ell_at(e);
            let Some(se) = shape.ell_index(&ell) else { continue };
            let mut c = vec![ZERO; nx];
            let mut any = false;
            for j in -(lat.j as i64)..=lat.j as i64 {
                let v = f.coeff(&ell, j);
                if v != ZERO {
                    any = true;
                    c[j.rem_euclid(nx as i64) as usize] = v;
                }
            }
            if !any {
                continue;
            }
            let grid = fft.to_grid(c);
            let mut data = vec![ZERO; shape.mode_len()];
            for xi in 0..shape.n_xi() {
                data[xi * nj * nx..xi * nj * nx + nx].copy_from_slice(&grid);
            }
            s.modes[se] = Some(data);
        }
        Ok(s)
    }

    pub fn shape(&self) -> &SymbolShape {
        &self.shape
    }

    pub fn depth(&self) -> usize {
        self.shape.depth
    }

    pub fn mode(&self, e: usize) -> Option<&[C64]> {
        self.modes[e].as_deref()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.modes.len()).filter(|&e| self.modes[e].is_some()).collect()
    }

    pub fn is_phi_independent(&self) -> bool {
        self.support().iter().all(|&e| e == self.shape.zero_ell())
    }

    /// Grid values of t_k(l, ., xi).
    pub fn slice(&self, e: usize, xi: i64, k: usize) -> Option<&[C64]> {
        let (nj, nx) = (self.shape.jets(), self.shape.nx);
        let i = (xi + self.shape.xi_max as i64) as usize;
        self.modes[e].as_ref().map(|d| &d[(i * nj + k) * nx..(i * nj + k + 1) * nx])
    }

    /// Jet t_0..t_depth at (mode e, xi, grid point ix).
    pub fn jet_at(&self, e: usize, xi: i64, ix: usize) -> Vec<C64> {
        (0..self.shape.jets()).map(|k| self.slice(e, xi, k).map_or(ZERO, |s| s[ix])).collect()
    }

    pub fn scale_mode(&mut self, e: usize, c: C64) {
        if let Some(d) = self.modes[e].as_mut() {
            d.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Multiply the xi-slice (all jets of all modes) by a scalar jet in xi.
    pub fn mul_xi_jet(&self, f: impl Fn(i64) -> Vec<C64>) -> Symbol {
        let (nj, nx) = (self.shape.jets(), self.shape.nx);
        let mut out = self.clone();
        for d in out.modes.iter_mut().flatten() {
            for xi in 0..self.shape.n_xi() {
                let jet = f(xi as i64 - self.shape.xi_max as i64);
                let base = xi * nj * nx;
                let orig: Vec<C64> = d[base..base + nj * nx].to_vec();
                for k in 0..nj {
                    for ix in 0..nx {
                        let mut acc = ZERO;
                        for i in 0..=k.min(jet.len().saturating_sub(1)) {
                            acc += jet[i] * orig[(k - i) * nx + ix];
                        }
                        d[base + k * nx + ix] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn with_depth(&self, depth: usize) -> Symbol {
        if depth >= self.shape.depth {
            return self.clone();
        }
        let (nj, nx) = (self.shape.jets(), self.shape.nx);
        let shape = SymbolShape { depth, ..self.shape };
        let mut out = Symbol { shape, order: self.order, provenance: self.provenance, modes: vec![None; shape.n_ell()] };
        for (e, d) in self.modes.iter().enumerate() {
            let Some(d) = d else { continue };
            let mut nd = vec![ZERO; shape.mode_len()];
            for xi in 0..shape.n_xi() {
                let src = &d[xi * nj * nx..xi * nj * nx + (depth + 1) * nx];
                nd[xi * (depth + 1) * nx..(xi + 1) * (depth + 1) * nx].copy_from_slice(src);
            }
            out.modes[e] = Some(nd);
        }
        out
    }

    /// Re-embed on a larger or smaller angle box.
    pub fn with_lphi(&self, lphi: usize) -> Symbol {
        if lphi == self.shape.lphi {
            return self.clone();
        }
        let shape = SymbolShape { lphi, ..self.shape };
        let mut out = Symbol { shape, order: self.order, provenance: self.provenance, modes: vec![None; shape.n_ell()] };
        for (e, d) in self.modes.iter().enumerate() {
            if let (Some(d), Some(ne)) = (d, shape.ell_index(&self.shape.ell_at(e))) {
                out.modes[ne] = Some(d.clone());
            }
        }
        out
    }

    fn aligned(&self, other: &Symbol) -> Result<(Symbol, Symbol)> {
        self.shape.compatible(&other.shape)?;
        let d = self.shape.depth.min(other.shape.depth);
        let l = self.shape.lphi.max(other.shape.lphi);
        Ok((self.with_depth(d).with_lphi(l), other.with_depth(d).with_lphi(l)))
    }

    fn combine(&self, other: &Symbol, sign: f64) -> Result<Symbol> {
        let (mut a, b) = self.aligned(other)?;
        for (e, d) in b.modes.into_iter().enumerate() {
            let Some(d) = d else { continue };
            match a.modes[e].as_mut() {
                Some(x) => x.iter_mut().zip(&d).for_each(|(p, q)| *p += q * sign),
                None => a.modes[e] = Some(d.into_iter().map(|v| v * sign).collect()),
            }
        }
        a.order = self.order.max(other.order);
        a.provenance = Provenance::Composed;
        Ok(a)
    }

    pub fn add(&self, other: &Symbol) -> Result<Symbol> {
        self.combine(other, 1.0)
    }

    pub fn sub(&self, other: &Symbol) -> Result<Symbol> {
        self.combine(other, -1.0)
    }

    pub fn scale(&self, c: C64) -> Symbol {
        let mut out = self.clone();
        for d in out.modes.iter_mut().flatten() {
            d.iter_mut().for_each(|v| *v *= c);
        }
        out
    }

    /// Pointwise product (l-convolution, Leibniz in the jet).
    pub fn mul(&self, other: &Symbol) -> Result<Symbol> {
        let (a, b) = self.aligned(other)?;
        let shape = a.shape;
        let (nj, nx) = (shape.jets(), shape.nx);
        let mut out = Symbol::zeros(shape, self.order + other.order);
        out.provenance = Provenance::Composed;
        let ells: Vec<Vec<i64>> = (0..shape.n_ell()).map(|e| shape.ell_at(e)).collect();
        for ea in a.support() {
            for eb in b.support() {
                let sum: Vec<i64> = ells[ea].iter().zip(&ells[eb]).map(|(x, y)| x + y).collect();
                let Some(ec) = shape.ell_index(&sum) else { continue };
                let da = a.modes[ea].as_ref().unwrap();
                let db = b.modes[eb].as_ref().unwrap();
                let dc = out.modes[ec].get_or_insert_with(|| vec![ZERO; shape.mode_len()]);
                for xi in 0..shape.n_xi() {
                    let base = xi * nj * nx;
                    for k in 0..nj {
                        for i in 0..=k {
                            let ra = &da[base + i * nx..base + (i + 1) * nx];
                            let rb = &db[base + (k - i) * nx..base + (k - i + 1) * nx];
                            let rc = &mut dc[base + k * nx..base + (k + 1) * nx];
                            for ((c, x), y) in rc.iter_mut().zip(ra).zip(rb) {
                                *c += x * y;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn phi_independent_data(&self, what: &str) -> Result<&[C64]> {
        if !self.is_phi_independent() {
            return Err(Error::Structure(format!("{what} needs a phi-independent symbol")));
        }
        self.modes[self.shape.zero_ell()]
            .as_deref()
            .ok_or_else(|| Error::Ellipticity(format!("{what} of the zero symbol")))
    }

    /// 1/a for phi-independent a that does not vanish on the grid.
    pub fn recip(&self) -> Result<Symbol> {
        self.powf(-1.0)
    }

    /// a^p on the principal branch, for phi-independent a that does not vanish on the grid.
    pub fn powf(&self, p: f64) -> Result<Symbol> {
        let d = self.phi_independent_data("power")?;
        let shape = self.shape;
        let (nj, nx) = (shape.jets(), shape.nx);
        let mut out = Symbol::zeros(shape, self.order * p);
        out.provenance = Provenance::Composed;
        let mut od = vec![ZERO; shape.mode_len()];
        let mut jet = vec![ZERO; nj];
        for xi in 0..shape.n_xi() {
            let base = xi * nj * nx;
            for ix in 0..nx {
                for k in 0..nj {
                    jet[k] = d[base + k * nx + ix];
                }
                if jet[0].norm() == 0.0 {
                    return Err(Error::Ellipticity(format!(
                        "symbol vanishes at xi = {}, x-node {ix}",
                        xi as i64 - shape.xi_max as i64
                    )));
                }
                let r = scalar_jet_pow(&jet, p);
                for k in 0..nj {
                    od[base + k * nx + ix] = r[k];
                }
            }
        }
        out.modes[shape.zero_ell()] = Some(od);
        Ok(out)
    }

    /// d_x^beta, spectrally on the x-grid (Nyquist mode dropped).
    pub fn dx(&self, beta: usize) -> Symbol {
        let mut out = self.clone();
        if beta == 0 {
            return out;
        }
        let nx = self.shape.nx;
        let fft = Fft::new(nx);
        let mult: Vec<C64> = (0..nx)
            .map(|k| {
                let m = fft_freq(k, nx);
                if nx % 2 == 0 && k == nx / 2 {
                    ZERO
                } else {
                    C64::new(0.0, m as f64).powu(beta as u32)
                }
            })
            .collect();
        for d in out.modes.iter_mut().flatten() {
            for row in d.chunks_mut(nx) {
                let mut c = fft.to_coeffs(row.to_vec());
                c.iter_mut().zip(&mult).for_each(|(v, m)| *v *= m);
                row.copy_from_slice(&fft.to_grid(c));
            }
        }
        out
    }

    /// d_xi^beta via the jets; depth drops by beta.
    pub fn dxi(&self, beta: usize) -> Result<Symbol> {
        if beta == 0 {
            return Ok(self.clone());
        }
        if beta > self.shape.depth {
            return Err(Error::Depth { have: self.shape.depth, need: beta });
        }
        let (nj, nx) = (self.shape.jets(), self.shape.nx);
        let nd = self.shape.depth - beta;
        let shape = SymbolShape { depth: nd, ..self.shape };
        let mut out = Symbol { shape, order: self.order - beta as f64, provenance: Provenance::Composed, modes: vec![None; shape.n_ell()] };
        for (e, d) in self.modes.iter().enumerate() {
            let Some(d) = d else { continue };
            let mut o = vec![ZERO; shape.mode_len()];
            for xi in 0..shape.n_xi() {
                for k in 0..=nd {
                    // t'_k = t_{k+beta} (k+beta)!/k!
                    let f: f64 = ((k + 1)..=(k + beta)).map(|v| v as f64).product();
                    let src = &d[(xi * nj + k + beta) * nx..(xi * nj + k + beta + 1) * nx];
                    let dst = &mut o[(xi * (nd + 1) + k) * nx..(xi * (nd + 1) + k + 1) * nx];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a = b * f);
                }
            }
            out.modes[e] = Some(o);
        }
        Ok(out)
    }

    /// Fourier coefficients in x of t_k(l, ., xi), indexed by m in [-(nx-1)/2, nx/2].
    pub fn x_coeffs(&self, e: usize, xi: i64, k: usize) -> Option<Vec<(i64, C64)>> {
        let nx = self.shape.nx;
        let s = self.slice(e, xi, k)?;
        let c = Fft::new(nx).to_coeffs(s.to_vec());
        Some(c.into_iter().enumerate().map(|(i, v)| (fft_freq(i, nx), v)).collect())
    }

    /// Matrix of Op(a) on the exponential basis, A(l)[j][j'] = a^(l, j - j'; xi = j').
    pub fn quantize(&self, lat: &Lattice) -> Result<BlockOperator> {
        if self.shape.xi_max < lat.j {
            return Err(Error::SymbolRange { xi_max: self.shape.xi_max, needed: lat.j });
        }
        if lat.nu != self.shape.nu {
            return Err(Error::LatticeMismatch(format!("lattice nu = {} but symbol nu = {}", lat.nu, self.shape.nu)));
        }
        let nx = self.shape.nx;
        if nx < 4 * lat.j + 1 {
            return Err(Error::CutoffMismatch(format!("x-grid of {nx} points aliases |j - j'| <= {}", 2 * lat.j)));
        }
        let fft = Fft::new(nx);
        let d = lat.n_space();
        let jj = lat.j as i64;
        let mut out = BlockOperator::zeros(*lat);
        for e in 0..lat.n_ell() {
            let Some(se) = self.shape.ell_index(&lat.ell_at(e)) else { continue };
            if self.modes[se].is_none() {
                continue;
            }
            let mut m = nalgebra::DMatrix::<C64>::zeros(d, d);
            for jp in -jj..=jj {
                let c = fft.to_coeffs(self.slice(se, jp, 0).unwrap().to_vec());
                for j in -jj..=jj {
                    m[((j + jj) as usize, (jp + jj) as usize)] = c[(j - jp).rem_euclid(nx as i64) as usize];
                }
            }
            out.set(e, m);
        }
        Ok(out)
    }

    fn sobolev_slice(&self, xi: i64, k: usize, s: f64, fft: &Fft) -> f64 {
        let nx = self.shape.nx;
        let mut acc = 0.0;
        for e in self.support() {
            let ell = self.shape.ell_at(e);
            let c = fft.to_coeffs(self.slice(e, xi, k).unwrap().to_vec());
            for (i, v) in c.iter().enumerate() {
                acc += bracket(&ell, fft_freq(i, nx)).powf(2.0 * s) * v.norm_sqr();
            }
        }
        acc.sqrt()
    }

    /// |A|_{m,s,alpha} = max_{beta <= alpha} sup_xi |d_xi^beta a(., ., xi)|_s <xi>^{-m + beta}.
    pub fn weighted_norm(&self, m: f64, s: f64, alpha: usize) -> Result<f64> {
        self.weighted_norm_above(m, s, alpha, 0)
    }

    /// `weighted_norm` restricted to |xi| >= xi_lo.
    pub fn weighted_norm_above(&self, m: f64, s: f64, alpha: usize, xi_lo: usize) -> Result<f64> {
        if alpha > self.shape.depth {
            return Err(Error::Depth { have: self.shape.depth, need: alpha });
        }
        if s < 0.0 {
            return Err(Error::NegativeRegularity(s));
        }
        let fft = Fft::new(self.shape.nx);
        let xm = self.shape.xi_max as i64;
        let mut best = 0.0f64;
        for beta in 0..=alpha {
            let fact: f64 = (1..=beta).map(|v| v as f64).product();
            for xi in (-xm..=xm).filter(|x| x.unsigned_abs() as usize >= xi_lo) {
                let v = fact * self.sobolev_slice(xi, beta, s, &fft) * xi_bracket(xi as f64).powf(beta as f64 - m);
                best = best.max(v);
            }
        }
        Ok(best)
    }

    /// sup over grid, xi and beta <= depth of |d_x^alpha d_xi^beta a| <xi>^{beta - m}.
    pub fn symbol_bound(&self, alpha_x: usize) -> f64 {
        let a = self.dx(alpha_x);
        let (nj, nx) = (self.shape.jets(), self.shape.nx);
        let mut best = 0.0f64;
        // Sum of modes bounds the phi-dependent value at every angle.
        let mut acc = vec![0.0f64; self.shape.mode_len()];
        for d in a.modes.iter().flatten() {
            acc.iter_mut().zip(d).for_each(|(p, v)| *p += v.norm());
        }
        for xi in 0..self.shape.n_xi() {
            let xv = (xi as i64 - self.shape.xi_max as i64) as f64;
            for k in 0..nj {
                let fact: f64 = (1..=k).map(|v| v as f64).product();
                let w = fact * xi_bracket(xv).powf(k as f64 - self.order);
                for ix in 0..nx {
                    best = best.max(acc[(xi * nj + k) * nx + ix] * w);
                }
            }
        }
        best
    }

    /// Order, sampling and jet-0 values of every angle mode.
    pub fn to_json(&self) -> serde_json::Value {
        let mut vals = Vec::new();
        let xm = self.shape.xi_max as i64;
        for e in self.support() {
            let ell = self.shape.ell_at(e);
            for xi in -xm..=xm {
                for (ix, v) in self.slice(e, xi, 0).unwrap().iter().enumerate() {
                    let mut row: Vec<serde_json::Value> = ell.iter().map(|&l| l.into()).collect();
                    row.extend([xi.into(), ix.into(), v.re.into(), v.im.into()]);
                    vals.push(serde_json::Value::Array(row));
                }
            }
        }
        serde_json::json!({
            "order": self.order,
            "provenance": self.provenance,
            "shape": self.shape,
            "values": vals,
        })
    }
}

/// Frequency of FFT bin k on n points, in [-(n-1)/2, n/2].
pub(crate) fn fft_freq(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Normalized x-transforms: values = sum_m c_m e^{i m x_k}.
pub(crate) struct Fft {
    n: usize,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Fft {
    pub(crate) fn new(n: usize) -> Self {
        let mut p = FftPlanner::new();
        Self { n, fwd: p.plan_fft_forward(n), inv: p.plan_fft_inverse(n) }
    }

    pub(crate) fn to_coeffs(&self, mut v: Vec<C64>) -> Vec<C64> {
        self.fwd.process(&mut v);
        let s = 1.0 / self.n as f64;
        v.iter_mut().for_each(|c| *c *= s);
        v
    }

    pub(crate) fn to_grid(&self, mut c: Vec<C64>) -> Vec<C64> {
        self.inv.process(&mut c);
        c
    }
}

pub(crate) fn binom(p: f64, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (p - i as f64) / (i + 1) as f64)
}

/// Taylor coefficients of a^p from those of a (a_0 != 0).
pub fn scalar_jet_pow(a: &[C64], p: f64) -> Vec<C64> {
    let n = a.len();
    let mut f = vec![ZERO; n];
    f[0] = a[0].powf(p);
    for k in 1..n {
        let mut acc = ZERO;
        for j in 1..=k {
            acc += a[j] * f[k - j] * (p * j as f64 - (k - j) as f64);
        }
        f[k] = acc / (a[0] * k as f64);
    }
    f
}

pub fn scalar_jet_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().min(b.len());
    (0..n).map(|k| (0..=k).map(|i| a[i] * b[k - i]).sum()).collect()
}

fn scalar_jet_recip(a: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; a.len()];
    r[0] = 1.0 / a[0];
    for k in 1..a.len() {
        let acc: f64 = (1..=k).map(|j| a[j] * r[k - j]).sum();
        r[k] = -acc * r[0];
    }
    r
}

fn scalar_jet_exp(a: &[f64]) -> Vec<f64> {
    let mut f = vec![0.0; a.len()];
    f[0] = a[0].exp();
    for k in 1..a.len() {
        let acc: f64 = (1..=k).map(|j| j as f64 * a[j] * f[k - j]).sum();
        f[k] = acc / k as f64;
    }
    f
}

/// Admissible cutoffs: even, 0 on |t| <= 1/3, 1 on |t| >= 2/3, increasing in between.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Cutoff {
    /// Smoothstep from h(u) = exp(-1/u).
    #[default]
    Exp,
    /// Smoothstep from h(u) = exp(-1/u^2).
    ExpSquared,
}

impl Cutoff {
    fn h_jet(&self, u: &[f64]) -> Vec<f64> {
        if u[0] <= 0.0 {
            return vec![0.0; u.len()];
        }
        let inner = match self {
            Cutoff::Exp => scalar_jet_recip(u),
            Cutoff::ExpSquared => scalar_jet_recip(&scalar_jet_mul(u, u)),
        };
        scalar_jet_exp(&inner.iter().map(|v| -v).collect::<Vec<_>>())
    }

    /// Taylor coefficients of chi(t(.)) given those of t(.) at a point with t > 0.
    pub fn jet(&self, t: &[f64]) -> Vec<f64> {
        let n = t.len();
        let mut u1 = t.to_vec();
        u1[0] -= 1.0 / 3.0;
        let mut u2: Vec<f64> = t.iter().map(|v| -v).collect();
        u2[0] += 2.0 / 3.0;
        let h1 = self.h_jet(&u1);
        let h2 = self.h_jet(&u2);
        if h1[0] == 0.0 {
            return vec![0.0; n];
        }
        if h2[0] == 0.0 {
            let mut one = vec![0.0; n];
            one[0] = 1.0;
            return one;
        }
        let den: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| a + b).collect();
        scalar_jet_mul(&h1, &scalar_jet_recip(&den))
    }

    pub fn value(&self, t: f64) -> f64 {
        self.jet(&[t.abs()])[0]
    }

    /// Jets of chi(|xi| / scale) at an integer xi.
    pub fn abs_xi_jet(&self, xi: i64, depth: usize, scale: f64) -> Vec<C64> {
        if xi == 0 {
            return vec![ZERO; depth + 1];
        }
        let mut t = vec![0.0; depth + 1];
        t[0] = xi.unsigned_abs() as f64 / scale;
        if depth >= 1 {
            t[1] = xi.signum() as f64 / scale;
        }
        self.jet(&t).into_iter().map(|v| C64::new(v, 0.0)).collect()
    }
}
