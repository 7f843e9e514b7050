//! Composition and commutator expansions, and operator-level residual decay.

use serde::Serialize;

use super::{Provenance, Symbol};
use crate::error::{Error, Result};
use crate::harmonics::{Lattice, C64};
use crate::opmatrix::BlockOperator;

/// sum_{beta < n} (1/(i^beta beta!)) d_xi^beta a d_x^beta b.
pub fn compose(a: &Symbol, b: &Symbol, n: usize) -> Result<Symbol> {
    if n == 0 {
        return Err(Error::Depth { have: 0, need: 1 });
    }
    if a.depth() < n - 1 {
        return Err(Error::Depth { have: a.depth(), need: n - 1 });
    }
    let mut acc = a.mul(b)?;
    let mut fact = 1.0;
    let mut ipow = C64::new(1.0, 0.0);
    for beta in 1..n {
        fact *= beta as f64;
        ipow *= C64::new(0.0, 1.0);
        let term = a.dxi(beta)?.mul(&b.dx(beta))?;
        acc = acc.add(&term.scale(1.0 / (ipow * fact)))?;
    }
    acc.order = a.order + b.order;
    acc.provenance = Provenance::Composed;
    Ok(acc)
}

/// Leading commutator symbol -i {a, b} = -i (d_xi a d_x b - d_x a d_xi b).
pub fn commutator_symbol(a: &Symbol, b: &Symbol) -> Result<Symbol> {
    if a.depth() < 2 || b.depth() < 2 {
        return Err(Error::Depth { have: a.depth().min(b.depth()), need: 2 });
    }
    let p = a.dxi(1)?.mul(&b.dx(1))?.sub(&a.dx(1).mul(&b.dxi(1)?)?)?;
    let mut out = p.scale(C64::new(0.0, -1.0));
    out.order = a.order + b.order - 1.0;
    out.provenance = Provenance::Composed;
    Ok(out)
}

/// Row profile of an operator residual and its fitted power law |j|^exponent.
#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    /// (|j|, max over l, j' and both signs of j of |R(l)[j][j']|).
    pub rows: Vec<(usize, f64)>,
    pub exponent: f64,
    pub fit_range: (usize, usize),
}

impl DecayReport {
    pub fn from_operator(r: &BlockOperator, j_lo: usize, j_hi: usize) -> Self {
        let jm = r.lattice().j;
        let mut rows = Vec::new();
        for aj in 0..=jm {
            let mut best = 0.0f64;
            for e in r.support() {
                let m = r.get(e).unwrap();
                for row in [jm - aj, jm + aj] {
                    for c in 0..m.ncols() {
                        best = best.max(m[(row, c)].norm());
                    }
                }
            }
            rows.push((aj, best));
        }
        let exponent = fit_power(&rows, j_lo, j_hi);
        Self { rows, exponent, fit_range: (j_lo, j_hi) }
    }

    pub fn max_in(&self, lo: usize, hi: usize) -> f64 {
        self.rows.iter().filter(|r| r.0 >= lo && r.0 <= hi).map(|r| r.1).fold(0.0, f64::max)
    }

    pub fn min_in(&self, lo: usize, hi: usize) -> f64 {
        self.rows.iter().filter(|r| r.0 >= lo && r.0 <= hi).map(|r| r.1).fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["abs_j", "max_entry", "fitted_exponent"])?;
        for (j, v) in &self.rows {
            wr.write_record([j.to_string(), format!("{v:.6e}"), format!("{:.4}", self.exponent)])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Least-squares slope of log v against log j over lo <= j <= hi (v > 0).
pub fn fit_power(rows: &[(usize, f64)], lo: usize, hi: usize) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.0 >= lo.max(1) && r.0 <= hi && r.1 > 1e-300)
        .map(|r| ((r.0 as f64).ln(), r.1.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NEG_INFINITY;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    num / den
}

/// Default fit window: J/8 (at least 4) to J/2.
pub fn default_fit_range(lat: &Lattice) -> (usize, usize) {
    ((lat.j / 8).max(4), lat.j / 2)
}

/// Composition with the operator residual Op(a)Op(b) - Op(a#_n b) on `lat`.
pub fn compose_with_report(a: &Symbol, b: &Symbol, n: usize, lat: &Lattice) -> Result<(Symbol, DecayReport)> {
    let c = compose(a, b, n)?;
    let r = a.quantize(lat)?.mul(&b.quantize(lat)?)?.sub(&c.quantize(lat)?)?;
    let (lo, hi) = default_fit_range(lat);
    Ok((c, DecayReport::from_operator(&r, lo, hi)))
}

/// Leading commutator with the residual [Op a, Op b] - Op(-i{a,b}) on `lat`.
pub fn commutator_with_report(a: &Symbol, b: &Symbol, lat: &Lattice) -> Result<(Symbol, DecayReport)> {
    let c = commutator_symbol(a, b)?;
    let (qa, qb) = (a.quantize(lat)?, b.quantize(lat)?);
    let r = qa.mul(&qb)?.sub(&qb.mul(&qa)?)?.sub(&c.quantize(lat)?)?;
    let (lo, hi) = default_fit_range(lat);
    Ok((c, DecayReport::from_operator(&r, lo, hi)))
}
