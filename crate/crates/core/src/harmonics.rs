//! Truncated Fourier series on T^nu x T.
//!
//! A [`TorusFunction`] stores the coefficients u^(l, j) of
//! u(phi, x) = sum u^(l, j) e^{i(l.phi + j x)} on the dense box
//! |l|_inf <= L, |j| <= J. Products re-truncate to the box.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

const REALITY_TOL: f64 = 1e-14;

/// Index box for angle modes l in Z^nu and space modes j in Z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    pub nu: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "J")]
    pub j: usize,
}

impl Lattice {
    pub fn new(nu: usize, l: usize, j: usize) -> Result<Self> {
        if nu == 0 || l == 0 || j == 0 {
            return Err(Error::Lattice(format!("need nu, L, J >= 1, got ({nu}, {l}, {j})")));
        }
        Ok(Self { nu, l, j })
    }

    /// s0 = floor((nu + 1)/2) + 2.
    pub fn s0(&self) -> f64 {
        ((self.nu + 1) / 2 + 2) as f64
    }

    pub fn n_ell(&self) -> usize {
        (2 * self.l + 1).pow(self.nu as u32)
    }

    pub fn n_space(&self) -> usize {
        2 * self.j + 1
    }

    pub fn len(&self) -> usize {
        self.n_ell() * self.n_space()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The angle mode stored at position `idx` (first component varies slowest).
    pub fn ell_at(&self, idx: usize) -> Vec<i64> {
        let w = 2 * self.l + 1;
        let mut out = vec![0i64; self.nu];
        let mut r = idx;
        for k in (0..self.nu).rev() {
            out[k] = (r % w) as i64 - self.l as i64;
            r /= w;
        }
        out
    }

    pub fn ell_index(&self, ell: &[i64]) -> Option<usize> {
        if ell.len() != self.nu {
            return None;
        }
        let w = (2 * self.l + 1) as i64;
        let mut idx = 0i64;
        for &e in ell {
            if e.unsigned_abs() as usize > self.l {
                return None;
            }
            idx = idx * w + e + self.l as i64;
        }
        Some(idx as usize)
    }

    /// Position of -l given the position of l.
    pub fn neg_ell(&self, idx: usize) -> usize {
        self.n_ell() - 1 - idx
    }

    pub fn zero_ell(&self) -> usize {
        (self.n_ell() - 1) / 2
    }

    pub fn ells(&self) -> Vec<Vec<i64>> {
        (0..self.n_ell()).map(|i| self.ell_at(i)).collect()
    }

    pub fn index(&self, ell_idx: usize, j: i64) -> usize {
        ell_idx * self.n_space() + (j + self.j as i64) as usize
    }
}

/// Euclidean length of an angle mode.
pub fn ell_norm(ell: &[i64]) -> f64 {
    ell.iter().map(|&e| (e * e) as f64).sum::<f64>().sqrt()
}

/// <l, j> = max{1, |l|, |j|}.
pub fn bracket(ell: &[i64], j: i64) -> f64 {
    1f64.max(ell_norm(ell)).max(j.unsigned_abs() as f64)
}

/// <j> = max{1, |j|}.
pub fn jbracket(j: i64) -> f64 {
    1f64.max(j.unsigned_abs() as f64)
}

pub fn dot(omega: &[f64], ell: &[i64]) -> f64 {
    omega.iter().zip(ell).map(|(w, &e)| w * e as f64).sum()
}

/// Truncated Fourier coefficient array on Z^nu x Z.
#[derive(Clone, Debug, PartialEq)]
pub struct TorusFunction {
    lattice: Lattice,
    coeffs: Vec<C64>,
    reality: bool,
}

impl TorusFunction {
    pub fn new(lattice: Lattice, coeffs: Vec<C64>) -> Result<Self> {
        if coeffs.len() != lattice.len() {
            return Err(Error::Lattice(format!(
                "expected {} coefficients, got {}",
                lattice.len(),
                coeffs.len()
            )));
        }
        let mut f = Self { lattice, coeffs, reality: false };
        f.reality = f.scan_reality();
        Ok(f)
    }

    pub fn zeros(lattice: Lattice) -> Self {
        Self { lattice, coeffs: vec![C64::new(0.0, 0.0); lattice.len()], reality: true }
    }

    pub fn constant(lattice: Lattice, c: f64) -> Self {
        let mut f = Self::zeros(lattice);
        let i = lattice.index(lattice.zero_ell(), 0);
        f.coeffs[i] = C64::new(c, 0.0);
        f
    }

    /// Build from a list of (l, j, coefficient); out-of-box modes are dropped.
    pub fn from_modes(lattice: Lattice, modes: &[(Vec<i64>, i64, C64)]) -> Self {
        let mut coeffs = vec![C64::new(0.0, 0.0); lattice.len()];
        for (ell, j, c) in modes {
            if j.unsigned_abs() as usize > lattice.j {
                continue;
            }
            if let Some(e) = lattice.ell_index(ell) {
                coeffs[lattice.index(e, *j)] += c;
            }
        }
        let mut f = Self { lattice, coeffs, reality: false };
        f.reality = f.scan_reality();
        f
    }

    /// An x-only function from coefficients indexed j = -J..=J.
    pub fn spatial(nu: usize, space: &[C64]) -> Result<Self> {
        if space.len() % 2 == 0 || space.len() < 3 {
            return Err(Error::Lattice("spatial coefficients need odd length >= 3".into()));
        }
        let lattice = Lattice::new(nu, 1, space.len() / 2)?;
        let mut f = Self::zeros(lattice);
        let base = lattice.index(lattice.zero_ell(), -(lattice.j as i64));
        f.coeffs[base..base + space.len()].copy_from_slice(space);
        f.reality = f.scan_reality();
        Ok(f)
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn is_real(&self) -> bool {
        self.reality
    }

    pub fn coeff(&self, ell: &[i64], j: i64) -> C64 {
        match self.lattice.ell_index(ell) {
            Some(e) if j.unsigned_abs() as usize <= self.lattice.j => self.coeffs[self.lattice.index(e, j)],
            _ => C64::new(0.0, 0.0),
        }
    }

    /// The l = 0 slice as a vector over j = -J..=J.
    pub fn spatial_coeffs(&self) -> Vec<C64> {
        let n = self.lattice.n_space();
        let base = self.lattice.index(self.lattice.zero_ell(), -(self.lattice.j as i64));
        self.coeffs[base..base + n].to_vec()
    }

    /// True when every l != 0 coefficient vanishes.
    pub fn is_spatial(&self) -> bool {
        let z = self.lattice.zero_ell();
        let n = self.lattice.n_space();
        self.coeffs
            .iter()
            .enumerate()
            .all(|(i, c)| i / n == z || c.norm() == 0.0)
    }

    fn scan_reality(&self) -> bool {
        let lat = &self.lattice;
        let scale = self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1.0);
        for e in 0..lat.n_ell() {
            let ne = lat.neg_ell(e);
            for j in -(lat.j as i64)..=lat.j as i64 {
                let a = self.coeffs[lat.index(e, j)];
                let b = self.coeffs[lat.index(ne, -j)];
                if (a - b.conj()).norm() > REALITY_TOL * scale {
                    return false;
                }
            }
        }
        true
    }

    /// sqrt(sum <l,j>^{2s} |u^(l,j)|^2).
    pub fn sobolev_norm(&self, s: f64) -> Result<f64> {
        if s < 0.0 {
            return Err(Error::NegativeRegularity(s));
        }
        let lat = &self.lattice;
        let mut acc = 0.0;
        for e in 0..lat.n_ell() {
            let ell = lat.ell_at(e);
            for j in -(lat.j as i64)..=lat.j as i64 {
                let c = self.coeffs[lat.index(e, j)];
                if c.norm_sqr() > 0.0 {
                    acc += bracket(&ell, j).powf(2.0 * s) * c.norm_sqr();
                }
            }
        }
        Ok(acc.sqrt())
    }

    /// Coefficient convolution, truncated back to the box.
    pub fn multiply(&self, other: &TorusFunction) -> Result<TorusFunction> {
        if self.lattice != other.lattice {
            return Err(Error::LatticeMismatch(format!("{:?} vs {:?}", self.lattice, other.lattice)));
        }
        let lat = self.lattice;
        let ells = lat.ells();
        let jj = lat.j as i64;
        let n = lat.n_space();
        let mut out = vec![C64::new(0.0, 0.0); lat.len()];
        let nz_b: Vec<usize> = (0..lat.n_ell())
            .filter(|&e| other.coeffs[e * n..(e + 1) * n].iter().any(|c| c.norm_sqr() > 0.0))
            .collect();
        for ea in 0..lat.n_ell() {
            let ra = &self.coeffs[ea * n..(ea + 1) * n];
            if ra.iter().all(|c| c.norm_sqr() == 0.0) {
                continue;
            }
            for &eb in &nz_b {
                let sum: Vec<i64> = ells[ea].iter().zip(&ells[eb]).map(|(a, b)| a + b).collect();
                let Some(ec) = lat.ell_index(&sum) else { continue };
                let rb = &other.coeffs[eb * n..(eb + 1) * n];
                for (ia, ca) in ra.iter().enumerate() {
                    if ca.norm_sqr() == 0.0 {
                        continue;
                    }
                    let ja = ia as i64 - jj;
                    let lo = (-jj - ja).max(-jj);
                    let hi = (jj - ja).min(jj);
                    for jb in lo..=hi {
                        out[ec * n + (ja + jb + jj) as usize] += ca * rb[(jb + jj) as usize];
                    }
                }
            }
        }
        let mut f = TorusFunction { lattice: lat, coeffs: out, reality: false };
        f.reality = if self.reality && other.reality { true } else { f.scan_reality() };
        Ok(f)
    }

    /// The l = 0 slice and whether it vanishes to 1e-14.
    pub fn phi_average(&self) -> (TorusFunction, bool) {
        let lat = self.lattice;
        let z = lat.zero_ell();
        let n = lat.n_space();
        let mut out = TorusFunction::zeros(lat);
        out.coeffs[z * n..(z + 1) * n].copy_from_slice(&self.coeffs[z * n..(z + 1) * n]);
        out.reality = out.scan_reality();
        let vanishes = out.coeffs.iter().all(|c| c.norm() <= 1e-14);
        (out, vanishes)
    }

    pub fn scale(&self, a: C64) -> TorusFunction {
        let coeffs = self.coeffs.iter().map(|c| c * a).collect();
        let mut f = TorusFunction { lattice: self.lattice, coeffs, reality: false };
        f.reality = f.scan_reality();
        f
    }

    pub fn sub(&self, other: &TorusFunction) -> Result<TorusFunction> {
        if self.lattice != other.lattice {
            return Err(Error::LatticeMismatch(format!("{:?} vs {:?}", self.lattice, other.lattice)));
        }
        let coeffs = self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a - b).collect();
        TorusFunction::new(self.lattice, coeffs)
    }

    pub fn add(&self, other: &TorusFunction) -> Result<TorusFunction> {
        self.sub(&other.scale(C64::new(-1.0, 0.0)))
    }

    /// Point value u(phi, x).
    pub fn eval(&self, phi: &[f64], x: f64) -> C64 {
        let lat = &self.lattice;
        let mut acc = C64::new(0.0, 0.0);
        for e in 0..lat.n_ell() {
            let ell = lat.ell_at(e);
            let th: f64 = ell.iter().zip(phi).map(|(&l, p)| l as f64 * p).sum();
            for j in -(lat.j as i64)..=lat.j as i64 {
                let c = self.coeffs[lat.index(e, j)];
                if c.norm_sqr() > 0.0 {
                    acc += c * C64::from_polar(1.0, th + j as f64 * x);
                }
            }
        }
        acc
    }

    /// Values of the l = 0 slice at x_k = 2 pi k / n.
    pub fn spatial_grid(&self, n: usize) -> Vec<C64> {
        spatial_to_grid(&self.spatial_coeffs(), n)
    }

    /// Serialize as {nu, L, J, reality, coeffs: [[l.., j, re, im], ..]} over nonzero entries.
    pub fn to_json(&self) -> serde_json::Value {
        let lat = &self.lattice;
        let mut rows = Vec::new();
        for e in 0..lat.n_ell() {
            let ell = lat.ell_at(e);
            for j in -(lat.j as i64)..=lat.j as i64 {
                let c = self.coeffs[lat.index(e, j)];
                if c.norm_sqr() > 0.0 {
                    let mut row: Vec<f64> = ell.iter().map(|&l| l as f64).collect();
                    row.extend([j as f64, c.re, c.im]);
                    rows.push(row);
                }
            }
        }
        serde_json::json!({"nu": lat.nu, "L": lat.l, "J": lat.j, "reality": self.reality, "coeffs": rows})
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let get = |k: &str| {
            v.get(k)
                .and_then(|x| x.as_u64())
                .map(|x| x as usize)
                .ok_or_else(|| Error::Config(format!("missing field {k}")))
        };
        let lat = Lattice::new(get("nu")?, get("L")?, get("J")?)?;
        let rows = v
            .get("coeffs")
            .and_then(|c| c.as_array())
            .ok_or_else(|| Error::Config("missing coeffs".into()))?;
        let mut modes = Vec::with_capacity(rows.len());
        for r in rows {
            let r: Vec<f64> = serde_json::from_value(r.clone())?;
            if r.len() != lat.nu + 3 {
                return Err(Error::Config(format!("coefficient row of length {}", r.len())));
            }
            let ell: Vec<i64> = r[..lat.nu].iter().map(|&x| x as i64).collect();
            let j = r[lat.nu] as i64;
            if j.unsigned_abs() as usize > lat.j || lat.ell_index(&ell).is_none() {
                return Err(Error::Lattice(format!("mode ({ell:?}, {j}) outside the box")));
            }
            modes.push((ell, j, C64::new(r[lat.nu + 1], r[lat.nu + 2])));
        }
        Ok(Self::from_modes(lat, &modes))
    }
}

/// Spatial coefficients (j = -J..=J) to grid values on n >= 2J+1 points.
pub fn spatial_to_grid(c: &[C64], n: usize) -> Vec<C64> {
    let jj = (c.len() / 2) as i64;
    (0..n)
        .map(|k| {
            let x = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            c.iter()
                .enumerate()
                .map(|(i, &a)| a * C64::from_polar(1.0, (i as i64 - jj) as f64 * x))
                .sum()
        })
        .collect()
}

/// Grid values on n points back to coefficients j = -J..=J.
pub fn grid_to_spatial(v: &[C64], jmax: usize) -> Vec<C64> {
    let n = v.len();
    (-(jmax as i64)..=jmax as i64)
        .map(|j| {
            v.iter()
                .enumerate()
                .map(|(k, &a)| a * C64::from_polar(1.0, -2.0 * std::f64::consts::PI * (j * k as i64) as f64 / n as f64))
                .sum::<C64>()
                / n as f64
        })
        .collect()
}
