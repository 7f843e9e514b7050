//! Named potential and driving families used by configs and examples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::{Lattice, TorusFunction, C64};

const ZERO: C64 = C64::new(0.0, 0.0);

/// q(x) = c on modes |j| <= jq.
pub fn constant(nu: usize, c: f64, jq: usize) -> TorusFunction {
    let mut v = vec![ZERO; 2 * jq + 1];
    v[jq] = C64::new(c, 0.0);
    TorusFunction::spatial(nu, &v).expect("jq >= 1")
}

/// q(x) = mean + amp cos x.
pub fn cosine(nu: usize, amp: f64, mean: f64, jq: usize) -> TorusFunction {
    let mut v = vec![ZERO; 2 * jq + 1];
    v[jq] = C64::new(mean, 0.0);
    v[jq - 1] = C64::new(amp / 2.0, 0.0);
    v[jq + 1] = C64::new(amp / 2.0, 0.0);
    TorusFunction::spatial(nu, &v).expect("jq >= 1")
}

/// Real zero-mean q with |q^(j)| ~ <j>^{-decay}, scaled to |q|_{H^4} = norm.
pub fn smooth_random(nu: usize, jq: usize, decay: f64, norm: f64, seed: u64) -> TorusFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![ZERO; 2 * jq + 1];
    for j in 1..=jq {
        let env = (j as f64).powf(-decay);
        let c = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * env;
        v[jq + j] = c;
        v[jq - j] = c.conj();
    }
    let f = TorusFunction::spatial(nu, &v).expect("jq >= 1");
    let s = f.sobolev_norm(4.0).expect("s >= 0");
    f.scale(C64::new(norm / s, 0.0))
}

/// v(phi, x) = amp cos(phi_1) cos(x).
pub fn cos_phi_cos_x(lat: Lattice, amp: f64) -> TorusFunction {
    let h = C64::new(amp / 4.0, 0.0);
    let mut e1 = vec![0i64; lat.nu];
    e1[0] = 1;
    let m1: Vec<i64> = e1.iter().map(|x| -x).collect();
    TorusFunction::from_modes(lat, &[(e1.clone(), 1, h), (e1, -1, h), (m1.clone(), 1, h), (m1, -1, h)])
}

/// Real driving with zero phi-average and coefficients ~ <l,j>^{-decay}.
pub fn smooth_random_drive(lat: Lattice, decay: f64, amp: f64, seed: u64) -> TorusFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = vec![ZERO; lat.len()];
    let z = lat.zero_ell();
    for e in 0..lat.n_ell() {
        let ne = lat.neg_ell(e);
        if e == z || e > ne {
            continue;
        }
        let ell = lat.ell_at(e);
        for j in -(lat.j as i64)..=lat.j as i64 {
            let env = crate::harmonics::bracket(&ell, j).powf(-decay);
            let a = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * (amp * env);
            c[lat.index(e, j)] = a;
            c[lat.index(ne, -j)] = a.conj();
        }
    }
    TorusFunction::new(lat, c).expect("sized to lattice")
}

/// Config-level description of a potential q(x).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum PotentialSpec {
    Constant { value: f64 },
    Cosine { amp: f64, #[serde(default)] mean: f64 },
    SmoothRandom { decay: f64, norm: f64, #[serde(default)] mean: f64, seed: u64, modes: usize },
    File { path: String },
}

impl PotentialSpec {
    pub fn build(&self, nu: usize) -> Result<TorusFunction> {
        match self {
            PotentialSpec::Constant { value } => Ok(constant(nu, *value, 2)),
            PotentialSpec::Cosine { amp, mean } => Ok(cosine(nu, *amp, *mean, 2)),
            PotentialSpec::SmoothRandom { decay, norm, mean, seed, modes } => {
                let m = (*modes).max(1);
                smooth_random(nu, m, *decay, *norm, *seed).add(&constant(nu, *mean, m))
            }
            PotentialSpec::File { path } => {
                let f = load(path)?;
                if !f.is_spatial() {
                    return Err(Error::Config(format!("{path}: potential q must be x-only")));
                }
                TorusFunction::spatial(nu, &f.spatial_coeffs())
            }
        }
    }
}

/// Config-level description of the driving V(phi, x).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum DriveSpec {
    Zero,
    CosPhiCosX { amp: f64 },
    SmoothRandom { decay: f64, amp: f64, seed: u64 },
    File { path: String },
}

impl DriveSpec {
    pub fn build(&self, lat: Lattice) -> Result<TorusFunction> {
        match self {
            DriveSpec::Zero => Ok(TorusFunction::zeros(lat)),
            DriveSpec::CosPhiCosX { amp } => Ok(cos_phi_cos_x(lat, *amp)),
            DriveSpec::SmoothRandom { decay, amp, seed } => Ok(smooth_random_drive(lat, *decay, *amp, *seed)),
            DriveSpec::File { path } => {
                let f = load(path)?;
                if f.lattice().nu != lat.nu {
                    return Err(Error::Config(format!("{path}: nu = {} but config has {}", f.lattice().nu, lat.nu)));
                }
                // Re-embed on the run lattice.
                let fl = *f.lattice();
                let mut modes = Vec::new();
                for e in 0..fl.n_ell() {
                    let ell = fl.ell_at(e);
                    for j in -(fl.j as i64)..=fl.j as i64 {
                        let c = f.coeff(&ell, j);
                        if c.norm_sqr() > 0.0 {
                            modes.push((ell.clone(), j, c));
                        }
                    }
                }
                Ok(TorusFunction::from_modes(lat, &modes))
            }
        }
    }
}

/// Read a TorusFunction from its JSON form.
pub fn load(path: &str) -> Result<TorusFunction> {
    let text = std::fs::read_to_string(path)?;
    TorusFunction::from_json(&serde_json::from_str(&text)?)
}
