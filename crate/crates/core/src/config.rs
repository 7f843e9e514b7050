//! Run configuration: lattice, potentials, KAM constants, sweeps and output location.

use crate::error::{Error, Result};
use crate::harmonics::Lattice;
use crate::kam::KamParameters;
use crate::melnikov::MelnikovParams;
use crate::potentials::{DriveSpec, PotentialSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const GOLDEN: f64 = 1.618_033_988_749_895;

/// Lists the sweep stages iterate over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweeps {
    #[serde(rename = "M")]
    pub m: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Default for Sweeps {
    fn default() -> Self {
        Self { m: vec![1e2, 1e3, 1e4], gamma: vec![1e-2, 1e-3, 1e-4] }
    }
}

/// Sizes of the stages that do not run on the main lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSizes {
    /// Galerkin cutoff of the Craig-Wayne certificates; n runs up to half of it.
    pub craig_wayne_j: usize,
    /// Spatial cutoff of the functional-calculus audit.
    pub psdo_j: usize,
    /// Lattice of the per-sample work (measure estimate, time integration).
    pub sample_lattice: Lattice,
    /// Angle modes of the Omega_infty test.
    pub l_max: usize,
    /// KAM steps per measure sample.
    pub measure_p_max: usize,
    /// Fraction of measure samples whose pruning is re-checked.
    pub audit_fraction: f64,
}

impl Default for StageSizes {
    fn default() -> Self {
        Self {
            craig_wayne_j: 128,
            psdo_j: 64,
            sample_lattice: Lattice { nu: 1, l: 4, j: 8 },
            l_max: 4,
            measure_p_max: 3,
            audit_fraction: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lattice: Lattice,
    pub q: PotentialSpec,
    pub v: DriveSpec,
    #[serde(rename = "M")]
    pub m: f64,
    /// Frequency vector; golden-ratio multiples of M when absent.
    #[serde(default)]
    pub omega: Option<Vec<f64>>,
    pub gamma: f64,
    pub gamma0: f64,
    pub tau: f64,
    pub tau0: f64,
    pub alpha: f64,
    #[serde(rename = "N0")]
    pub n0: f64,
    pub p_max: usize,
    /// Regularity s of the Craig-Wayne certificates.
    #[serde(default = "default_regularity")]
    pub regularity: f64,
    #[serde(default)]
    pub sweeps: Sweeps,
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub stages: StageSizes,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_regularity() -> f64 {
    4.0
}

impl RunConfig {
    /// nu = 1, q = 1 + cos x, V = cos phi cos x, M = 10^3.
    pub fn paper_toy() -> Self {
        Self {
            lattice: Lattice { nu: 1, l: 4, j: 32 },
            q: PotentialSpec::Cosine { amp: 1.0, mean: 1.0 },
            v: DriveSpec::CosPhiCosX { amp: 1.0 },
            m: 1e3,
            omega: None,
            gamma: 1e-2,
            gamma0: 0.1,
            tau: 3.0,
            tau0: 1.0,
            alpha: 0.5,
            n0: 16.0,
            p_max: 4,
            regularity: 4.0,
            sweeps: Sweeps::default(),
            samples: 400,
            seed: 7,
            stages: StageSizes::default(),
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let lat = self.lattice;
        Lattice::new(lat.nu, lat.l, lat.j)?;
        let sl = self.stages.sample_lattice;
        Lattice::new(sl.nu, sl.l, sl.j)?;
        if sl.nu != lat.nu {
            return Err(Error::Config(format!("sample lattice nu = {} differs from nu = {}", sl.nu, lat.nu)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha = {} must lie in (0, 1)", self.alpha)));
        }
        let tau_min = lat.nu as f64 - 1.0 + self.alpha + self.tau0 / self.alpha;
        if !(self.tau > tau_min) {
            return Err(Error::Config(format!("tau = {} must exceed nu - 1 + alpha + tau0/alpha = {tau_min}", self.tau)));
        }
        if !(self.tau0 > 0.0) {
            return Err(Error::Config(format!("tau0 = {} must be positive", self.tau0)));
        }
        for (name, g) in [("gamma", self.gamma), ("gamma0", self.gamma0)] {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::Config(format!("{name} = {g} must lie in (0, 1)")));
            }
        }
        if let Some(g) = self.sweeps.gamma.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return Err(Error::Config(format!("gamma sweep entry {g} must lie in (0, 1)")));
        }
        if let Some(m) = std::iter::once(&self.m).chain(&self.sweeps.m).find(|m| !(**m > 0.0)) {
            return Err(Error::Config(format!("M = {m} must be positive")));
        }
        if !(self.n0 >= 1.0) {
            return Err(Error::Config(format!("N0 = {} must be at least 1", self.n0)));
        }
        if self.regularity < lat.s0() {
            return Err(Error::Config(format!("regularity {} below s0 = {}", self.regularity, lat.s0())));
        }
        if let Some(w) = &self.omega {
            if w.len() != lat.nu {
                return Err(Error::Config(format!("omega has {} entries for nu = {}", w.len(), lat.nu)));
            }
        }
        if self.stages.craig_wayne_j < 2 || self.stages.psdo_j < 2 || self.stages.l_max == 0 {
            return Err(Error::Config("stage sizes must be positive".into()));
        }
        Ok(())
    }

    /// omega at a given M: the configured vector rescaled by M, or the direction (phi, phi^2, ...) at length phi M.
    pub fn omega_at(&self, m: f64) -> Vec<f64> {
        match &self.omega {
            Some(w) => w.iter().map(|x| x * m / self.m).collect(),
            None => {
                let dir: Vec<f64> = (0..self.lattice.nu).map(|k| GOLDEN.powi(k as i32 + 1)).collect();
                let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                dir.iter().map(|x| x / n * GOLDEN * m).collect()
            }
        }
    }

    pub fn kam_parameters(&self) -> KamParameters {
        KamParameters { tau: self.tau, gamma: self.gamma, alpha: self.alpha, n0: self.n0, p_max: self.p_max, ..KamParameters::default() }
    }

    pub fn melnikov_parameters(&self, m_sq: f64) -> MelnikovParams {
        MelnikovParams {
            nu: self.lattice.nu,
            tau: self.tau,
            tau0: self.tau0,
            alpha: self.alpha,
            l_max: self.stages.l_max,
            ..MelnikovParams::new(self.m, self.gamma, m_sq)
        }
    }
}
