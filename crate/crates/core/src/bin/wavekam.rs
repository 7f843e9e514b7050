use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use wavekam::config::RunConfig;
use wavekam::potentials::{DriveSpec, PotentialSpec};
use wavekam::suites::{emit_report, render, run_experiment, Stage};

/// KAM reducibility workbench for fast quasi-periodically driven wave equations on the circle.
#[derive(Parser)]
#[command(name = "wavekam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// LS against dense eigenvalues and eigenfunction residuals.
    Spectrum(Overrides),
    /// Weighted localization certificates of the eigenfunctions.
    Craigwayne(Overrides),
    /// Symbol-built powers of L_q against the spectral calculus.
    PsdoAudit(Overrides),
    /// Magnus transform and the M-scaling of delta^(0).
    Magnus(Overrides),
    /// KAM iteration, convergence checks and final eigenvalues.
    Kam(Overrides),
    /// Monte-Carlo measure of the excluded frequencies.
    Measure(Overrides),
    /// Time integration: Sobolev band, Floquet decomposition, resonance.
    Evolve(Overrides),
    /// Every stage, including the algebra invariants.
    All(Overrides),
}

/// Flags mirror the fields of the JSON run configuration and override it.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// JSON run configuration; the bundled paper toy when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for manifest.json and the tables.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    nu: Option<usize>,
    #[arg(long = "L")]
    l: Option<usize>,
    #[arg(long = "J")]
    j: Option<usize>,
    #[arg(long = "M")]
    m: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    tau0: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "N0")]
    n0: Option<f64>,
    #[arg(long)]
    p_max: Option<usize>,
    /// Potential q(x) as a TorusFunction JSON file.
    #[arg(long)]
    q_file: Option<String>,
    /// Driving V(phi, x) as a TorusFunction JSON file.
    #[arg(long)]
    v_file: Option<String>,
    /// Values of M for the scaling sweeps.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<f64>>,
    /// Values of gamma for the measure sweep.
    #[arg(long, value_delimiter = ',')]
    gamma_sweep: Option<Vec<f64>>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self) -> wavekam::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::paper_toy(),
        };
        if let Some(x) = self.nu {
            c.lattice.nu = x;
            c.stages.sample_lattice.nu = x;
        }
        if let Some(x) = self.l {
            c.lattice.l = x;
        }
        if let Some(x) = self.j {
            c.lattice.j = x;
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(x) = self.$f { c.$f = x; })* };
        }
        set!(m, gamma, gamma0, tau, tau0, alpha, n0, p_max, samples, seed);
        if let Some(p) = &self.q_file {
            c.q = PotentialSpec::File { path: p.clone() };
        }
        if let Some(p) = &self.v_file {
            c.v = DriveSpec::File { path: p.clone() };
        }
        if let Some(s) = &self.sweep {
            c.sweeps.m = s.clone();
        }
        if let Some(s) = &self.gamma_sweep {
            c.sweeps.gamma = s.clone();
        }
        if let Some(o) = &self.out {
            c.output_dir = Some(o.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (ov, stages) = match cli.command {
        Command::Spectrum(o) => (o, vec![Stage::Spectrum]),
        Command::Craigwayne(o) => (o, vec![Stage::CraigWayne]),
        Command::PsdoAudit(o) => (o, vec![Stage::PsdoAudit]),
        Command::Magnus(o) => (o, vec![Stage::Magnus]),
        Command::Kam(o) => (o, vec![Stage::Kam]),
        Command::Measure(o) => (o, vec![Stage::Measure]),
        Command::Evolve(o) => (o, vec![Stage::Evolve]),
        Command::All(o) => (o, Stage::ALL.to_vec()),
    };
    let run = || -> wavekam::Result<bool> {
        let cfg = ov.apply()?;
        let (manifest, artifacts) = run_experiment(&cfg, &stages)?;
        for s in &manifest.stages {
            print!("{}", render(s));
        }
        if let Some(dir) = &cfg.output_dir {
            emit_report(&manifest, &artifacts, dir)?;
            println!("wrote {}", dir.display());
        }
        Ok(manifest.passed)
    };
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("wavekam: {e}");
            ExitCode::from(2)
        }
    }
}
