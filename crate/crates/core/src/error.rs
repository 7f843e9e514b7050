use thiserror::Error;

/// Errors raised across the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    Lattice(String),
    #[error("lattice mismatch: {0}")]
    LatticeMismatch(String),
    #[error("negative regularity s = {0}")]
    NegativeRegularity(f64),
    #[error("potential must be real-valued")]
    ComplexPotential,
    #[error("spectrum of L_q is not positive (min eigenvalue {0:.6e}); inf spec(-d_xx + q) > 0 is required")]
    NonPositiveSpectrum(f64),
    #[error("spectral parameter {lambda} outside U_n = {{|lambda - n^2| <= n/2}} for n = {n}")]
    OutsideUn { n: usize, lambda: f64 },
    #[error("admissibility violated: |q|_s = {norm:.4e} > n/(2 C~_s) = {bound:.4e}")]
    Admissibility { norm: f64, bound: f64 },
    #[error("Neumann series does not contract (increment ratio {0:.3})")]
    NeumannDivergence(f64),
    #[error("roots escaped the disc D_n for n = {n}: {detail}")]
    RootEscape { n: usize, detail: String },
    #[error("structure check failed: {0}")]
    Structure(String),
    #[error("cutoff mismatch: {0}")]
    CutoffMismatch(String),
    #[error("symbol sampled up to |xi| <= {xi_max} but quantization needs {needed}")]
    SymbolRange { xi_max: usize, needed: usize },
    #[error("derivative depth {have} exceeded (needed {need})")]
    Depth { have: usize, need: usize },
    #[error("ellipticity violated: {0}")]
    Ellipticity(String),
    #[error("contour intersects spectrum: {0}")]
    Contour(String),
    #[error("Lie series diverges (term ratio {0:.3}); generator too large")]
    LieDivergence(f64),
    #[error("singular block operator (min |eigenvalue| = {0:.3e})")]
    Singular(f64),
    #[error("nonzero phi-average in the driving (max |coeff| = {0:.3e})")]
    NonzeroAverage(f64),
    #[error("smallness condition violated: {0}")]
    Smallness(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("time step too coarse: dt = {dt:.3e} > {limit:.3e}")]
    TimeStep { dt: f64, limit: f64 },
    #[error("frequency mismatch between runs")]
    FrequencyMismatch,
    #[error("too few samples: {0} < 100")]
    TooFewSamples(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
