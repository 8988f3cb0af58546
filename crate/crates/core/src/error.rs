use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("matrix is not symmetric: max |a_ij - a_ji| = {max_asym:.3e} exceeds {tol:.3e} * scale")]
    NotSymmetric { max_asym: f64, tol: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {offdiag:.3e})")]
    EigNoConvergence { sweeps: usize, offdiag: f64 },

    #[error("quadrature did not converge after {refinements} refinements (last estimate {last:.6e})")]
    QuadNoConvergence { refinements: usize, last: f64 },

    #[error("ODE state blew up (NaN/Inf) at t = {t}")]
    OdeBlowUp { t: f64 },

    #[error("power-law fit needs at least 2 points, got {0}")]
    TooFewPoints(usize),

    #[error("power-law fit requires strictly positive coordinates, found ({x}, {y})")]
    NonPositivePoint { x: f64, y: f64 },

    #[error("bracket [{lo}, {hi}] does not straddle a sign change: f(lo) = {flo:.3e}, f(hi) = {fhi:.3e}")]
    NoSignChange { lo: f64, hi: f64, flo: f64, fhi: f64 },

    #[error("bad IDX magic in {path}: expected {expected:#010x}, got {got:#010x}")]
    IdxBadMagic { path: PathBuf, expected: u32, got: u32 },

    #[error("truncated IDX file {path}: expected {expected} bytes, got {got}")]
    IdxTruncated { path: PathBuf, expected: usize, got: usize },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("requested subset of {n} from a dataset of {available}")]
    SubsetTooLarge { n: usize, available: usize },

    #[error("dataset has no integer labels to encode")]
    NoRawLabels,

    #[error("unknown target encoding mode `{0}`")]
    UnknownMode(String),

    #[error("homogeneity checks require a bias-free model")]
    BiasedModel,

    #[error("scale factor must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("mode solution requires k >= 2 and lambda > 0 (got k = {k}, lambda = {lambda}); use the ridge path for k = 1")]
    ModeSolutionDomain { k: u32, lambda: f64 },

    #[error("training loss is monotone on the scanned window; no interior minimum")]
    MonotoneLoss,

    #[error("kernel NTK evaluation over {n} samples exceeds the configured cap of {cap}")]
    KernelCapExceeded { n: usize, cap: usize },

    #[error("training blew up (non-finite update) at step {step}")]
    TrainBlowUp { step: usize },

    #[error("no accuracy peak within the probe budget; try a larger probe L2 coefficient")]
    NoPeakInBudget,

    #[error("time-unit mismatch: coefficient measured in {c_units}, budget given in {t_units}")]
    UnitMismatch { c_units: &'static str, t_units: &'static str },

    #[error("sweep needs at least {needed} successful cells at a shared learning rate, found {found}")]
    InsufficientCells { needed: usize, found: usize },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
