use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure mode of the library.
///
/// `InvalidParameter` is the only variant caused by bad input alone; the
/// command-line front end maps it to a schema error and everything else to a
/// runtime abort.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("non-finite value in {context}{}", step_suffix(*.step))]
    NonFinite { context: String, step: Option<usize> },

    #[error("{0} did not converge")]
    NoConvergence(String),

    #[error("operation not available for model {model}: {reason}")]
    Unsupported { model: String, reason: String },

    #[error("hypothesis {inequality} violated on sampled fields (worst relative margin {margin:.3e})")]
    HypothesisViolated { inequality: String, margin: f64 },

    #[error("weight selection infeasible: {0}")]
    Infeasible(String),

    #[error("fermion range violation at step {step}: f in [{min:.6e}, {max:.6e}]")]
    FermionRange { step: usize, min: f64, max: f64 },

    #[error("mass drift {drift:.3e} (relative) exceeds tolerance at step {step}")]
    MassDrift { step: usize, drift: f64 },

    #[error("Poisson source has nonzero mean {mean:.3e}")]
    GaugeViolation { mean: f64 },

    #[error("potential C2 size {c2_bound:.3e} exceeds the smallness bound {epsilon:.3e}")]
    PotentialTooLarge { c2_bound: f64, epsilon: f64 },

    #[error("time step {dt:.3e} exceeds the stability bound {bound:.3e} of the collision step")]
    Unstable { dt: f64, bound: f64 },

    #[error("problem size {size} exceeds the dense limit {limit}")]
    TooLarge { size: usize, limit: usize },
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(s) => format!(" at step {s}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
