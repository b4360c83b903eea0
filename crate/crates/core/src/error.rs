use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug)]
pub enum Error {
    /// Network data violates a structural invariant (slack count, radiality, impedances).
    InvalidNetwork(String),
    /// Device placement or rating is inconsistent with the network.
    InvalidDevice(String),
    /// An argument is out of its allowed range.
    InvalidInput(String),
    /// Load or generation profile is malformed or infeasible.
    Profile(String),
    /// Vector or network shape does not match what the receiver expects.
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// A computation produced NaN or infinity.
    NonFinite(String),
    /// Power flow failed where a solution is mandatory (e.g. at episode reset).
    Diverged { iterations: usize, mismatch: f64 },
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidNetwork(msg) => write!(f, "invalid network: {msg}"),
            Error::InvalidDevice(msg) => write!(f, "invalid device: {msg}"),
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::Profile(msg) => write!(f, "profile error: {msg}"),
            Error::ShapeMismatch {
                what,
                expected,
                got,
            } => write!(f, "{what}: expected length {expected}, got {got}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Diverged {
                iterations,
                mismatch,
            } => write!(
                f,
                "power flow did not converge after {iterations} iterations (max mismatch {mismatch:.3e} p.u.)"
            ),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
