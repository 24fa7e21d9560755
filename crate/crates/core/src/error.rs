use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A Riccati or moment integration left the bounded region.
    #[error("{system} blew up at t = {t}: |value| = {value:e}")]
    BlowUp { system: &'static str, t: f64, value: f64 },

    #[error("grid mismatch: expected {expected} nodes, found {found}")]
    GridMismatch { expected: usize, found: usize },

    #[error("policy `{policy}` is not adapted to the w1 filtration")]
    NonAdaptedPolicy { policy: String },

    #[error(
        "epsilon ladder inconsistent for `{deviation}`: successive estimates {previous} and {next} \
         differ by more than 10 combined standard errors ({se})"
    )]
    LadderInconsistent {
        deviation: String,
        previous: f64,
        next: f64,
        se: f64,
    },

    #[error("Picard iteration did not converge after {iterations} iterations (last change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },

    #[error("regression basis is numerically singular at node {node}")]
    RegressionSingular { node: usize },

    #[error("control leaves the admissible domain of player {player}: {value} not in [{lower}, {upper}]")]
    InadmissibleControl {
        player: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
