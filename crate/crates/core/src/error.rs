use crate::abacus::Action;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("an abacus needs at least one column")]
    NoColumns,
    #[error("value {value} does not fit in {columns} base-5 columns")]
    Overflow { value: String, columns: usize },
    #[error("action {0:?} is masked in the current state")]
    IllegalAction(Action),
    #[error("episode is finished; call reset before stepping again")]
    EpisodeFinished,
    #[error("no operation keeps the running value in range")]
    Unsatisfiable,
    #[error("partial result would be negative")]
    NegativeResult,
    #[error("carry would leave the abacus at column {0}")]
    Capacity(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("every action is masked")]
    AllMasked,
    #[error("action {0:?} has zero probability under the mask")]
    MaskedAction(Action),
    #[error("non-finite value during training: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid digit '{0}' (base-5 digits are 0..=4)")]
    InvalidDigit(char),
    #[error("failure classification needs a terminal failing step")]
    NotTerminal,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
