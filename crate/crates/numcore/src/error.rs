use thiserror::Error;

pub type Result<T> = std::result::Result<T, NumError>;

#[derive(Debug, Error)]
pub enum NumError {
    /// A caller broke an operation's precondition (shapes, ranges, arity).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value showed up while evaluating or differentiating a node.
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("malformed tensor container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(NumError::Contract(msg.into()))
}
