//! Crate-wide error type.

use thiserror::Error;

use crate::token::Token;
use crate::tree::NodeId;

pub type Result<T, E = AparError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AparError {
    /// An operation was called in a state its protocol forbids (fork without
    /// `[Fork]`, append after `[EOS]`, double release, ...).
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// The block pool cannot satisfy an allocation.
    #[error("KV block pool exhausted: requested {requested} block(s), {free} free")]
    Capacity { requested: usize, free: usize },

    /// A paragraph tree is malformed or refers to a slice that does not exist.
    #[error("structural error at node {node}: {reason}")]
    Structural { node: NodeId, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A scripted model was driven with a context it does not recognise.
    #[error("oracle mismatch at context position {position}: expected {expected}, found {found}")]
    OracleMismatch {
        position: usize,
        expected: String,
        found: Token,
    },

    /// The language model produced a symbol outside the vocabulary.
    #[error("model emitted invalid token {0}")]
    InvalidToken(Token),

    #[error("request {request} cannot be scheduled: {reason}")]
    Unschedulable { request: usize, reason: String },
}

impl AparError {
    pub fn protocol(msg: impl Into<String>) -> Self {
        AparError::Protocol(msg.into())
    }

    pub fn structural(node: NodeId, reason: impl Into<String>) -> Self {
        AparError::Structural {
            node,
            reason: reason.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        AparError::InvalidInput(msg.into())
    }

    pub fn is_capacity(&self) -> bool {
        matches!(self, AparError::Capacity { .. })
    }
}
