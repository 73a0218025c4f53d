use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("byte count overflows u64 ({0})")]
    Overflow(&'static str),

    #[error("cache has {actual} layers but the model has {expected}")]
    LayerMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("layer {layer}, token {token}: {source}")]
    TraceEntry {
        layer: usize,
        token: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("trace format: {0}")]
    Format(String),

    #[error("truncated trace: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("unsupported model: {0}")]
    Unsupported(String),

    #[error("cannot reallocate: every layer is in g3, so no layer can receive the freed budget")]
    Allocation,

    #[error("layer {layer}: budget {budget} is below the policy floor {floor}")]
    BudgetFloor {
        layer: usize,
        budget: usize,
        floor: usize,
    },

    #[error("attention row: {0}")]
    AttentionRow(String),

    #[error("context overflow: {needed} tokens exceed max_context {max_context}")]
    ContextOverflow { needed: usize, max_context: usize },

    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Budget/allocation violations, as opposed to malformed input.
    pub fn is_constraint(&self) -> bool {
        matches!(
            self,
            Error::Allocation
                | Error::BudgetFloor { .. }
                | Error::ContextOverflow { .. }
                | Error::Unsupported(_)
        )
    }

    pub(crate) fn at(self, layer: usize, token: usize) -> Error {
        Error::TraceEntry {
            layer,
            token,
            source: Box::new(self),
        }
    }
}
