use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("input size {h}x{w} is not divisible by 32; pad to {pad_h}x{pad_w}")]
    Indivisible {
        h: usize,
        w: usize,
        pad_h: usize,
        pad_w: usize,
    },

    #[error("{what} must be binary (values in {{0, 1}})")]
    NotBinary { what: &'static str },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("text row {row} has no non-padding token")]
    AllPadding { row: usize },

    #[error("expected the stride-{expected} level, got stride {got}")]
    WrongStride { expected: usize, got: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("scene generation failed for seed {seed} after {attempts} attempts")]
    Unsatisfiable { seed: u64, attempts: usize },
}

impl Error {
    pub fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
