use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown {side} `{id}`")]
    UnknownAgent { side: &'static str, id: String },

    #[error("{side} index {index} out of range (have {len})")]
    IndexOutOfRange {
        side: &'static str,
        index: usize,
        len: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("subset too large for exhaustive enumeration: {buyers} buyers x {sellers} sellers (limit {limit})")]
    SubsetTooLarge {
        buyers: usize,
        sellers: usize,
        limit: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("failed to parse market instance: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("invalid market instance:\n{}", format_violations(.0))]
    Invalid(Vec<crate::market_model::Violation>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_violations(violations: &[crate::market_model::Violation]) -> String {
    violations
        .iter()
        .map(|v| format!("  - {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}
