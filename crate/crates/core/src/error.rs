use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("skeleton graph is disconnected; unreachable pairs: {}", format_pairs(.unreachable))]
    Topology { unreachable: Vec<(usize, usize)> },

    #[error("degenerate partition: hyperedge column {column} is empty")]
    DegeneratePartition { column: usize },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}, step {step} (loss = {loss})")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

fn format_pairs(pairs: &[(usize, usize)]) -> String {
    const SHOWN: usize = 16;
    let mut s = pairs
        .iter()
        .take(SHOWN)
        .map(|(i, j)| format!("({i},{j})"))
        .collect::<Vec<_>>()
        .join(" ");
    if pairs.len() > SHOWN {
        s.push_str(&format!(" ... and {} more", pairs.len() - SHOWN));
    }
    s
}
