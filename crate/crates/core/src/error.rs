use thiserror::Error;
use typespan_numcore::NumError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("sequence of {len} tokens exceeds the encoder limit of {limit}")]
    SequenceTooLong { len: usize, limit: usize },
    #[error("span ({start}, {end}) has start after end")]
    SpanOrder { start: usize, end: usize },
    #[error("span width {width} outside width table of {rows} rows")]
    SpanWidth { width: usize, rows: usize },
    #[error("mention ({start}, {end}, type {type_id}) invalid for {n_tokens} tokens")]
    InvalidMention {
        start: usize,
        end: usize,
        type_id: usize,
        n_tokens: usize,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("invalid document `{doc_id}`: {message}")]
    InvalidDocument { doc_id: String, message: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
