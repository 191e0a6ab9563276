use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure surfaced by the library. Each variant maps to a stable
/// machine-readable code (see [`Error::code`]) that the CLI prints on exit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("note onset {onset_s}s lies outside the {duration_s}s segment")]
    OutOfSegment { onset_s: f64, duration_s: f64 },

    #[error("malformed token sequence at position {position}: {reason}")]
    Malformed { position: usize, reason: String },

    #[error("token sequence ends without <eos>")]
    Truncated,

    #[error("pitch {0} is outside the 88-key range 21..=108")]
    PitchRange(u8),

    #[error("invalid note: {0}")]
    InvalidNote(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence length {len} exceeds the configured maximum {max}")]
    Length { len: usize, max: usize },

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("stage models disagree: {0}")]
    StageMismatch(String),

    #[error("decoding exceeded the maximum of {max} tokens")]
    DecodeOverflow { max: usize },

    #[error("cannot parse MIDI file: {0}")]
    MidiParse(String),

    #[error("unsupported MIDI file: {0}")]
    MidiUnsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid data file: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::OutOfSegment { .. } => "E_OUT_OF_SEGMENT",
            Error::Malformed { .. } => "E_MALFORMED",
            Error::Truncated => "E_TRUNCATED",
            Error::PitchRange(_) => "E_PITCH_RANGE",
            Error::InvalidNote(_) => "E_INVALID_NOTE",
            Error::Shape(_) => "E_SHAPE",
            Error::Length { .. } => "E_LENGTH",
            Error::EmptyMask => "E_EMPTY_MASK",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::StageMismatch(_) => "E_STAGE_MISMATCH",
            Error::DecodeOverflow { .. } => "E_DECODE_OVERFLOW",
            Error::MidiParse(_) => "E_MIDI_PARSE",
            Error::MidiUnsupported(_) => "E_MIDI_UNSUPPORTED",
            Error::Config(_) => "E_CONFIG",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Data(_) => "E_DATA",
            Error::Io(_) => "E_IO",
            Error::Tensor(_) => "E_TENSOR",
        }
    }

    pub(crate) fn malformed(position: usize, reason: impl Into<String>) -> Self {
        Error::Malformed {
            position,
            reason: reason.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<safetensors::SafeTensorError> for Error {
    fn from(e: safetensors::SafeTensorError) -> Self {
        Error::Checkpoint(e.to_string())
    }
}
