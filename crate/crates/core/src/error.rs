//! Crate-wide error type.

/// Errors produced by any part of the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid segment for speaker {speaker}: [{start}, {end})")]
    InvalidSegment { speaker: usize, start: f64, end: f64 },
    #[error("segment speaker index {speaker} out of range (speaker count {speaker_count})")]
    SpeakerOutOfRange { speaker: usize, speaker_count: usize },
    #[error("segment [{start}, {end}) lies outside the session duration {duration}")]
    SegmentOutsideDuration { start: f64, end: f64, duration: f64 },
    #[error("frame rate must be positive, got {0}")]
    InvalidFrameRate(f64),
    #[error("grid has no frames")]
    EmptyGrid,
    #[error("state space too large: {speakers} speakers x {bins} bins (limit {limit} total bits)")]
    StateSpaceTooLarge { speakers: usize, bins: usize, limit: usize },
    #[error("bin duration {duration} s is not a whole positive number of frames at {frame_rate} Hz")]
    BinNotWholeFrames { duration: f64, frame_rate: f64 },
    #[error("state index {0} out of range (state count {1})")]
    StateOutOfRange(u32, usize),
    #[error("frame {frame} needs future through frame {needed} but only {available} frames exist")]
    InsufficientFuture { frame: usize, needed: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("wav {path}: {message}")]
    Wav { path: String, message: String },
    #[error("annotation {path}:{line}: {message}")]
    Annotation { path: String, line: usize, message: String },
    #[error("manifest {path}:{line}: {message}")]
    Manifest { path: String, line: usize, message: String },
    #[error("session ingestion: {0}")]
    Ingestion(String),
    #[error("too few triad groups: {0} (every split needs at least one)")]
    TooFewGroups(usize),
    #[error("infeasible synthesis parameters: {0}")]
    InfeasibleParams(String),
    #[error("audio shorter than one analysis window")]
    AudioTooShort,
    #[error("context length {0} exceeds model limit {1}")]
    ContextExceeded(usize, usize),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {0}")]
    Diverged(usize),
    #[error("evaluation: {0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, Error>;
