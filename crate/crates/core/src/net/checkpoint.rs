//! Checkpoint persistence (versioned binary container).
