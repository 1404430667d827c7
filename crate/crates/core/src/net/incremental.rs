//! Frame-synchronous streaming inference.
