//! Evaluation and persistence: checkpoints, retrieval/semantic metrics,
//! attention-map export and the word-substitution probe.

pub mod checkpoint;
pub mod eval;
pub mod export;
pub mod probe;
