//! Audio-only context extension for rotary position embeddings.
//!
//! The crate is organised bottom-up:
//!
//! * [`rope`] builds per-pair rotation frequencies and applies rotations at
//!   real-valued positions.
//! * [`layout`] describes a token sequence as text/audio segments and does
//!   chunked audio token accounting.
//! * [`extension`] turns an extension method (vanilla, whole-context PI and
//!   YaRN, audio-only PI and YaRN, virtual-length training windows) into a
//!   [`PositionPlan`]: per-token positions for the interpolated and
//!   extrapolated frequency groups plus per-token rotation magnitudes.
//! * [`attention`] is a reference single-head attention kernel that consumes
//!   plans, alongside an explicit-temperature twin used as an oracle.
//! * [`toymodel`] is a tiny transformer with hand-written backpropagation used
//!   to compare vanilla and virtual-length training.
//! * [`synthtask`] generates the seeded long-audio retrieval task the toy model
//!   is trained and evaluated on.

pub mod attention;
pub mod error;
pub mod extension;
pub mod layout;
pub mod matrix;
pub mod rope;
pub mod synthtask;
pub mod toymodel;

pub use error::{Error, Result};
pub use extension::{ExtensionConfig, Method, PositionPlan, YarnParams};
pub use layout::{ChunkingConfig, Modality, Segment, SequenceLayout};
pub use matrix::Matrix;
pub use rope::{FrequencyTable, RotationSpec};
