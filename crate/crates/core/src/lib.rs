//! Online any-point tracking with a trainable desk-scale model.
//!
//! Given a video and query points on their start frames, the tracker emits
//! per-frame positions and visibility scores. Each point carries a frozen
//! content feature and spatial context grid from its start frame; per frame,
//! a transformer decoder refines the point through visibility-aware temporal
//! attention over all past frames, context-aware cross-attention with an
//! attention-based position update, self-attention across points, and a
//! feed-forward block. A scene-cut detector triggers full-frame global
//! matching to re-establish tracking after hard cuts.
//!
//! Everything is self-contained: a tape-based reverse-mode autodiff engine,
//! a synthetic sprite world with exact ground truth, a two-stage trainer,
//! TAP-style metrics, and a gradient-check harness.

pub mod autodiff;
pub mod cca;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod error;
pub mod globalmatch;
pub mod metrics;
pub mod model;
pub mod params;
pub mod query;
pub mod render;
pub mod synthworld;
pub mod tensorcore;
pub mod tracker;
pub mod training;
pub mod vlta;

pub use config::AppConfig;
pub use error::{Error, Result};
pub use model::Model;
pub use tracker::{open_session, TrackRecord, TrackerSession};
