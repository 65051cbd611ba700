//! Text-driven talking-face synthesis at desk scale.
//!
//! Words are embedded, translated by an LSTM encoder/decoder into per-frame
//! facial action units plus head pose (AU+PS), and rendered to frames by a
//! conditional GAN that also sees the average landmark layout and the
//! previous `n` frames. A deterministic cartoon renderer supplies exact
//! ground truth for every stage.

pub mod cli;
pub mod cond;
pub mod config;
pub mod domain;
pub mod error;
pub mod gan;
pub mod oracle;
pub mod seq2au;
pub mod text;
pub mod train;

pub use config::PipelineConfig;
pub use error::{Error, Result};
