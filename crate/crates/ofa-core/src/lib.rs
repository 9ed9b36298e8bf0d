//! Object-focused attention at desk scale: a reverse-mode tensor engine, a
//! mini vision transformer whose attention is pulled toward intra-object
//! patches by an auxiliary loss, plus the synthetic data, corruption, and
//! measurement machinery around it.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod ofa;
pub mod pam;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
