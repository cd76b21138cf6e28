//! Sequence classification for proprioceptive terrain sensing: gated
//! recurrent cells built from first principles, variable-length masking,
//! BPTT training, k-fold evaluation, semi-supervised pretraining, and
//! hidden-state PCA analysis.

pub mod analysis;
pub mod cells;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod grad;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod sequence;
pub mod train;

pub use error::{Error, Result};
