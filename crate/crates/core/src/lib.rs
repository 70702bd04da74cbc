//! Spectral conditioning before low-rank compression.
//!
//! The crate trains small feed-forward classifiers, reshapes their weight
//! spectra with a rank surrogate on activation-whitened weights (prehab),
//! compresses them with SVD-family factorizations (surgery) and fine-tunes
//! the factors (rehab). [`pipeline`] ties the stages into seeded,
//! checkpointed experiment grids.

pub mod calibration;
pub mod checkpoint;
pub mod compressors;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod surrogates;
pub mod trainer;
