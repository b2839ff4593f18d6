//! Zero-resource image-grounded dialog generation at desk scale.
//!
//! The pipeline retrieves a correlated image for a text-only dialog with a
//! two-tower matcher over an exact inner-product index, reads that image's
//! region features and concept tags, and trains a unified transformer that
//! generates the response from `(regions, concepts, context)`.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod detector;
pub mod error;
pub mod generator;
pub mod index;
pub mod matching;
pub mod metrics;
pub mod retriever;

pub use error::{Error, Result};
