//! Semantic-guided pixel contrast for domain-adaptive segmentation.
//!
//! The crate bundles the streaming class statistics ([`stats`]), the
//! centroid bank ([`bank`]), the contrastive objectives ([`contrast`]), the
//! self-training stack ([`selftrain`]), segmentation metrics ([`metrics`]),
//! and a synthetic two-domain benchmark with a trainable per-pixel model
//! ([`toymodel`]).

pub mod bank;
pub mod contrast;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod metrics;
pub mod num;
pub mod rng;
pub mod selftrain;
pub mod stats;
pub mod toymodel;

pub use bank::CentroidBank;
pub use contrast::{LossValue, Query, QuerySet, Temperature};
pub use error::{Error, Result};
pub use grid::{FeatureGrid, LabelGrid, IGNORE};
pub use num::Matrix;
pub use rng::Rng;
pub use stats::{ClassStats, Prototypes};
