//! Synthetic two-domain benchmark and the one-stage training loop.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod objective;
pub mod scene;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use model::{ConceptSpace, Head, Model, ModelShape};
pub use objective::{LossTerms, Variant};
pub use scene::{generate_scene, Domain, GeneratorConfig, SyntheticScene, World};
pub use train::{Dataset, EvalReport, TraceRecord, Trainer};
