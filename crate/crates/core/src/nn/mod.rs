//! The network engine.

pub mod checkpoint;
pub(crate) mod layers;
pub mod model;
pub mod optim;
pub mod spec;
pub mod train;

pub use model::{build_model, Model, PassOptions, PassOutput, PointHook, PointInfo};
pub use optim::{Optimizer, OptimizerKind};
pub use spec::{LayerKind, ModelSpec};
pub use train::{evaluate, evaluate_with, train, Evaluation, TrainConfig, TrainReport};
