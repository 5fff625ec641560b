mod batches;
mod metrics;
mod strategy;
mod trainer;

pub use batches::{BatchStream, StratifiedBatches};
pub use metrics::{compute_metrics, LocationMetric, Metrics};
pub use strategy::{FairnessTerm, Strategy, StrategySpec};
pub use trainer::{
    digest, train, EpochRecord, GlobalTerm, History, ModelCheckpoint, ModelKind, Phase,
    PhysicsRows, TrainConfig, TrainedModel, MODEL_SCHEMA_VERSION,
};
