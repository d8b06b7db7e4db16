//! From-scratch CNN engine: layers, training, checkpoints.

mod checkpoint;
mod layer;
mod model;
mod pretrain;
mod tensor;
mod train;

pub use checkpoint::{checkpoint_checksum, load_checkpoint, save_checkpoint, MAGIC};
pub use layer::{Layer, LayerKind, LayerSpec, Params};
pub use model::{Architecture, Gradients, Model, Sample};
pub use pretrain::{pretrain_source, PretrainConfig};
pub use tensor::Tensor;
pub use train::{evaluate, train, EpochStats, Evaluation, LrSchedule, TrainConfig, DEFAULT_LEARNING_RATE};
pub(crate) use model::borrow_or_cast;
