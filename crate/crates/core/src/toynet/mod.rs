//! Desk-scale segmentation network, synthetic scenes and training loops.

mod net;
mod scene;
mod train;

pub use net::{pool_backward, ForwardCache, NetDims, ToyNetParams, BLOCK_NAMES, DEFAULT_HIDDEN, INPUT_CHANNELS};
pub use scene::{gen_scene, training_labels, PlacedShape, Scene, SceneSpec, ShapeKind};
pub use train::{argmax_labels, finetune_baseline, finetune_mca, train_closed, Sample, TrainConfig, TrainLog};
