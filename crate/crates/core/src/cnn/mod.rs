//! The network engine: topology, parameters, forward/backward passes and SGD.

pub mod engine;
pub mod graph;
pub mod params;
pub mod train;

pub use engine::{backward, backward_with_noise, forward, forward_keep_inputs, predict, BackwardRecord, ForwardCache, LayerCache, LayerGrads};
pub use graph::{lenet, Layer, LayerGraph, NormPlan, NormSpec};
pub use params::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, LayerParams, ParamSet};
pub use train::{apply_update, evaluate, sgd_step, StepEvent, TrainConfig, TrainLog, Trainer, UpdatePlan};
