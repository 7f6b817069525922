//! Locally trained blocks and the network that chains them through frozen
//! spiking layers.

mod block;
mod goodness;
mod network;

pub use block::{
    block_backward, block_forward, block_gradients, block_loss, block_train_step, encoding_forward, hidden_forward,
    BlockCache, BlockEval, BlockGrads, BlockKind, BlockOptions, StepMetrics, StepOutput, TrainingBlock,
};
pub use goodness::{
    goodness, goodness_backward, local_loss, GoodnessDivisor, GoodnessMatrix, LossMode, LossOutput, GOODNESS_EPS,
};
pub use network::{
    accuracy, class_scores, evaluate, fit, network_forward, predict, Architecture, EpochMetrics, FitConfig, History,
    Network, NetworkDescriptor, NetworkOutput, INFERENCE_BATCH,
};
