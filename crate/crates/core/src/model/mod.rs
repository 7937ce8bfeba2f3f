//! The enhancement network and its training loop.

mod checkpoint;
mod network;
mod train;

pub use checkpoint::{
    decode_params, encode_params, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use network::{Dense, ForwardCache, ForwardOutput, ModelConfig, ModelParams};
pub use train::{
    batch_gradient, crop_or_pad, draw_snr_shift, evaluate_loss, loss_and_grad, segment_start,
    snr_augment, snr_shift_gain, CoLearningSchedule, Optimizer, TrainConfig, TrainExample,
    TrainState, Trainer,
};
