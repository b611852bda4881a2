//! Progressive quantization-aware training on a stack of small MLP blocks.
//!
//! Forward passes fake-quantize weights (and optionally layer inputs) with
//! closed-form group parameters recomputed on every call; backward passes
//! treat the quantizers as identity.

mod landscape;
mod model;
mod schedule;
mod train;

pub use landscape::{
    axis, filter_normalized_direction, landscape_probe, LandscapeConfig, LandscapeGrid,
};
pub use model::{
    fake_quant_activations, fake_quant_weight, mse, mse_grad, weight_steps, Block, BlockGrads,
    BlockQuant, LinearGrads, QuantConfig, QuantLinear, ToyModel, FULL_PRECISION,
};
pub use schedule::{
    block_probabilities, depth_biased_sample, schedule_stages, BlockSamplingConfig,
    BlockwiseConfig, CurriculumConfig, ScheduleVariant, Stage, Variant,
};
pub use train::{
    blockwise_loss, curriculum_loss, quantized_weights, toy_task, train_curriculum,
    train_progressive, LayerOverride, OcsConfig, StepRecord, Task, TrainConfig, TrainReport,
};
