//! Point-wise masked autoencoding for event-camera streams.
//!
//! Events are treated as points in normalized `(x, y, t)` space. A stream is
//! cut into sliding windows, each window is resampled to a fixed number of
//! points, and patches are formed around centers whose neighborhoods fit a
//! local plane (the signature of an edge moving linearly). A small
//! transformer autoencoder is pre-trained to reconstruct randomly hidden
//! patches and then fine-tuned for classification.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod event;
pub mod model;
pub mod patch;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod train;

pub use ablation::{AblationError, AblationRow, AblationSetting};
pub use checkpoint::CheckpointError;
pub use event::{Event, EventError, EventStream};
pub use model::{MaeModel, MaskedBatch, ModelConfig, ModelError};
pub use patch::{CenterMethod, Patch, PatchConfig, PatchError, PatchSet, PlaneFit};
pub use sampler::{PointSet, SampleError, SamplerConfig};
pub use synth::{EventLabel, SynthConfig, SynthStream};
pub use tensor::Tensor;
pub use train::{Metrics, TrainConfig, TrainError};
