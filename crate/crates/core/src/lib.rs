//! Intensity-controlled low-rank adapters for frame consistency on a toy
//! video diffusion transformer.

pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod video;

pub use adapter::{compose, init_adapter_set, transfer, AdapterEntry, AdapterKind, Composition, UfoAdapterSet};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelGraph};
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use tensor::Tensor;
pub use video::VideoTensor;
