//! Topic-guided spatial and semantic attention for image captioning.

pub mod attention;
pub mod autodiff;
pub mod binio;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod lda;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod probe;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::ParameterStore;
pub use tensor::Tensor;

pub use eval::EvalReport;
pub use lda::{LdaConfig, LdaModel};
pub use model::{CaptionModel, ImageInputs, ModelConfig, Variant};
pub use pipeline::{Artifacts, PipelineConfig, TopicModel};
pub use training::{TrainConfig, TrainReport};
