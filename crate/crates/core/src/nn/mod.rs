//! The dual-head segmentation network: ESP encoder, dual attention and
//! transposed-convolution decoders.

mod config;
mod graph;
mod model;
mod schema;

pub use config::{EspConfig, HeadMode, ModelConfig, CLASS_BACKGROUND, CLASS_DRIVABLE, CLASS_LANE, SINGLE_HEAD_CLASSES};
pub use graph::{AttentionTrace, Graph, HeadOutputs, NamedBatchStats};
pub use model::{gradcheck_model, model_loss_on_tape, ForwardPass, LossVars, Model, Mode, Targets};
pub use schema::{esp_schema, schema, Init, TensorKind, TensorSpec, Weights, PRELU_INIT};
