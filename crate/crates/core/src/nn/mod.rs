//! Small dense classifiers: deterministic SGD training, softmax inference and exact
//! backpropagated gradients with respect to inputs and parameters.

mod data;
mod model;
mod train;

pub use data::{blobs, glyphs, Dataset, SyntheticSpec};
pub use model::{Activation, Layer, MlpModel, ParamGradients};
pub use train::{accuracy, train, TrainConfig, TrainReport};
