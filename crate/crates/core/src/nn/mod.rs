//! Minimal reverse-mode autodiff and the U-Net built on it.

pub mod checkpoint;
pub mod graph;
pub mod model;
pub mod state;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use graph::{Gradients, Graph, ParamId, Var};
pub use model::{Classifier, DecoderOutput, EncoderOutput, UNet, UNetConfig};
pub use state::{ModelState, Owner, Param};
pub use tensor::Tensor;
