pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod graph;
mod linalg;
pub mod masking;
pub mod model;
pub mod optim;
pub mod pgm;
pub mod tensor;
pub mod trainer;

pub use error::{PsdError, Result};
pub use graph::{Graph, Var};
pub use model::{ModelBundle, ModelConfig};
pub use tensor::Tensor;
