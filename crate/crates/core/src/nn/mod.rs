//! Convolutional generator and discriminator with hand-written reverse-mode
//! gradients.

pub mod checkpoint;
pub mod model;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use model::{
    discriminator_forward, generator_forward, init_params, DiscriminatorConfig, GeneratorConfig, ModelConfig,
    ModelParams,
};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
