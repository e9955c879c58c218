//! Desk-scale Vision Transformer with hand-written forward and backward
//! passes.

mod config;
mod model;
mod optim;
mod params;
mod tensor;
mod weights;

pub use config::ViTConfig;
pub use model::{
    argmax, classify, embed, embed_patches, encoder_forward, encoder_layers, extract_patches,
    forward, loss_and_grads, softmax_cross_entropy, LossAndGrads, TokenSequence,
};
pub use optim::{sgd_step, SgdConfig, SgdState};
pub use params::{init_params, LayerParams, TensorRef, ViTParams};
pub use tensor::{Matrix, Real};
pub use weights::{
    decode_params, encode_params, load_params, save_params, VITW_MAGIC, VITW_VERSION,
};
