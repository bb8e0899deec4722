//! Desk-scale learned registration: a small reverse-mode autodiff engine,
//! a U-Net that predicts stationary velocity fields, and a training loop
//! that draws every pair from the synthetic generators of `synreg-core`.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod real;
pub mod state;
pub mod train;
pub mod unet;

pub use error::{NetError, Result};
pub use graph::{Graph, Var};
pub use real::Real;
pub use state::{NetState, TrainSettings};
pub use train::{
    forward, layer_activations, predict_warp, train, train_step, LossKind, TrainOptions,
    TrainSample,
};
pub use unet::UNetConfig;
