//! Predictive-coding networks trained by local free-energy descent on
//! activities, weights and precisions.

pub mod checkpoint;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod network;
pub mod oracle;
pub mod par;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::Dataset;
pub use error::{Error, Result};
pub use network::{
    build_network, Activation, ActivityInit, NetworkSpec, Orientation, PCNetwork, Precision, PrecisionMode,
};
pub use train::{evaluate, infer, step_minibatch, train, Mode, TrainingConfig};
