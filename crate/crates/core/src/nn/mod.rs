//! Minimal feed-forward/convolutional network with SGD training.
//!
//! Parameterized layers (convolutional, connected) carry exactly five
//! dense parameter buffers — weights, biases, batch-norm scales, rolling
//! means, rolling variances — plus gradient buffers of matching shapes.
//! The five-buffer layout is what the persistent mirror serializes, one
//! envelope per buffer.

mod config;
mod model;

pub use config::{parse_config, Activation, ConfigError, LayerSpec, NetConfig};
pub use model::{argmax, Batch, Model, NnError, ParamSet, Scalar, BN_EPS, PARAM_BUFFERS};
