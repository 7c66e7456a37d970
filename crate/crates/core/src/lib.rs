//! Activeness propagation for convolutional networks.
//!
//! A network is a chain of convolution and pooling layers over `f64`
//! tensors. Given a response `X(t)` and a supervising layer, the engine
//! scores every neuron by how much its outgoing connections raise the
//! likelihood of the supervising layer, and pools the weighted response into
//! a per-channel feature.

pub mod activeness;
pub mod error;
pub mod eval;
pub mod image;
pub mod model_io;
pub mod net;
pub mod oracle;
pub mod tensor;

pub use activeness::{neuron_activeness, ActivenessRequest, ActivenessResult, Norm, Summarize, Supervision};
pub use error::{Error, Result};
pub use net::{ForwardTrace, Layer, LayerKind, NetworkSpec, PoolMode};
pub use tensor::{ChannelVector, Shape, Tensor3};
