//! Continuous dropout: mask distributions, closed-form moment analysis,
//! dropout-trained feedforward networks, and the experiments that compare
//! Bernoulli, uniform and Gaussian masks.

pub mod coadapt;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod masks;
pub(crate) mod mc;
pub mod network;
pub mod rng;
pub mod statics;
pub mod stats;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use masks::{MaskDistribution, MaskMoments, MomentMode};
pub use network::{Activation, DenseLayer, Network};
pub use rng::RngStream;
