//! SynergyNet: an encoder-decoder segmentation network whose bottleneck
//! fuses a continuous latent map with its vector-quantized counterpart
//! through multi-head cross-attention and a hard-attention refinement.
//!
//! Everything runs on a small `f64` reverse-mode engine ([`autodiff`]) so
//! that each component can be checked against finite differences and
//! brute-force oracles.

pub mod autodiff;
pub mod bottleneck;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod quantizer;
pub mod rng;
pub mod run;
pub mod segnet;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use gradcheck::{fd_check, fd_report, FdReport};
pub use rng::{RngState, SeededRng};
pub use tensor::Tensor;
