//! Axial super-resolution of anisotropic volumes.
//!
//! A coordinate network is fit to the low-resolution axial measurements
//! through the known degradation operator, regularized by score
//! distillation from a 2D denoising diffusion prior trained on the volume's
//! own lateral slices.

pub mod degradation;
pub mod diffusion;
pub mod error;
pub mod inr;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod scalar;
pub mod sds;
pub mod simulate;
pub mod volume;

pub use degradation::{gaussian_kernel_1d, DegradationMode, DegradationOp};
pub use error::{Error, Result};
pub use inr::{init_inr, FourierEmbedding, InrConfig, InrModel};
pub use io::{load_volume, save_volume};
pub use scalar::Scalar;
pub use sds::{export_volume, reconstruct, Reconstruction, Regularizer, RunReport, SdsConfig};
pub use volume::{expand_slice, normalize_index, Image, Orientation, SlicePlan, VolumeGrid};
