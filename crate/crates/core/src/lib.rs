//! Video representation with deformable 2D Gaussians.
//!
//! A video is cut into groups of pictures (GOPs). Each GOP is one set of
//! canonical 2D Gaussians plus a hybrid deformation field: a tri-plane
//! feature grid for smooth space-time offsets and a per-Gaussian quadratic
//! trajectory for fast motion, blended per Gaussian by a learned dynamic
//! indicator. Frames are produced by summing Gaussian contributions
//! (no opacity, no sorting), which makes decoding of any timestamp cheap
//! and independent of every other frame.
//!
//! The crate is organised bottom-up:
//!
//! * [`gaussian`]: canonical attributes, activations and covariance math.
//! * [`raster`]: tile-based accumulation renderer and its analytic adjoint.
//! * [`deform`]: tri-plane queries, polynomial motion and indicator fusion.
//! * [`train`]: Adam fitting of a GOP, L2 loss and quantization-aware tuning.
//! * [`slicer`]: motion estimation and adaptive GOP segmentation.
//! * [`quant`] and [`codec`]: min-max quantization, Morton grid packing and
//!   the `GSVR` container.
//! * [`video`]: frame I/O and PSNR.
//! * [`pipeline`]: encode/decode/interpolate/benchmark orchestration.

pub mod adam;
pub mod codec;
pub mod deform;
pub mod diagnostics;
pub mod error;
pub mod gaussian;
pub mod morton;
pub mod pipeline;
pub mod quant;
pub mod raster;
pub mod real;
pub mod slicer;
pub mod synth;
pub mod train;
pub mod video;

pub use codec::{decode_container, encode_container, ContainerInfo, GsvrContainer, ImageCodec};
pub use deform::{deform, FieldMode, GopModel, TriPlane};
pub use error::{Error, Result};
pub use gaussian::{DeformedGaussian, Gaussian2D};
pub use pipeline::{encode_video, Decoder, EncodeConfig, EncodeOutput};
pub use quant::BitPlan;
pub use raster::{render, render_backward, Accumulation, Frame, RenderOptions};
pub use real::Real;
pub use slicer::{GopPlan, MotionTrace};
pub use train::{train_gop, TrainConfig};
pub use video::{psnr, VideoBuffer};
