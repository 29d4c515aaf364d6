//! Winsor-CAM: multi-layer Grad-CAM fusion with percentile-clipped layer
//! importance, plus the localization metrics and file formats around it.

pub mod bundle;
pub mod cli;
pub mod error;
pub mod gradcam;
pub mod metrics;
pub mod microcnn;
pub mod render;
pub mod rng;
pub mod service;
pub mod tensor;
pub mod winsor;

pub use error::{Error, Result};
pub use gradcam::{all_layer_gradcams, layer_gradcam, LayerCapture, LayerGradCam};
pub use tensor::{Interp, Tensor};
pub use winsor::{winsor_cam, Aggregation, Bounds, LayerStack, WinsorCamResult, WinsorParams};
