//! Two-stage vessel segmentation for OCTA-like images.
//!
//! A residual encoder-decoder predicts per-pixel vessel probabilities; a
//! parallel head emits a field of bivariate Gaussians whose rendered sum acts
//! as a multiplicative attention map. Everything is differentiated by a small
//! reverse-mode engine over dense BHWC tensors.
//!
//! Numeric code is generic over [`Scalar`]; training runs in `f32` and
//! gradient verification in `f64`.

// NaN must fail validation, so `!(x > 0.0)` is intended
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod attention;
pub mod augment;
pub mod baseline;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use attention::{GaussianParamMap, RenderMode, Rendering};
pub use augment::{compose_pipeline, AugmentConfig};
pub use baseline::{ThresholdConfig, ThresholdMethod};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use imaging::{Image8, Mask, Plane};
pub use metrics::{
    aggregate, compute_metrics, confusion_from_masks, Aggregation, ConfusionCounts, MetricsReport,
};
pub use network::{NetworkConfig, Prediction, SvsNet, TrainingConfig};
pub use scalar::Scalar;
pub use synth::{generate_dataset, generate_scene, Scene, SceneConfig};
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type SvsNet32 = SvsNet<f32>;
pub type SvsNet64 = SvsNet<f64>;
pub type ParamMap32 = GaussianParamMap<f32>;
pub type ParamMap64 = GaussianParamMap<f64>;
