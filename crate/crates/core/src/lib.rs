//! Certified detection of adversarial patches.
//!
//! A small CNN keeps only its top-ranked superficial neurons (SINs) at one
//! early layer. Pixels outside the receptive fields of those neurons cannot
//! move the prediction, so an occlusion sweep only has to visit windows that
//! touch the SIN region. If every such occluded prediction agrees with the
//! label, any single patch of the certified size is either harmless or
//! raises an alert.
//!
//! Module map:
//!
//! * [`model`], [`train`], [`weights`]: CNN substrate, SGD finetuning and
//!   the `PCRT` weight container.
//! * [`sin`]: SIN masks, receptive-field back-mapping, pruned inference.
//! * [`windows`]: occluder generation, filtering and merging.
//! * [`certify`]: detection, certification and empirical recovery.
//! * [`attack`]: patch application and (adaptive) patch optimization.
//! * [`analysis`]: SIN clustering statistics and stability experiments.
//! * [`data`], [`config`], [`report`], [`experiment`]: datasets, run
//!   configuration, reports and experiment drivers.

pub mod analysis;
pub mod attack;
pub mod certify;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod report;
pub mod sin;
pub mod tensor;
pub mod train;
pub mod weights;
pub mod windows;

pub use certify::{Certifier, CertifyResult, DefenseConfig, DetectionOutcome};
pub use data::Dataset;
pub use error::{Error, Result};
pub use model::{ForwardTrace, InputDims, Layer, LayerGeom, Model};
pub use sin::{Coord, Rect, SinConfig, SinMask};
pub use tensor::Tensor;
pub use windows::{Window, WindowPlan};
