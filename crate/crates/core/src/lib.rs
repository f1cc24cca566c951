//! Whole-body pose estimation toolkit.
//!
//! * [`simcc`]: coordinate-classification label codec (x, y and root-relative depth)
//! * [`tensor`]: dense tensors, layer kernels with backward passes, GAU, KL loss
//! * [`model`]: the PAFPN + hierarchical-encoding + GAU pose head and its trainer
//! * [`distill`]: two-stage teacher/student distillation
//! * [`dataset`]: schema remapping onto the 133-point layout and mixed-corpus sampling
//! * [`eval`]: OKS, AP/AR per body part, MPJPE
//! * [`pipeline`]: top-down inference with skip-frame detection, pose NMS and smoothing

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataset;
pub mod depth;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod simcc;
pub mod synth;
pub mod tensor;
pub mod types;

pub use depth::{root_relative_z, RootRule};
pub use error::{Error, Result};
pub use simcc::{SimCCLabelSpec, SimCCLabels};
pub use tensor::{Param, ParamStore, Precision, Tensor};
pub use types::{
    validate, AnnotatedInstance, BBox, KeypointSchema, Pose, SchemaRegistry, Violation,
};
