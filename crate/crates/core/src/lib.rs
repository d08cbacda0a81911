//! Volumetric grasp detection with a vision-transformer backbone.
//!
//! A TSDF grid is cut into cubic patches, encoded by a stack of transformer
//! blocks, and decoded back to full resolution by stride-2 deconvolutions
//! with skip connections. Three heads predict per-voxel grasp quality,
//! gripper orientation and opening width.

pub mod adam;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod decoder;
pub mod detect;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod quat;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod tsdf;

pub use adam::{AdamConfig, AdamState};
pub use autodiff::{Tape, Var};
pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, RunConfig};
pub use decoder::GraspMaps;
pub use error::{Error, Result};
pub use model::GraspNet;
pub use objective::GraspLabel;
pub use params::ParamSet;
pub use quat::Quaternion;
pub use tensor::{Scalar, Tensor};
pub use tsdf::TsdfVolume;
