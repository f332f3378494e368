//! Open-vocabulary semantic segmentation of urban point clouds.
//!
//! The pipeline renders a colored point cloud from generated virtual
//! viewpoints ([`viewgen`], [`render`]), lifts per-mask vision-language
//! features back onto the points ([`vlmio`], [`liftfuse`]), distills them
//! into a voxel feature field ([`distill`]) and labels every point by cosine
//! similarity against text embeddings ([`query`]). [`metrics`] scores the
//! result and drives ablation sweeps; [`pipeline`] chains the stages.

pub mod distill;
pub mod liftfuse;
pub mod metrics;
pub mod pipeline;
pub mod query;
pub mod render;
pub mod rng;
pub mod scene;
pub mod viewgen;
pub mod vlmio;

pub use distill::{TrainConfig, VoxelFeatureField};
pub use liftfuse::{FeatureLibrary, SbffParams};
pub use metrics::{ConfusionMatrix, Evaluation};
pub use query::{FusionMode, FusionParams, QueryResult};
pub use render::RenderedView;
pub use scene::{BoundingBox, PointCloud, SceneSpec};
pub use viewgen::{CameraRig, RigKind, ViewParams};
pub use vlmio::{MaskSet, TextEmbeddingTable};
