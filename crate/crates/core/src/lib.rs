//! Hybrid lossy-lossless compression of anchor-based 3D Gaussian Splatting
//! scenes.

pub mod codec;
pub mod context;
pub mod entropy_model;
pub mod hemgs;
pub mod nn;
pub mod range_coder;
pub mod scene;
pub mod synth;
pub mod throughput;
pub mod trainer;

pub use codec::{
    compress, decompress, decompress_with_model, inspect, CodecError, Compressed, DecodedScene, StorageReport,
};
pub use context::{context_stats, ContextIndex, ContextParams, ContextStats};
pub use entropy_model::{GaussianParams, QuantStep};
pub use hemgs::{HemgsConfig, HemgsModel, RateLambda, DEFAULT_LAMBDAS};
pub use nn::AgnosticExtractor;
pub use scene::{load_scene, save_scene, Aabb, Anchor, AnchorScene, QuantizedAnchor, SceneError, SceneFormat};
pub use synth::{synth_scene, AttributeModel, SpatialPattern, SynthSpec};
pub use throughput::{measure_throughput, ThroughputReport};
pub use trainer::{eval_rd, train, TrainConfig, TrainError};
