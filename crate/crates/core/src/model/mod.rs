//! Encoder-FPN-head segmentation networks and their analytic accounting.

pub mod accounting;
pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod spec;

pub use accounting::{count_macs, count_params, layer_graph, stats_table, LayerStats, Part, StatsTable};
pub use checkpoint::{
    load_weights, read_checkpoint, save_stub, save_weights, Checkpoint, CheckpointKind,
};
pub use network::{FeaturePyramid, Model};
pub use spec::{BackboneSpec, BlockFamily, DecoderSpec, Merge, ModelSpec};
