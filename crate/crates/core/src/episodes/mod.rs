//! Few-shot episodes: task sources, sampling and step encoding.

mod encode;
mod sample;
mod source;

pub use encode::{embed_tokens, encode_episode, EncodedEpisode, StepToken};
pub use sample::{sample_episode, Episode, EpisodeSpec, Example};
pub use source::{
    image_directory_source, parse_manifest, synthetic_cluster_source, ExampleProvider, ImageDirectory,
    ImageLayout, SourceKind, Split, SyntheticClusters, TaskSource,
};
