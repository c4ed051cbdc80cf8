//! Skeleton data model: sequences, joint graphs, file formats, frame
//! sampling, input views and a synthetic corpus.

pub mod graph;
pub mod io;
pub mod sequence;
pub mod synthetic;

pub use graph::{power_adjacency, PartitionStrategy, SkeletonGraph};
pub use io::{load_sample, save_sample, Dataset, DatasetManifest, ManifestEntry};
pub use sequence::{derive_view, frame_indices, sample_frames, SkeletonSequence, View};
pub use synthetic::{generate_synthetic, SyntheticParams};
