//! Dataset trees, synthetic data and checkpoints.

pub mod checkpoint;
pub mod image_io;
pub mod loader;
pub mod manifest;
pub mod synth;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_VERSION};
pub use loader::{clip_frames, collate, load_clip, Dataset, DiskVideo, Sample, VideoData};
pub use manifest::{DatasetManifest, Split, VideoEntry};
pub use synth::{generate_synthetic, Style, SyntheticSpec};
