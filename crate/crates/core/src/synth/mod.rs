//! Synthetic egocentric data: articulated motion, head-mounted fisheye
//! projection, torso self-occlusion, rendering and dataset files.

mod camera;
mod dataset;
pub mod geometry;
mod render;
mod skeleton;

pub use camera::{is_occluded, occlusion_flags, CameraPose, FisheyeCamera, Projection, TorsoCapsule};
pub use dataset::{
    generate_dataset, generate_sequence, sequence_seed, BlockOffsets, Dataset, DatasetManifest, Sample, SampleRef, Sequence,
    SequenceEntry, SynthConfig, DATASET_VERSION, RECORD_MAGIC,
};
pub use render::{render_frame, render_gt_heatmap};
pub use skeleton::*;
