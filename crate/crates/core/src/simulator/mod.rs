//! Synthetic V2I data generation: codebook, channels, scenes, datasets.

pub mod codebook;
pub mod dataset;
pub mod scene;

pub use codebook::{
    beam_power, dft_codebook, measure_power, optimal_beam, steering_from_sin, steering_vector,
    BeamCodebook,
};
pub use dataset::{
    config_hash, frame_from_line, frame_to_line, generate_dataset, DatasetHeader, DatasetSummary,
    JitterConfig, SimConfig,
};
pub use scene::{
    los_channel, simulate_sequence, CameraModel, ChannelSample, Frame, MotionModel,
    TrajectoryConfig,
};
