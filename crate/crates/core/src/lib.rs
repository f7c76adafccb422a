pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod grid;
pub mod harness;
pub mod imageio;
pub mod layout;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod patterns;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod weights;

pub use error::{Error, Result};
pub use grid::{ImageGrid, Mask, ValueRange};
pub use layout::{boundary_band, build_masks, SegmentLayout, SegmentMaskSet, SegmentSpec};
pub use rng::RngStream;
pub use schedule::{NoiseSchedule, SigmaMode, StepPlan};
