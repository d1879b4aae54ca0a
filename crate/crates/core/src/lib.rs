//! Fuse EEG emotion indices with VR eye tracking, rank the regions of the
//! environment sphere a viewer preferred, and render signed heatmaps.

pub mod dwell;
pub mod fixture;
pub mod geometry;
pub mod heatmap;
pub mod image;
pub mod pipeline;
pub mod ranking;
pub mod session;
pub mod simulator;
pub mod stats;
