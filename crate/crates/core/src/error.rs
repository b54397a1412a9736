//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
    #[error(transparent)]
    Segmentation(#[from] crate::segmentation::SegmentationError),
    #[error(transparent)]
    Refinement(#[from] crate::refinement::RefinementError),
    #[error(transparent)]
    Em(#[from] crate::emopt::EmError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
