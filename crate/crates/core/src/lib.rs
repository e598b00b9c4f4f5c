//! Simulation and reconstruction toolkit for high-speed single-pixel ghost
//! imaging of periodic scenes.
//!
//! The pipeline mirrors a two-step acquisition:
//!
//! 1. [`patterns`] builds speckle illumination stacks from a synthetic diffuser.
//! 2. [`scene`] models the time-dependent transmission of the object, notably a
//!    spinning chopper with per-cycle jitter.
//! 3. [`acquisition`] records the reference patterns through a camera model and
//!    the phase-locked single-pixel series behind the object.
//! 4. [`demux`] regroups the time series into one measurement vector per frame.
//! 5. [`recon`] reconstructs each frame by correlation or by isotropic TV
//!    minimization under nonnegativity.
//! 6. [`metrics`] measures SNR, square-root scaling, dose response and edge
//!    spread.

pub mod acquisition;
pub mod demux;
pub mod error;
pub mod image;
pub mod metrics;
pub mod numeric;
pub mod patterns;
pub mod recon;
pub mod rng;
pub mod scene;

pub use acquisition::{
    blur_image, calibrate_photon_scale, capture_reference, ideal_signal, run_campaign, simulate_record, AcquisitionRecord,
    CameraModel, Campaign, NoiseModel, SamplingConfig,
};
pub use demux::{demultiplex, frame_time, FrameMeasurements};
pub use error::{Error, FormatError, Result};
pub use image::{Grid, Image};
pub use metrics::{
    default_roi, dose_sweep, edge_spread, fit_sqrt, locate_edge, snr, snr_error, DosePoint, EdgeFit, PipelineConfig,
    SnrReport,
};
pub use patterns::{
    cut_patterns, generate_diffuser, load_stack, save_stack, speckle_stack, DiffuserMap, PatternStack,
};
pub use recon::{
    correlate_gi, preprocess, reconstruct_frames, reconstruct_movie, reconstruct_tv, shrink2, Preprocessing, ReconMethod,
    ReconstructedFrame, SensingMatrix, SensingSystem, TvConfig, TvModel,
};
pub use scene::{ChopperGeometry, Scene, SceneKind};
