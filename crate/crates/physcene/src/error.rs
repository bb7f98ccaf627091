//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A geometric primitive violated its invariants (non-positive extents,
    /// degenerate or self-intersecting polygon, wrong winding, ...).
    #[error("invalid geometry: {0}")]
    Geometry(String),

    /// A raster grid request that cannot be honored (polygon outside the
    /// grid, non-positive resolution, zero-sized grid).
    #[error("invalid raster: {0}")]
    Raster(String),

    /// Scene/layout data that does not fit the slot-grid representation.
    #[error("invalid scene: {0}")]
    Scene(String),

    /// Bad hyperparameters or shapes for the diffusion process.
    #[error("invalid schedule: {0}")]
    Schedule(String),

    /// Bad network configuration or a shape mismatch inside the denoiser.
    #[error("invalid model: {0}")]
    Model(String),

    /// Training diverged or was configured inconsistently.
    #[error("training failed: {0}")]
    Training(String),

    /// A checkpoint file that is malformed or incompatible.
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    /// An asset catalog problem (empty category, malformed entry).
    #[error("catalog error: {0}")]
    Catalog(String),

    /// Metric evaluation over an ill-formed scene set.
    #[error("metrics error: {0}")]
    Metrics(String),

    /// Configuration file / CLI argument problems.
    #[error("invalid config: {0}")]
    Config(String),

    /// JSON that does not match the expected schema.
    #[error("invalid scene JSON: {0}")]
    SceneJson(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
