//! Desk-scale laboratory for physically-guided diffusion synthesis of indoor
//! scene layouts.
//!
//! The crate covers the full loop:
//!
//! 1. [`datagen`] procedurally generates bedroom-like layouts on random
//!    rectilinear floors (the training corpus; no external assets needed).
//! 2. [`scene`] encodes a layout as a fixed grid of object slots — category
//!    one-hot, size, orientation, location, and a synthetic shape-feature
//!    block — normalized to `[-1, 1]`.
//! 3. [`denoiser`] is a small permutation-equivariant token-attention network
//!    trained to predict the noise added by the forward process in
//!    [`diffusion`]; [`tape`] supplies the reverse-mode autodiff it trains on.
//! 4. [`guidance`] scores a candidate layout with differentiable collision,
//!    room-layout, and reachability potentials; [`diffusion`] folds their
//!    gradients into the reverse-process transitions.
//! 5. [`reachability`] rasterizes the scene into walkable/cost grids and runs
//!    flood-fill and A* to find the corridors an agent needs.
//! 6. [`metrics`] reports collision rates, out-of-bound rates, walkability,
//!    reachability, and a category-distribution divergence.
//! 7. [`catalog`] retrieves concrete assets for abstract boxes and expands
//!    them to articulated (door/drawer open) extents.
//! 8. [`io`] and [`render`] handle scene JSON, experiment configs, SVG
//!    top-downs; [`commands`] wires everything into the CLI used by the
//!    `physcene` binary and the runnable examples.
//!
//! Everything is deterministic given a seed: generation, training, and
//! sampling all derive per-item streams from explicit master seeds, and
//! parallel reductions are ordered so thread count does not change results.

pub mod catalog;
pub mod commands;
pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod reachability;
pub mod render;
pub mod scene;
pub mod tape;

pub use error::{Error, Result};
