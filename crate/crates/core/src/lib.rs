//! Wasserstein gradient flows of semi-discrete energies.

pub mod app;
pub mod dynamics;
pub mod grid;
pub mod jko1d;
pub mod pde;
pub mod reduce;
pub mod sdot;
