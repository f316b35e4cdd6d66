//! Latent diffusion-bridge shape completion on truncated distance-field
//! voxel grids.
//!
//! A complete shape (unsigned field) is compressed by a vector-quantized
//! autoencoder whose encoder can attend to depth maps rendered from the
//! shape. A second encoder maps partial scans (signed fields) into the same
//! latent space, and a UNet trained on the Brownian-bridge posterior between
//! the two latents carries a partial latent to a complete one in a few
//! reverse steps. Marching cubes and point-set metrics close the loop.
//!
//! Modules follow the data flow: [`grid`] → [`views`] → [`vqvae`] →
//! [`bridge`] / [`denoiser`] → [`geometry`] → [`metrics`], with
//! [`model`] bundling the trained networks for inference.

pub mod bridge;
pub mod denoiser;
mod error;
pub mod geometry;
pub mod grid;
mod mc_table;
pub mod metrics;
pub mod model;
pub mod state;
pub mod views;
pub mod vqvae;

pub use error::{Error, Result};
