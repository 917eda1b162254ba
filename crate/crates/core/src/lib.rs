//! Panoramic autoregressive generation on equirectangular images: sphere
//! geometry, a circular-padding image codec, the masked autoregressive
//! transformer with a per-token diffusion head, training with the cyclic
//! consistency loss, sampling, metrics and a procedural corpus.

pub mod codec;
pub mod config;
pub mod erp;
pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod train;

pub use error::{ParError, Result};
pub use image::PanoImage;

pub type PanoImage32 = PanoImage<f32>;
pub type PanoImage64 = PanoImage<f64>;
pub type Codec32 = codec::Codec<f32>;
pub type Codec64 = codec::Codec<f64>;
pub type ParModel32 = model::ParModel<f32>;
pub type ParModel64 = model::ParModel<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
