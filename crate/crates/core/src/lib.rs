//! Classic and learned fitting of linear-blend-skinned parametric models.

pub mod classic;
pub mod config;
pub mod container;
pub mod datagen;
pub mod error;
pub mod fitter;
pub mod geometry;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod neural;
pub mod par;
pub mod pipeline;
pub mod residuals;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
