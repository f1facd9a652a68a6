//! COIPS: an OCTA image processing pipeline with image quality assessment,
//! FAZ segmentation and area quantification, built on a self-contained
//! reverse-mode automatic differentiation engine.

pub mod config;
pub mod error;
pub mod imaging;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod qa;
pub mod report;
pub mod seg;
pub mod split;
pub mod svgplot;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
