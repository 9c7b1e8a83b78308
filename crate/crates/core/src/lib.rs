//! Depth-aware cross-domain mixing for semantic segmentation self-training.
//!
//! - [`scene`]: frame types and PNG / manifest I/O
//! - [`depth_stats`]: depth binning and per-class depth densities
//! - [`mixer`]: class-based copy-paste mixing
//! - [`dcf`]: depth-guided filtering of paste masks
//! - [`losses`]: cross-entropy, berHu and the weighted multi-task objective
//! - [`afo`]: attention-gated fusion of visual and depth features
//! - [`synth`]: layered synthetic scenes with known depth statistics
//! - [`harness`]: toy self-training loop and segmentation metrics

pub mod afo;
pub mod config;
pub mod dcf;
pub mod depth_stats;
pub mod error;
pub mod harness;
pub mod losses;
pub mod mixer;
pub mod scene;
pub mod synth;

pub use error::{Error, Result};
