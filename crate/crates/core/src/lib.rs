//! Volumetric geometry and uncertainty kernels for 3D segmentation pipelines.
//!
//! The crate is organised around a few plain data types ([`ScalarVolume`],
//! [`LabelVolume`], [`ProbVolume`], [`FeatureMap`]) stored C-contiguous in
//! `(z, y, x)` order, and pure functions over them:
//!
//! - [`io`]: minimal NIfTI-1 and raw + JSON sidecar readers/writers.
//! - [`preprocess`]: normalisation, patch extraction, augmentation, resampling.
//! - [`uncertainty`]: ambiguity field, gating mask, bottleneck refiner and gated fusion.
//! - [`sdm`] and [`attention`]: exact signed distance maps and distance-guided
//!   channel attention with anatomical weighted pooling.
//! - [`losses`]: cross-entropy, soft Dice and deep supervision with analytic gradients.
//! - [`metrics`]: DSC, sensitivity, HD95 and ASSD over k-d tree indexed surfaces.
//! - [`stitch`]: sliding-window planning and probability stitching.
//! - [`clinical`]: iso-surface proximity measurement and sphere phantoms.
//!
//! With the default `parallel` feature, row- and slab-level loops run on rayon.
//! Disabling it gives a sequential build with identical results.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anatomy;
pub mod attention;
pub mod clinical;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kdtree;
pub mod losses;
pub mod metrics;
pub mod numeric;
pub mod oracle;
mod par;
pub mod params;
pub mod preprocess;
pub mod sdm;
pub mod selftest;
pub mod stitch;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{FeatureMap, Grid, LabelVolume, ProbVolume, Real, ScalarVolume, Volume};

/// Library version, echoed into output metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
