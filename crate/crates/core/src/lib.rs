//! Hierarchical sparse volume decoding for vecset-style implicit fields.
//!
//! The crate is organised around the decoding pipeline:
//!
//! - [`field`]: analytic shapes, the synthetic cross-attention field that every
//!   decoder queries, attention statistics and the per-query FLOPs model.
//! - [`hierdec`]: coarse-to-fine sparse decoding with intersection, near-surface
//!   and dilation selection, plus the dense baseline.
//! - [`akvs`]: per-subvolume key/value token selection driven by probe queries,
//!   and the packed evaluation path used inside hierarchical decoding.
//! - [`surface`]: marching cubes, mesh topology checks and mesh I/O.
//! - [`metrics`]: volume/surface IoU, run reports and the benchmark harness.

pub mod akvs;
pub mod error;
pub mod field;
pub mod geom;
pub mod hierdec;
pub mod metrics;
pub mod surface;

pub use error::{Error, Result};
