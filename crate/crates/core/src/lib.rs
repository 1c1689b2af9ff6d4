//! Grid-descriptor video representations: VLAD encoding of per-cell frame
//! descriptors, learned spatial and spatiotemporal weighting, linear
//! classification and leave-one-group-out evaluation.

pub mod aggregate;
mod binio;
pub mod classify;
pub mod codebook;
pub mod eigen;
pub mod error;
pub mod evaluate;
pub mod exec;
pub mod grid;
pub mod manifest;
pub mod pca;
pub mod synth;
pub mod vlad;
pub mod weights;

pub use error::{Error, Result};
pub use grid::{read_dgt, write_dgt, Cell, DescriptorGrid};
pub use manifest::{parse_manifest, write_manifest, DatasetManifest, SampleMeta};
pub use vlad::{Method, VideoRepresentation};
