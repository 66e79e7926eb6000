//! Multi-source vehicle re-identification toolkit.
//!
//! The crate covers the full experimental loop:
//!
//! * [`dataset`]: per-source manifests merged into one contiguous label space,
//!   plus the validation split used for target-domain evaluation.
//! * [`embedhead`]: a trainable `fc1 -> batch-norm -> classifier` head with
//!   hand-written backward pass and an SGD optimizer.
//! * [`trainer`]: two-stage training (pooled multi-source classification,
//!   then classifier replacement and target fine-tuning) and data samplers.
//! * [`retrieval`]: embedding stores, cosine ranking, view averaging and
//!   model-ensemble concatenation.
//! * [`postprocess`]: DBSCAN, query expansion, camera and temporal filters,
//!   k-reciprocal re-ranking and a composable pipeline.
//! * [`eval`]: mAP and Rank@K.
//! * [`synth`]: a seeded generator of multi-domain embedding datasets.
//! * [`experiment`]: benchmark arms and ablation grids built from the above.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod embedhead;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod postprocess;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Current on-disk format versions, embedded in every saved report.
pub const HEAD_FORMAT_MAGIC: &[u8; 4] = b"RFHD";
pub const EMBEDDING_FORMAT_MAGIC: &[u8; 4] = b"RFEB";
pub const HEAD_FORMAT_VERSION: u32 = 1;
pub const EMBEDDING_FORMAT_VERSION: u32 = 1;
pub const LABEL_SPACE_VERSION: &str = "v1";

/// Toolchain and format versions as `key=value` lines.
pub fn version_info() -> String {
    format!(
        "crate={}\nversion={}\nhead_format={}/{}\nembedding_format={}/{}\nlabel_space={}\n",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        std::str::from_utf8(HEAD_FORMAT_MAGIC).unwrap(),
        HEAD_FORMAT_VERSION,
        std::str::from_utf8(EMBEDDING_FORMAT_MAGIC).unwrap(),
        EMBEDDING_FORMAT_VERSION,
        LABEL_SPACE_VERSION,
    )
}
