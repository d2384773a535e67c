//! Intuitionistic fuzzy image encoding feeding from-scratch U-Net and U-Net++
//! segmentation networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`encoding`] turns a crisp intensity image into (membership,
//!   non-membership, hesitation) planes using Sugeno or Yager negation.
//! * [`tensor`] is a small dense tensor engine with a reverse-mode tape.
//! * [`arch`] builds U-Net and U-Net++ graphs on top of the tape.
//! * [`train`], [`metrics`] and [`phantom`] provide the data pipeline,
//!   training loop, evaluation and a synthetic brain-like phantom generator.
//! * [`ablation`] runs parameter sweeps and renders their tables and charts.

pub mod ablation;
pub mod arch;
pub mod dataset;
pub mod encoding;
mod error;
pub mod metrics;
pub mod phantom;
pub mod svg;
pub mod tensor;
pub mod train;

pub use arch::{ArchConfig, Family, Model};
pub use encoding::{
    ConstantPolicy, Histogram, IfsImage, IntensityImage, MembershipConfig, NegationConfig,
};
pub use error::{Error, Result};
pub use metrics::{LabelMask, MetricsReport};
pub use phantom::PhantomSpec;
pub use tensor::{Graph, Mode, Scalar, Tensor, Var};
pub use train::{Sample, TrainConfig};

/// Mixes a base seed with a salt into an independent stream seed
/// (splitmix64 finaliser).
pub(crate) fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base
        ^ salt
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
