//! Joint object and part segmentation over shared part labels.
//!
//! The crate turns per-pixel object and part potential maps into a pair of
//! label maps. Parts are expressed through a small grammar in which several
//! objects share compositional part labels (one "leg" shared by horse and
//! cow, say). The pipeline is:
//!
//! 1. [`potentials`]: refine the object potentials with a learned convolution
//!    over the concatenated part and object channels.
//! 2. [`proposal`]: take the per-pixel argmax of the part potentials, split it
//!    into connected segments and cluster them into object-scale groups.
//! 3. [`pairwise`]: describe every segment pair and score label combinations
//!    with a small two-layer network.
//! 4. [`crf`]: build a fully-connected CRF per group and solve it with
//!    min-sum loopy belief propagation; a brute-force solver checks it.
//! 5. [`eval`]: IOU and pixel accuracy.
//!
//! [`synth`] generates grammar-consistent scenes with exact ground truth, and
//! [`pipeline`] glues everything together for the command line.

pub mod crf;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod io;
pub mod pairwise;
pub mod pipeline;
pub mod potentials;
pub mod proposal;
pub mod synth;

pub use error::{Error, Result};
pub use grammar::{JointLabel, LabelGrammar};
pub use potentials::PotentialMap;
pub use proposal::{LabelMap, Segment, SegmentGroup};

/// Probability floor applied before every `-log`.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-ln(max(p, PROB_FLOOR))`
#[inline]
pub fn neg_log(p: f64) -> f64 {
    -(p.max(PROB_FLOOR)).ln()
}
