//! Range-image place recognition for rotating LiDAR.
//!
//! The pipeline converts point clouds into yaw-equivariant range images,
//! extracts features with circularly padded convolutions and a channel /
//! spatial attention block, aggregates them into a rotation-invariant
//! global descriptor, and trains the whole stack by regressing descriptor
//! similarity onto the measured overlap between scan pairs. Retrieval is
//! exact nearest-descriptor search with Recall@1 / Recall@1% / AR@k
//! evaluation.

pub mod dataio;
pub mod model;
pub mod overlap;
pub mod profile;
pub mod rangeimage;
pub mod train;
pub mod retrieval;
pub mod tensor;
