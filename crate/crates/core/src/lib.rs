//! Slice-to-volume clustering propagation for automatic and click-driven
//! volumetric segmentation.
//!
//! A 2D mask-transformer segmenter with k-means cross-attention is run slice by
//! slice; cluster centers that end up on foreground objects are carried to the
//! next slice, fused into a recurrent per-object memory, and can be seeded from
//! user clicks instead of learned queries.

pub mod autograd;
pub mod error;
pub mod evaluation;
pub mod interaction;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod memory;
pub mod model;
pub mod propagation;
pub mod session;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{
    argmax_labeling, labels_to_binary_masks, AssignmentMatrix, CenterSet, CenterStatus, Click, ClusterCenter,
    FeatureMap, LabelVolume, Mask2, MaskScoreVolume, Modality, Polarity, Provenance, Shape3, Volume,
};
