//! Radar-image fusion detection for water-surface scenes.
//!
//! The pipeline per temporal window:
//!
//! 1. every radar frame is re-expressed in the newest ego frame ([`scene_sim::compensate_frame`]);
//! 2. points are normalised and encoded with a learned scattering prior and a
//!    per-point reliability gate ([`pir`]);
//! 3. a dual-stream backbone produces radar tokens: a kNN edge-convolution local
//!    stream under a Doppler/RCS-aware metric, and a distance-decayed
//!    self-attention global stream ([`backbone`]);
//! 4. a small convolutional encoder produces multi-scale image tokens ([`image`]);
//! 5. learned object queries cross-attend to both token sets and are fused
//!    ([`rifm`]);
//! 6. a shared GRU aggregates each query over the window and detection heads
//!    decode classes and oriented boxes ([`tqa`]).
//!
//! Training uses bipartite matching with focal, smooth-L1 and temporal
//! smoothness terms ([`setpred`]), driven by the synthetic simulator
//! ([`scene_sim`]).

extern crate self as physfusion;

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod image;
pub mod model;
pub mod numerics;
pub mod pir;
pub mod rifm;
pub mod scene_sim;
pub mod setpred;
pub mod tqa;
pub mod train;

pub use error::{Error, Result};

#[cfg(test)]
#[path = "../tests/common/oracle.rs"]
mod oracle;
