//! Tube convolutional network for spatio-temporal action detection.
//!
//! A video is divided into 8-frame clips; a 3D conv/pool backbone turns each
//! clip into feature cubes, a tube proposal network scores anchor boxes and
//! regresses per-frame tubes, proposals are linked across clips by an exact
//! top-K chain DP, and linked sequences are classified by a recognition head
//! over tube-of-interest pooled features. Training alternates between the
//! proposal and recognition networks with balanced and hard-negative
//! sampling; evaluation provides frame-mAP, video-mAP and ROC/AUC.

pub mod anchors;
pub mod cube;
pub mod detection;
pub mod error;
pub mod exec;
pub mod formats;
pub mod fdcheck;
pub mod geom;
pub mod layers;
pub mod linking;
pub mod loss;
pub mod net;
pub mod pipeline;
pub mod eval;
pub mod rng;
pub mod synth;
pub mod toi;
pub mod tpn;
pub mod training;

pub use cube::FeatureCube;
pub use error::{Result, TcnnError};
pub use geom::{iou, Box2D};
