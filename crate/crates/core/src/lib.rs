//! Progressive painterly image harmonization with a learned early exit.
//!
//! A frozen VGG-style encoder feeds four AdaIN-harmonized stages; per-stage
//! decoders and fusion blocks produce an image at every stage, and a GRU
//! head decides when to stop. The crate includes its own reverse-mode
//! tensor library, the training objectives and loop, synthetic data, and
//! evaluation tools (exit histograms, Bradley-Terry ranking, FLOPs and
//! latency).

pub mod adain;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod harmonet;
pub mod losses;
pub mod par;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use harmonet::{Harmonizer, HarmonizerConfig};
pub use tensor::Tensor;
