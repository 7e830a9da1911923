//! Mix-and-match encoder/decoder networks for zero-pair cross-modal image
//! translation, on a small self-contained tensor engine.

pub mod data;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod parallel;
pub mod tensor;
pub mod trainer;
