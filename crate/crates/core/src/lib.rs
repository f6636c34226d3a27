//! Conceptual expansion of trained neural networks.
//!
//! Existing trained models are recombined into a model for a novel class by
//! expressing every parameter as a weighted sum of source tensors
//! (`a_1 * f_1 + ... + a_n * f_n`, products taken elementwise) and searching
//! over the weights and sources greedily instead of retraining with
//! backpropagation. The crate also carries the substrate needed to run that
//! procedure end to end: a small tensor and layer library with backprop,
//! SGD training for the knowledge-base models and baselines, toy GANs,
//! synthetic datasets, and the evaluation metrics.
//!
//! The crate is `no_std` and only needs `alloc`; file formats, dataset IO and
//! the experiment runner live in the `combinet` companion crate.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod data;
pub mod error;
pub mod expansion;
pub mod gan;
pub mod layer;
pub mod mapping;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod search;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use expansion::{Alpha, AlphaRange, ConceptualExpansion, ExpandedVariable, FeatureOrigin};
pub use layer::LayerSpec;
pub use mapping::Mapping;
pub use model::{Architecture, ArchitectureId, Metadata, Model};
pub use tensor::Tensor;
