//! Hyperbolic structured regularization.
//!
//! Label hierarchies are embedded into feature spaces by correlating tree
//! distances with Poincaré-ball distances between class prototypes. The
//! crate also ships the diagnostics used to judge such embeddings and a
//! toolkit for the eigenspectra of hierarchical block correlation matrices.

pub mod autodiff;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod hierarchy;
pub mod objective;
pub mod spectral;
pub mod training;

pub use dataset::LabeledDataset;
pub use error::{Error, Result};
pub use geometry::{Curvature, KleinPoint, PoincarePoint};
pub use hierarchy::{LabelTree, TreeMetric};
pub use objective::{Batch, ObjectiveConfig, Prototypes};
pub use spectral::{BlockCorrelationSpec, EigenSpectrum};
pub use training::{EncoderSpec, Model, SyntheticSpec, TrainConfig};
