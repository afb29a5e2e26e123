//! Multi-head convolutional classifiers trained on dihedral transformations
//! of their inputs, with transformation compilation, pruning and a kernel
//! invariance score.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dihedral;
pub mod error;
pub mod experiment;
pub mod invariance;
pub mod model;
pub mod svg;
pub mod tensor;
pub mod training;

pub use dihedral::{DihedralElement, TransformationSet};
pub use error::{Error, Result};
pub use model::{Architecture, ModelParams, TransNetModel};
pub use tensor::{Padding, Tensor};
