//! Desk-scale toolkit for measuring how well 2-D projections of a
//! classifier's penultimate-layer representations preserve its predictions
//! on adversarial inputs (the POP-N score).
//!
//! The crate contains everything the pipeline needs: a small tape-based
//! autodiff engine and CNN, FGSM/BIM/CW-L2 attacks, PCA/t-SNE/UMAP, the
//! nearest-neighbor scorer, an SVG scatter renderer, and the experiment
//! driver that ties them together.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod dimred;
pub mod error;
pub mod experiment;
pub mod matrix_file;
pub mod model;
pub mod popn;
pub mod rng;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
