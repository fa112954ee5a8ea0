//! Gradient-domain image blending.
//!
//! Two engines share the same raster plumbing:
//!
//! * [`poisson`] solves the classic Poisson editing system directly.
//! * [`pipeline`] optimises pixels with L-BFGS against a weighted sum of a
//!   Laplacian gradient loss, deep-feature content and style losses, a
//!   histogram loss and total variation, first to blend the region seamlessly
//!   and then to restyle the whole composite.

pub mod error;
pub mod imageio;
pub mod losses;
pub mod net;
pub mod optim;
pub mod pipeline;
pub mod poisson;
pub mod raster;
pub mod rng;

pub use error::{Error, Result};
pub use raster::{align, composite, BlendInstance, ImageTensor, Mask};
