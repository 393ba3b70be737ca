//! Blind separation of sparse spiking sources from drifting multichannel
//! mixtures.
//!
//! A linear separation vector is trained with a signed-power contrast while a
//! small time-conditioned network learns a per-sample gain and bias for that
//! vector. The two are updated in alternation, each with the other frozen.
//! The network is pushed to shrink the spread of a two-Gaussian fit to the
//! source estimate, which undoes slow changes in the mixing.

pub mod compnet;
pub mod contrast;
pub mod decompose;
pub mod error;
pub mod evaluate;
pub mod exec;
pub mod gmm;
pub mod io;
pub mod modulation;
pub mod preprocess;
pub mod simgen;

pub use error::{Error, Result};
pub use exec::Execution;
