//! Extreme-weather nowcasting building blocks: region tiling, spectral
//! diagnostics, Beta-filter frequency modulation, event-prior memories, a
//! windowed-attention backbone, training and verification metrics.

pub mod afm;
pub mod analysis;
pub mod autodiff;
pub mod backbone;
pub mod epa;
pub mod error;
pub mod fft;
pub mod grid;
pub mod io;
pub mod kmeans;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod spectral;
pub mod synth;

pub use error::{Result, UxError};
