//! Detection of spatially entangled photon pairs by pixelated image sensors.
//!
//! The crate covers the full forward and inverse problem:
//!
//! - [`model`]: pixel grids, the joint pair distribution `Γ_ij` and the
//!   double-Gaussian source model.
//! - [`oracle`]: exact conditional probabilities and moment formulas relating
//!   `Γ_ij` to the mean direct image `⟨x_i⟩` and correlation image `⟨x_i x_j⟩`.
//! - [`sim`]: Monte Carlo frame generation for single-photon-counting (SPC)
//!   and electron-multiplying CCD (EMCCD) readouts.
//! - [`accumulate`]: streaming direct/correlation image accumulation.
//! - [`reconstruct`]: inversion of accumulated moments back to `Γ_ij`, with
//!   background removal, normalization and a double-Gaussian fit.
//! - [`io`]: CSV, JSON and binary frame-stack formats.
//! - [`pipeline`]: sharded simulate-and-accumulate driver, parallel when the
//!   `parallel` feature is on.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b, tol): (f64, f64, f64) = ($a, $b, $tol);
        assert!((a - b).abs() <= tol, "{} vs {} (tol {})", a, b, tol);
    }};
}

pub mod accumulate;
pub mod io;
pub mod model;
pub mod numeric;
pub mod oracle;
pub mod pipeline;
pub mod reconstruct;
pub mod sim;

pub use accumulate::MomentAccumulator;
pub use model::{
    build_double_gaussian, total_variation, DoubleGaussianParams, JointDistribution, PairNumberModel,
    PixelGrid, SourceConfig,
};
pub use sim::{EmccdNoiseParams, Frame, FrameKind, ReadoutMode, SensorConfig};
