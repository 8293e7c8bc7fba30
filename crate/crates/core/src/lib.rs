//! Ultrasound modulated optical tomography in the diffusion regime.
//!
//! The crate covers the forward problem (incident light, ultrasound-modulated fields and
//! the resulting boundary measurements), reconstruction of the absorption coefficient by
//! fixed-point iteration, numerical probes of the linearized problem, and the file formats
//! used by the `uot` command-line tool.

pub mod error;
pub mod experiment;
pub mod fem;
pub mod forward;
pub mod greens;
pub mod grid;
pub mod io;
pub mod linearized;
pub mod optics;
pub mod recon;
pub mod sparse;

pub use error::{Result, UotError};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport, MeasurementMode};
pub use forward::{measure_adjoint, measure_direct, ForwardModel, MeasurementSet, Provenance, SourceSpec};
pub use greens::{greens_from_detector, GreensField};
pub use grid::{NodalField, Rect, RegularGrid};
pub use optics::{make_phantom, make_scan_grid, OpticalCoefficients, Phantom, ScanGrid, UltrasoundShape};
pub use recon::{recon_step, run_reconstruction, ReconConfig, ReconConstants, ReconState};
pub use sparse::{solve_cg, CsrMatrix, SolveReport, SolverSettings};
