//! Shared fixtures for the criterion benches.

use uot_core::fem::{assemble_rhs_boundary, assemble_system};
use uot_core::optics::diffusion_coefficient;
use uot_core::{
    make_phantom, measure_adjoint, CsrMatrix, ExperimentConfig, ForwardModel, MeasurementSet, OpticalCoefficients,
    Phantom, RegularGrid, Result, ScanGrid, UltrasoundShape,
};

/// A disk phantom on an `n × n` grid with the default tissue constants.
pub fn coefficients(n: usize) -> Result<OpticalCoefficients> {
    let cfg = ExperimentConfig::default();
    let grid = RegularGrid::square(n, cfg.domain_side)?;
    let mu = make_phantom(Phantom::DiskLow, &grid, cfg.mu_bar)?;
    OpticalCoefficients::new(mu, cfg.mus_prime, cfg.gamma)
}

/// System matrix and a left-edge boundary load.
pub fn system(n: usize) -> Result<(CsrMatrix, Vec<f64>)> {
    let coeffs = coefficients(n)?;
    let d = diffusion_coefficient(&coeffs);
    let a = assemble_system(coeffs.grid(), &d, &coeffs.mu, coeffs.gamma)?;
    let b = assemble_rhs_boundary(coeffs.grid(), |x, _| if x == 0.0 { 1.0 } else { 0.0 });
    Ok((a, b))
}

pub struct MeasurementFixture {
    pub model: ForwardModel,
    pub scan: ScanGrid,
    pub shape: UltrasoundShape,
    pub eta: (f64, f64),
}

impl MeasurementFixture {
    pub fn new(n: usize, scan_n: usize) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.forward_n = n;
        cfg.scan_n1 = scan_n;
        cfg.scan_n2 = scan_n;
        let coeffs = coefficients(n)?;
        Ok(Self {
            model: ForwardModel::new(&coeffs, cfg.source()?, cfg.alpha, cfg.settings())?,
            scan: cfg.scan()?,
            shape: cfg.shape()?,
            eta: (cfg.detector_x, cfg.detector_y),
        })
    }

    pub fn measure(&self) -> Result<MeasurementSet> {
        measure_adjoint(&self.model, &self.scan, self.shape, self.eta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build() {
        let (a, b) = system(17).unwrap();
        assert_eq!(a.dim(), b.len());
        let m = MeasurementFixture::new(33, 6).unwrap().measure().unwrap();
        assert_eq!(m.values.len(), 36);
    }
}
