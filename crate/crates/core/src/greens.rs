//! Detector Green's function `G(η, ·)` and its samples on the focus lattice.

use crate::error::{Result, UotError};
use crate::fem::evaluate;
use crate::forward::DiffusionOperator;
use crate::grid::{NodalField, RegularGrid};
use crate::optics::{OpticalCoefficients, ScanGrid};
use crate::sparse::SolverSettings;

/// `G(η, ·)` on the nodes of a grid, with the detector snapped to a boundary node.
#[derive(Debug, Clone, PartialEq)]
pub struct GreensField {
    pub field: NodalField,
    /// Boundary node the point source was placed at.
    pub detector: (f64, f64),
    /// Requested detector position.
    pub requested: (f64, f64),
    pub snap_distance: f64,
}

/// Solves the homogeneous-Robin problem with a point source at the boundary node nearest `eta`.
///
/// The system matrix is symmetric and the source is the nodal load, so the result equals
/// `G(·, η) = G(η, ·)` at every node.
pub fn greens_from_detector(
    coeffs: &OpticalCoefficients,
    eta: (f64, f64),
    grid: &RegularGrid,
    settings: SolverSettings,
) -> Result<GreensField> {
    grid.check_same(coeffs.grid())?;
    let op = DiffusionOperator::from_coefficients(coeffs, settings)?;
    greens_with(&op, eta)
}

pub(crate) fn greens_with(op: &DiffusionOperator, eta: (f64, f64)) -> Result<GreensField> {
    let grid = op.grid();
    if !grid.on_boundary(eta.0, eta.1) {
        return Err(UotError::invalid(format!("detector ({}, {}) is not on the boundary", eta.0, eta.1)));
    }
    let (node, snap_distance) = grid.nearest_boundary_node(eta.0, eta.1);
    let detector = grid.node(node);
    let field = op.solve_point_source(detector.0, detector.1)?;
    Ok(GreensField {
        field,
        detector,
        requested: eta,
        snap_distance,
    })
}

/// `G(η, ξᵢ)` at every focus; non-positive values violate the model and are errors.
pub fn greens_on_scan(gf: &GreensField, scan: &ScanGrid) -> Result<Vec<f64>> {
    scan.foci()
        .map(|(x, y)| {
            let v = evaluate(&gf.field, x, y)?;
            if v > 0.0 {
                Ok(v)
            } else {
                Err(UotError::ModelViolation(format!("Green's function is {v} at focus ({x}, {y})")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Rect;
    use crate::optics::{make_scan_grid, GAMMA, MUS_PRIME, MU_BAR};

    fn coeffs(n: usize) -> OpticalCoefficients {
        let g = RegularGrid::square(n, 5.0).unwrap();
        OpticalCoefficients::new(NodalField::constant(g, MU_BAR), MUS_PRIME, GAMMA).unwrap()
    }

    #[test]
    fn detector_snaps_to_nearest_boundary_node() {
        let c = coeffs(20); // spacing 5/19: 2.5 is not a node
        let gf = greens_from_detector(&c, (5.0, 2.5), c.grid(), SolverSettings::default()).unwrap();
        assert_eq!(gf.detector.0, 5.0);
        assert!(gf.snap_distance > 0.0 && gf.snap_distance <= 0.5 * c.grid().hy() + 1e-12);
        assert!(greens_from_detector(&c, (2.0, 2.0), c.grid(), SolverSettings::default()).is_err());
    }

    #[test]
    fn scaling_the_point_load_scales_the_field() {
        let c = coeffs(21);
        let op = DiffusionOperator::from_coefficients(&c, SolverSettings::with_tol(1e-12)).unwrap();
        let g = *c.grid();
        let mut load = crate::fem::delta_load(&g, 5.0, 2.5).unwrap();
        let one = op.solve(&load).unwrap();
        load.iter_mut().for_each(|v| *v *= 2.0);
        let two = op.solve(&load).unwrap();
        for (a, b) in one.values().iter().zip(two.values()) {
            assert!((2.0 * a - b).abs() <= 1e-10 * b.abs());
        }
    }

    #[test]
    fn scan_values_are_positive_symmetric_and_decay_away_from_detector() {
        let c = coeffs(41);
        let g = *c.grid();
        let gf = greens_from_detector(&c, (5.0, 2.5), &g, SolverSettings::default()).unwrap();
        assert_eq!(gf.snap_distance, 0.0);

        // Foci on nodes reproduce nodal values.
        let scan = make_scan_grid(&g, Rect::new(0.5, 4.5, 0.5, 4.5).unwrap(), 33, 33).unwrap();
        let vals = greens_on_scan(&gf, &scan).unwrap();
        assert!(vals.iter().all(|&v| v > 0.0));
        for (k, (x, y)) in scan.foci().enumerate() {
            let i = (x / g.hx()).round() as usize;
            let j = (y / g.hy()).round() as usize;
            assert!((vals[k] - gf.field.at(i, j)).abs() <= 1e-14 * vals[k]);
        }
        for j in 0..33 {
            for i in 0..33 {
                let a = vals[j * 33 + i];
                let b = vals[(32 - j) * 33 + i];
                assert!((a - b).abs() <= 1e-8 * a);
            }
        }
        let mid = 16 * 33;
        for i in 1..33 {
            assert!(vals[mid + i] > vals[mid + i - 1]);
        }
    }

    #[test]
    fn rebuilding_is_bitwise_deterministic() {
        let c = coeffs(25);
        let a = greens_from_detector(&c, (5.0, 2.5), c.grid(), SolverSettings::default()).unwrap();
        let b = greens_from_detector(&c, (5.0, 2.5), c.grid(), SolverSettings::default()).unwrap();
        assert_eq!(a, b);
    }
}
