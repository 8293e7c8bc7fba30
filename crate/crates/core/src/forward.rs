//! Forward model: incident light `u`, modulated light `v^ξ`, and synthetic measurements
//! `h(ξ) = v^ξ(η)` at a boundary detector.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::fem::{assemble_rhs_boundary, assemble_rhs_volume, assemble_system, cubic_delta_load, delta_load, evaluate, evaluate_cubic, mass_matrix};
use crate::grid::{NodalField, RegularGrid};
use crate::optics::{diffusion_coefficient, gaussian_factors, gaussian_intensity, OpticalCoefficients, ScanGrid, UltrasoundShape};
use crate::sparse::{solve_cg, CsrMatrix, SolverSettings};

/// Assembled diffusion operator with a counter of the PDE solves performed on it.
#[derive(Debug)]
pub struct DiffusionOperator {
    grid: RegularGrid,
    system: CsrMatrix,
    settings: SolverSettings,
    solves: AtomicUsize,
}

impl DiffusionOperator {
    pub fn new(d: &NodalField, mu: &NodalField, gamma: f64, settings: SolverSettings) -> Result<Self> {
        let grid = *d.grid();
        let system = assemble_system(&grid, d, mu, gamma)?;
        Ok(Self {
            grid,
            system,
            settings,
            solves: AtomicUsize::new(0),
        })
    }

    pub fn from_coefficients(coeffs: &OpticalCoefficients, settings: SolverSettings) -> Result<Self> {
        Self::new(&diffusion_coefficient(coeffs), &coeffs.mu, coeffs.gamma, settings)
    }

    pub fn grid(&self) -> &RegularGrid {
        &self.grid
    }

    pub fn system(&self) -> &CsrMatrix {
        &self.system
    }

    pub fn settings(&self) -> SolverSettings {
        self.settings
    }

    /// Number of linear solves performed so far.
    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    /// Solves `A x = rhs`; non-convergence is an error.
    pub fn solve(&self, rhs: &[f64]) -> Result<NodalField> {
        self.solves.fetch_add(1, Ordering::Relaxed);
        let max_iter = self.settings.max_iter_for(self.system.dim());
        let (x, report) = solve_cg(&self.system, rhs, self.settings.tol, max_iter)?;
        report.ok()?;
        NodalField::new(self.grid, x)
    }

    /// Incident field for arbitrary boundary data, without admissibility checks.
    pub fn solve_incident(&self, src: &SourceSpec) -> Result<NodalField> {
        let g = self.grid;
        let rhs = assemble_rhs_boundary(&g, |x, y| src.value_at(&g, x, y));
        self.solve(&rhs)
    }

    /// Green's function `G(·, point)` with homogeneous Robin data.
    pub fn solve_point_source(&self, x: f64, y: f64) -> Result<NodalField> {
        self.solve(&delta_load(&self.grid, x, y)?)
    }
}

/// Boundary illumination magnitudes per domain edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub left: f64,
    pub right: f64,
    pub bottom: f64,
    pub top: f64,
}

impl Default for SourceSpec {
    /// Unit illumination on `{x = x0}`, nothing elsewhere.
    fn default() -> Self {
        Self::edge(Edge::Left, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edge {
    Left,
    Right,
    Bottom,
    Top,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::Left, Edge::Right, Edge::Bottom, Edge::Top];

    pub fn name(self) -> &'static str {
        match self {
            Edge::Left => "left",
            Edge::Right => "right",
            Edge::Bottom => "bottom",
            Edge::Top => "top",
        }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Edge {
    type Err = UotError;
    fn from_str(s: &str) -> Result<Self> {
        Edge::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| UotError::config("source_edge", format!("unknown edge `{s}`")))
    }
}

impl SourceSpec {
    pub fn zero() -> Self {
        Self {
            left: 0.0,
            right: 0.0,
            bottom: 0.0,
            top: 0.0,
        }
    }

    pub fn edge(edge: Edge, magnitude: f64) -> Self {
        let mut s = Self::zero();
        match edge {
            Edge::Left => s.left = magnitude,
            Edge::Right => s.right = magnitude,
            Edge::Bottom => s.bottom = magnitude,
            Edge::Top => s.top = magnitude,
        }
        s
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            left: c * self.left,
            right: c * self.right,
            bottom: c * self.bottom,
            top: c * self.top,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = [self.left, self.right, self.bottom, self.top];
        if m.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(UotError::invalid("source magnitudes must be finite and non-negative"));
        }
        if m.iter().all(|&v| v == 0.0) {
            return Err(UotError::invalid("source is identically zero"));
        }
        Ok(())
    }

    /// `S(x, y)` on the boundary of `grid`. Corners belong to neither edge; quadrature
    /// never samples them.
    pub fn value_at(&self, grid: &RegularGrid, x: f64, y: f64) -> f64 {
        let b = grid.bounds();
        let tol = 1e-12 * grid.lx().max(grid.ly());
        if (x - b.x_min).abs() <= tol {
            self.left
        } else if (x - b.x_max).abs() <= tol {
            self.right
        } else if (y - b.y_min).abs() <= tol {
            self.bottom
        } else if (y - b.y_max).abs() <= tol {
            self.top
        } else {
            0.0
        }
    }
}

/// Incident light intensity: `-∇·D∇u + μu = 0` with `2D ∂u/∂n + γu = S`.
pub fn solve_incident(coeffs: &OpticalCoefficients, src: &SourceSpec, grid: &RegularGrid) -> Result<NodalField> {
    grid.check_same(coeffs.grid())?;
    src.validate()?;
    let op = DiffusionOperator::from_coefficients(coeffs, SolverSettings::default())?;
    let u = op.solve_incident(src)?;
    check_positive(&u, "incident field")?;
    Ok(u)
}

/// Modulated light: `-∇·D∇v + μv = α |p|² u` with homogeneous Robin data.
pub fn solve_modulated(
    coeffs: &OpticalCoefficients,
    u: &NodalField,
    p_sq: &NodalField,
    grid: &RegularGrid,
    alpha: f64,
) -> Result<NodalField> {
    grid.check_same(coeffs.grid())?;
    let op = DiffusionOperator::from_coefficients(coeffs, SolverSettings::default())?;
    modulated_with(&op, u, p_sq, alpha)
}

fn modulated_with(op: &DiffusionOperator, u: &NodalField, p_sq: &NodalField, alpha: f64) -> Result<NodalField> {
    op.grid().check_same(u.grid())?;
    op.grid().check_same(p_sq.grid())?;
    let source = p_sq.zip_with(u, |p, u| alpha * p * u)?;
    op.solve(&assemble_rhs_volume(op.grid(), &source)?)
}

fn check_positive(field: &NodalField, what: &str) -> Result<()> {
    if let Some(k) = field.values().iter().position(|&v| v <= 0.0) {
        let (x, y) = field.grid().node(k);
        return Err(UotError::ModelViolation(format!(
            "{what} is not positive at ({x}, {y}): {}",
            field.values()[k]
        )));
    }
    Ok(())
}

/// Everything needed to simulate measurements on one grid.
#[derive(Debug)]
pub struct ForwardModel {
    op: DiffusionOperator,
    mu: NodalField,
    src: SourceSpec,
    alpha: f64,
    u: NodalField,
}

impl ForwardModel {
    pub fn new(coeffs: &OpticalCoefficients, src: SourceSpec, alpha: f64, settings: SolverSettings) -> Result<Self> {
        Self::with_diffusion(&coeffs.mu, &diffusion_coefficient(coeffs), coeffs.gamma, src, alpha, settings)
    }

    /// Forward model with an explicitly given diffusion field (e.g. a constant `D₀`).
    pub fn with_diffusion(
        mu: &NodalField,
        d: &NodalField,
        gamma: f64,
        src: SourceSpec,
        alpha: f64,
        settings: SolverSettings,
    ) -> Result<Self> {
        src.validate()?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(UotError::invalid(format!("alpha must be positive, got {alpha}")));
        }
        let op = DiffusionOperator::new(d, mu, gamma, settings)?;
        let u = op.solve_incident(&src)?;
        check_positive(&u, "incident field")?;
        Ok(Self {
            op,
            mu: mu.clone(),
            src,
            alpha,
            u,
        })
    }

    pub fn grid(&self) -> &RegularGrid {
        self.op.grid()
    }

    pub fn operator(&self) -> &DiffusionOperator {
        &self.op
    }

    pub fn incident(&self) -> &NodalField {
        &self.u
    }

    pub fn mu(&self) -> &NodalField {
        &self.mu
    }

    pub fn source(&self) -> &SourceSpec {
        &self.src
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn modulated(&self, p_sq: &NodalField) -> Result<NodalField> {
        modulated_with(&self.op, &self.u, p_sq, self.alpha)
    }

    /// Modulated field for a perfectly focused beam at `focus`.
    ///
    /// The point mass and `u(ξ)` both use the cubic stencil, so measurements vary smoothly
    /// with the focus position.
    pub fn modulated_point(&self, focus: (f64, f64)) -> Result<NodalField> {
        let g = self.grid();
        let scale = self.alpha * evaluate_cubic(&self.u, focus.0, focus.1)?;
        let rhs: Vec<f64> = cubic_delta_load(g, focus.0, focus.1)?.into_iter().map(|v| scale * v).collect();
        self.op.solve(&rhs)
    }

    fn check_detector(&self, eta: (f64, f64)) -> Result<()> {
        if !self.grid().on_boundary(eta.0, eta.1) {
            return Err(UotError::invalid(format!("detector ({}, {}) is not on the boundary", eta.0, eta.1)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Direct,
    Adjoint,
    LoadedFromFile,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Direct => "direct",
            Provenance::Adjoint => "adjoint",
            Provenance::LoadedFromFile => "loaded_from_file",
        }
    }
}

impl FromStr for Provenance {
    type Err = UotError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Provenance::Direct),
            "adjoint" => Ok(Provenance::Adjoint),
            "loaded_from_file" => Ok(Provenance::LoadedFromFile),
            other => Err(UotError::Parse(format!("unknown provenance `{other}`"))),
        }
    }
}

/// Modulation-depth values `h(ξᵢ)` in scan order.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub scan: ScanGrid,
    pub eta: (f64, f64),
    pub values: Vec<f64>,
    pub provenance: Provenance,
    pub shape: UltrasoundShape,
    /// PDE solves spent producing the values (not counting the shared incident field).
    pub pde_solves: usize,
}

impl MeasurementSet {
    pub fn new(
        scan: ScanGrid,
        eta: (f64, f64),
        values: Vec<f64>,
        provenance: Provenance,
        shape: UltrasoundShape,
    ) -> Result<Self> {
        if values.len() != scan.len() {
            return Err(UotError::DimensionMismatch {
                expected: scan.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(UotError::invalid("measurement values must be finite"));
        }
        Ok(Self {
            scan,
            eta,
            values,
            provenance,
            shape,
            pde_solves: 0,
        })
    }

    /// Copy with every value multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= c;
        }
        out
    }

    pub fn max_relative_deviation(&self, other: &MeasurementSet) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs() / b.abs())
            .fold(0.0, f64::max)
    }
}

/// One modulated-field solve per focus, evaluated at the detector.
pub fn measure_direct(model: &ForwardModel, scan: &ScanGrid, shape: UltrasoundShape, eta: (f64, f64)) -> Result<MeasurementSet> {
    model.check_detector(eta)?;
    let before = model.op.solve_count();
    let values = (0..scan.len())
        .into_par_iter()
        .map(|k| {
            let focus = scan.focus(k);
            let v = match shape {
                UltrasoundShape::Gaussian { .. } => model.modulated(&gaussian_intensity(model.grid(), focus, shape)?)?,
                UltrasoundShape::Perfect => model.modulated_point(focus)?,
            };
            evaluate(&v, eta.0, eta.1)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut set = MeasurementSet::new(*scan, eta, values, Provenance::Direct, shape)?;
    set.pde_solves = model.op.solve_count() - before;
    Ok(set)
}

/// Reciprocity fast path: one Green solve at the detector, then a quadrature per focus.
///
/// `h(ξ) = α ∫ G(x, η) |p^ξ(x)|² u(x) dx`, with the same Q1 mass weighting as the direct
/// right-hand side, so both paths agree up to solver tolerance.
pub fn measure_adjoint(model: &ForwardModel, scan: &ScanGrid, shape: UltrasoundShape, eta: (f64, f64)) -> Result<MeasurementSet> {
    model.check_detector(eta)?;
    let before = model.op.solve_count();
    let g = *model.grid();
    let w = model.op.solve_point_source(eta.0, eta.1)?;
    let u = &model.u;
    let alpha = model.alpha;

    let values = match shape {
        UltrasoundShape::Gaussian { sigma1, sigma2 } => {
            let mw = mass_matrix(&g).mul_vec(w.values());
            let weights: Vec<f64> = mw.iter().zip(u.values()).map(|(m, u)| alpha * m * u).collect();
            (0..scan.len())
                .into_par_iter()
                .map(|k| {
                    let (ex, ey) = gaussian_factors(&g, scan.focus(k), sigma1, sigma2);
                    let mut total = 0.0;
                    for (j, e_y) in ey.iter().enumerate() {
                        let row = &weights[j * g.nx()..(j + 1) * g.nx()];
                        let s: f64 = row.iter().zip(&ex).map(|(c, e)| c * e).sum();
                        total += e_y * s;
                    }
                    total
                })
                .collect()
        }
        UltrasoundShape::Perfect => scan
            .foci()
            .map(|(x, y)| Ok(alpha * evaluate_cubic(&w, x, y)? * evaluate_cubic(u, x, y)?))
            .collect::<Result<Vec<f64>>>()?,
    };
    let mut set = MeasurementSet::new(*scan, eta, values, Provenance::Adjoint, shape)?;
    set.pde_solves = model.op.solve_count() - before;
    Ok(set)
}

/// Multiplicative Gaussian noise `hᵢ (1 + level zᵢ)`, deterministic per seed.
pub fn add_noise(meas: &MeasurementSet, relative_level: f64, seed: u64) -> Result<MeasurementSet> {
    if !(relative_level >= 0.0 && relative_level.is_finite()) {
        return Err(UotError::invalid(format!("noise level must be non-negative, got {relative_level}")));
    }
    let mut out = meas.clone();
    if relative_level == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut out.values {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v *= 1.0 + relative_level * z;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Rect;
    use crate::optics::{make_scan_grid, GAMMA, MUS_PRIME, MU_BAR};

    fn coeffs(n: usize, mu: f64) -> OpticalCoefficients {
        let g = RegularGrid::square(n, 5.0).unwrap();
        OpticalCoefficients::new(NodalField::constant(g, mu), MUS_PRIME, GAMMA).unwrap()
    }

    fn model(n: usize, mu: f64) -> ForwardModel {
        ForwardModel::new(&coeffs(n, mu), SourceSpec::default(), 1.0, SolverSettings::default()).unwrap()
    }

    #[test]
    fn zero_source_gives_zero_field() {
        let c = coeffs(17, MU_BAR);
        let op = DiffusionOperator::from_coefficients(&c, SolverSettings::default()).unwrap();
        let u = op.solve_incident(&SourceSpec::zero()).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
        assert!(SourceSpec::zero().validate().is_err());
    }

    #[test]
    fn incident_field_is_symmetric_and_decays_from_source() {
        let c = coeffs(41, MU_BAR);
        let g = *c.grid();
        let u = solve_incident(&c, &SourceSpec::default(), &g).unwrap();
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                assert!((u.at(i, j) - u.at(i, g.ny() - 1 - j)).abs() <= 1e-10 * u.max());
            }
        }
        let mid = g.ny() / 2;
        for i in 1..g.nx() {
            assert!(u.at(i, mid) < u.at(i - 1, mid), "not decreasing at i={i}");
        }
        assert!(u.min() > 0.0);
    }

    #[test]
    fn modulated_field_is_linear_in_intensity() {
        let m = model(33, MU_BAR);
        let g = *m.grid();
        let zero = m.modulated(&NodalField::constant(g, 0.0)).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
        let p = gaussian_intensity(&g, (2.0, 2.5), UltrasoundShape::gaussian(0.2, 0.2).unwrap()).unwrap();
        let v1 = m.modulated(&p).unwrap();
        let v3 = m.modulated(&p.map(|x| 3.0 * x)).unwrap();
        for (a, b) in v1.values().iter().zip(v3.values()) {
            assert!((3.0 * a - b).abs() <= 1e-8 * b.abs().max(1e-300));
        }
        assert!(v1.min() > 0.0);
    }

    #[test]
    fn modulated_signal_depends_on_focus_position() {
        let m = model(41, MU_BAR);
        let g = *m.grid();
        let shape = UltrasoundShape::gaussian(0.1, 0.1).unwrap();
        let eta = (5.0, 2.5);
        let near_source = m.modulated(&gaussian_intensity(&g, (1.0, 2.5), shape).unwrap()).unwrap();
        let center = m.modulated(&gaussian_intensity(&g, (2.5, 2.5), shape).unwrap()).unwrap();
        let a = evaluate(&near_source, eta.0, eta.1).unwrap();
        let b = evaluate(&center, eta.0, eta.1).unwrap();
        assert!((a - b).abs() > 1e-3 * a.max(b));
    }

    #[test]
    fn detector_must_be_on_boundary() {
        let m = model(17, MU_BAR);
        let scan = make_scan_grid(m.grid(), Rect::new(1.0, 4.0, 1.0, 4.0).unwrap(), 3, 3).unwrap();
        assert!(measure_adjoint(&m, &scan, UltrasoundShape::Perfect, (2.5, 2.5)).is_err());
    }

    #[test]
    fn mirrored_foci_give_equal_measurements() {
        let m = model(33, MU_BAR);
        let scan = make_scan_grid(m.grid(), Rect::new(1.0, 4.0, 1.0, 4.0).unwrap(), 4, 5).unwrap();
        let shape = UltrasoundShape::gaussian(0.1, 0.1).unwrap();
        let meas = measure_direct(&m, &scan, shape, (5.0, 2.5)).unwrap();
        assert!(meas.values.iter().all(|&v| v > 0.0));
        for j in 0..5 {
            for i in 0..4 {
                let a = meas.values[j * 4 + i];
                let b = meas.values[(4 - j) * 4 + i];
                assert!((a - b).abs() <= 1e-8 * a);
            }
        }
    }

    #[test]
    fn stronger_absorption_attenuates_the_signal() {
        let shape = UltrasoundShape::gaussian(0.1, 0.1).unwrap();
        let lo = model(33, MU_BAR);
        let hi = model(33, 10.0 * MU_BAR);
        let scan = make_scan_grid(lo.grid(), Rect::new(2.0, 3.0, 2.0, 3.0).unwrap(), 3, 3).unwrap();
        let h_lo = measure_direct(&lo, &scan, shape, (5.0, 2.5)).unwrap();
        let h_hi = measure_direct(&hi, &scan, shape, (5.0, 2.5)).unwrap();
        assert!(h_hi.values[4] < h_lo.values[4]);
    }

    #[test]
    fn direct_and_adjoint_paths_agree() {
        let m = model(33, MU_BAR);
        let scan = make_scan_grid(m.grid(), Rect::new(0.5, 4.5, 0.5, 4.5).unwrap(), 4, 3).unwrap();
        for shape in [UltrasoundShape::gaussian(0.3, 0.2).unwrap(), UltrasoundShape::Perfect] {
            let d = measure_direct(&m, &scan, shape, (5.0, 2.5)).unwrap();
            let a = measure_adjoint(&m, &scan, shape, (5.0, 2.5)).unwrap();
            assert!(a.max_relative_deviation(&d) < 1e-7, "{shape:?}");
            assert_eq!(d.pde_solves, 12);
            assert_eq!(a.pde_solves, 1);
        }
    }

    #[test]
    fn source_scaling_scales_measurements() {
        let c = coeffs(25, MU_BAR);
        let scan = make_scan_grid(c.grid(), Rect::new(1.0, 4.0, 1.0, 4.0).unwrap(), 3, 3).unwrap();
        let base = ForwardModel::new(&c, SourceSpec::default(), 1.0, SolverSettings::default()).unwrap();
        let twice = ForwardModel::new(&c, SourceSpec::default().scaled(2.5), 1.0, SolverSettings::default()).unwrap();
        let h1 = measure_adjoint(&base, &scan, UltrasoundShape::Perfect, (5.0, 2.5)).unwrap();
        let h2 = measure_adjoint(&twice, &scan, UltrasoundShape::Perfect, (5.0, 2.5)).unwrap();
        for (a, b) in h1.values.iter().zip(&h2.values) {
            assert!((2.5 * a - b).abs() <= 1e-8 * b);
        }
    }

    #[test]
    fn noise_is_deterministic_and_calibrated() {
        let g = RegularGrid::square(5, 5.0).unwrap();
        let scan = make_scan_grid(&g, Rect::new(0.5, 4.5, 0.5, 4.5).unwrap(), 100, 100).unwrap();
        let values: Vec<f64> = (0..scan.len()).map(|k| 1.0 + (k as f64 * 0.01).sin().abs()).collect();
        let meas = MeasurementSet::new(scan, (5.0, 2.5), values, Provenance::Adjoint, UltrasoundShape::Perfect).unwrap();

        assert_eq!(add_noise(&meas, 0.0, 1).unwrap(), meas);
        let a = add_noise(&meas, 0.01, 42).unwrap();
        let b = add_noise(&meas, 0.01, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, add_noise(&meas, 0.01, 43).unwrap());

        let rel: Vec<f64> = a.values.iter().zip(&meas.values).map(|(n, c)| n / c - 1.0).collect();
        let mean = rel.iter().sum::<f64>() / rel.len() as f64;
        let std = (rel.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rel.len() - 1) as f64).sqrt();
        assert!((std - 0.01).abs() < 0.001, "sample std {std}");
        assert!(add_noise(&meas, -0.1, 0).is_err());
    }
}
