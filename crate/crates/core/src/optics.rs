//! Optical coefficients, phantoms, ultrasound intensity fields and focus scan grids.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::grid::{NodalField, Rect, RegularGrid};

/// Background absorption of soft tissue (cm⁻¹).
pub const MU_BAR: f64 = 0.023;
/// Reduced scattering coefficient (cm⁻¹).
pub const MUS_PRIME: f64 = 10.74;
/// Refractive-mismatch boundary constant.
pub const GAMMA: f64 = 0.431;
/// Side length of the square tissue domain (cm).
pub const DOMAIN_SIDE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct OpticalCoefficients {
    pub mu: NodalField,
    pub mus_prime: f64,
    pub gamma: f64,
}

impl OpticalCoefficients {
    pub fn new(mu: NodalField, mus_prime: f64, gamma: f64) -> Result<Self> {
        if let Some(k) = mu.values().iter().position(|&v| v <= 0.0) {
            return Err(UotError::invalid(format!(
                "absorption must be positive, got {} at node {k}",
                mu.values()[k]
            )));
        }
        if !(mus_prime > 0.0 && mus_prime.is_finite()) {
            return Err(UotError::invalid(format!("mus_prime must be positive, got {mus_prime}")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(UotError::invalid(format!("gamma must be positive, got {gamma}")));
        }
        let c = Self { mu, mus_prime, gamma };
        if !c.is_turbid() {
            log::warn!(
                "max absorption {} exceeds 10% of mus_prime {}; diffusion model may be inaccurate",
                c.mu.max(),
                mus_prime
            );
        }
        Ok(c)
    }

    pub fn grid(&self) -> &RegularGrid {
        self.mu.grid()
    }

    /// Model-validity flag: `max μ ≤ 0.1 μs′`.
    pub fn is_turbid(&self) -> bool {
        self.mu.max() <= 0.1 * self.mus_prime
    }
}

/// Nodewise `D = 1 / (3 (μ + μs′))`.
pub fn diffusion_coefficient(coeffs: &OpticalCoefficients) -> NodalField {
    let s = coeffs.mus_prime;
    coeffs.mu.map(|m| 1.0 / (3.0 * (m + s)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phantom {
    DiskLow,
    DiskHigh,
    Multi,
}

impl Phantom {
    pub const ALL: [Phantom; 3] = [Phantom::DiskLow, Phantom::DiskHigh, Phantom::Multi];

    /// Inclusions as (center x, center y, radius, contrast relative to the background).
    pub fn inclusions(self) -> &'static [(f64, f64, f64, f64)] {
        match self {
            Phantom::DiskLow => &[(2.5, 2.5, 0.5, 1.2)],
            Phantom::DiskHigh => &[(2.5, 2.5, 0.5, 10.0)],
            // Stand-in layout: three disks that test separation of nearby objects.
            Phantom::Multi => &[(1.5, 3.5, 0.4, 2.0), (3.5, 3.5, 0.3, 1.5), (2.5, 1.5, 0.5, 1.2)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phantom::DiskLow => "disk_low",
            Phantom::DiskHigh => "disk_high",
            Phantom::Multi => "multi",
        }
    }

    /// Contrast at a point (1 outside every inclusion).
    pub fn contrast_at(self, x: f64, y: f64) -> f64 {
        self.inclusions()
            .iter()
            .find(|&&(cx, cy, r, _)| (x - cx).powi(2) + (y - cy).powi(2) <= r * r)
            .map_or(1.0, |&(_, _, _, c)| c)
    }
}

impl fmt::Display for Phantom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phantom {
    type Err = UotError;

    fn from_str(s: &str) -> Result<Self> {
        Phantom::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| UotError::config("phantom", format!("unknown phantom `{s}` (expected disk_low, disk_high or multi)")))
    }
}

/// Absorption field of a phantom, by nodal membership in each inclusion.
pub fn make_phantom(case: Phantom, grid: &RegularGrid, mu_bar: f64) -> Result<NodalField> {
    let b = grid.bounds();
    let tol = 1e-9;
    if b.x_min > tol || b.y_min > tol || b.x_max < DOMAIN_SIDE - tol || b.y_max < DOMAIN_SIDE - tol {
        return Err(UotError::invalid(format!(
            "phantoms are defined on [0, {DOMAIN_SIDE}]², grid covers [{}, {}]x[{}, {}]",
            b.x_min, b.x_max, b.y_min, b.y_max
        )));
    }
    if !(mu_bar > 0.0) {
        return Err(UotError::invalid(format!("mu_bar must be positive, got {mu_bar}")));
    }
    Ok(NodalField::from_fn(*grid, |x, y| mu_bar * case.contrast_at(x, y)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UltrasoundShape {
    Gaussian { sigma1: f64, sigma2: f64 },
    /// Idealized delta focus.
    Perfect,
}

impl UltrasoundShape {
    pub fn gaussian(sigma1: f64, sigma2: f64) -> Result<Self> {
        if !(sigma1 > 0.0 && sigma2 > 0.0 && sigma1.is_finite() && sigma2.is_finite()) {
            return Err(UotError::invalid(format!(
                "Gaussian widths must be positive, got ({sigma1}, {sigma2})"
            )));
        }
        Ok(UltrasoundShape::Gaussian { sigma1, sigma2 })
    }

    pub fn describe(&self) -> String {
        match self {
            UltrasoundShape::Gaussian { sigma1, sigma2 } => format!("gaussian:{sigma1:?}:{sigma2:?}"),
            UltrasoundShape::Perfect => "perfect".to_string(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "perfect" {
            return Ok(UltrasoundShape::Perfect);
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["gaussian", a, b] => {
                let s1 = a.parse::<f64>().map_err(|e| UotError::Parse(format!("sigma1: {e}")))?;
                let s2 = b.parse::<f64>().map_err(|e| UotError::Parse(format!("sigma2: {e}")))?;
                Self::gaussian(s1, s2)
            }
            _ => Err(UotError::Parse(format!("unrecognized ultrasound shape `{s}`"))),
        }
    }
}

/// Separable factors of the Gaussian intensity on the grid axes.
///
/// The intensity field is the outer product `ex[i] * ey[j]`, normalized so that its
/// trapezoidal integral over the grid equals one.
pub(crate) fn gaussian_factors(
    grid: &RegularGrid,
    center: (f64, f64),
    sigma1: f64,
    sigma2: f64,
) -> (Vec<f64>, Vec<f64>) {
    let axis = |n: usize, h: f64, coord: &dyn Fn(usize) -> f64, c: f64, sigma: f64| -> Vec<f64> {
        // |p|² = C² exp(-2 Σ x_j² / σ_j²)
        let mut e: Vec<f64> = (0..n).map(|i| (-2.0 * (coord(i) - c).powi(2) / (sigma * sigma)).exp()).collect();
        let integral: f64 = e
            .iter()
            .enumerate()
            .map(|(i, v)| if i == 0 || i + 1 == n { 0.5 * h * v } else { h * v })
            .sum();
        for v in &mut e {
            *v /= integral;
        }
        e
    };
    let ex = axis(grid.nx(), grid.hx(), &|i| grid.x(i), center.0, sigma1);
    let ey = axis(grid.ny(), grid.hy(), &|j| grid.y(j), center.1, sigma2);
    (ex, ey)
}

/// Normalized ultrasound intensity `|p(x - ξ)|²` with unit discrete integral.
pub fn gaussian_intensity(grid: &RegularGrid, center: (f64, f64), shape: UltrasoundShape) -> Result<NodalField> {
    let (sigma1, sigma2) = match shape {
        UltrasoundShape::Gaussian { sigma1, sigma2 } => (sigma1, sigma2),
        UltrasoundShape::Perfect => {
            return Err(UotError::invalid(
                "a perfect focus has no field representation; use a point load",
            ))
        }
    };
    let (ex, ey) = gaussian_factors(grid, center, sigma1, sigma2);
    let mut values = Vec::with_capacity(grid.len());
    for e_y in &ey {
        for e_x in &ex {
            values.push(e_x * e_y);
        }
    }
    NodalField::new(*grid, values)
}

/// Trapezoidal (equivalently, Q1 mass-weighted) integral of a nodal field.
pub fn discrete_integral(field: &NodalField) -> f64 {
    let g = field.grid();
    let (nx, ny) = (g.nx(), g.ny());
    let mut total = 0.0;
    for j in 0..ny {
        let wy = if j == 0 || j + 1 == ny { 0.5 } else { 1.0 };
        for i in 0..nx {
            let wx = if i == 0 || i + 1 == nx { 0.5 } else { 1.0 };
            total += wx * wy * field.values()[g.index(i, j)];
        }
    }
    total * g.hx() * g.hy()
}

/// Lattice of ultrasound foci covering the region of interest.
///
/// Foci are enumerated row-major: index `j * n1 + i` sits at
/// `(x_min + i Δ₁, y_min + j Δ₂)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub region: ScanRegion,
    pub n1: usize,
    pub n2: usize,
}

/// Serializable mirror of [`Rect`] for the scan region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRegion {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl From<Rect> for ScanRegion {
    fn from(r: Rect) -> Self {
        Self {
            x_min: r.x_min,
            x_max: r.x_max,
            y_min: r.y_min,
            y_max: r.y_max,
        }
    }
}

impl From<ScanRegion> for Rect {
    fn from(r: ScanRegion) -> Self {
        Rect {
            x_min: r.x_min,
            x_max: r.x_max,
            y_min: r.y_min,
            y_max: r.y_max,
        }
    }
}

impl ScanGrid {
    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rect(&self) -> Rect {
        self.region.into()
    }

    pub fn spacing(&self) -> (f64, f64) {
        let r = self.rect();
        (r.width() / (self.n1 - 1) as f64, r.height() / (self.n2 - 1) as f64)
    }

    pub fn focus(&self, k: usize) -> (f64, f64) {
        let (i, j) = (k % self.n1, k / self.n1);
        self.focus_ij(i, j)
    }

    pub fn focus_ij(&self, i: usize, j: usize) -> (f64, f64) {
        let r = self.rect();
        let (d1, d2) = self.spacing();
        let x = if i + 1 == self.n1 { r.x_max } else { r.x_min + i as f64 * d1 };
        let y = if j + 1 == self.n2 { r.y_max } else { r.y_min + j as f64 * d2 };
        (x, y)
    }

    pub fn foci(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.len()).map(move |k| self.focus(k))
    }

    pub fn is_ring(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.n1 || j + 1 == self.n2
    }

    /// Bilinear interpolation of a lattice array; `None` outside the closed region.
    pub fn interpolate(&self, values: &[f64], x: f64, y: f64) -> Option<f64> {
        let r = self.rect();
        if !r.contains(x, y) {
            return None;
        }
        let (d1, d2) = self.spacing();
        let fi = ((x - r.x_min) / d1).clamp(0.0, (self.n1 - 1) as f64);
        let fj = ((y - r.y_min) / d2).clamp(0.0, (self.n2 - 1) as f64);
        let i = (fi.floor() as usize).min(self.n1 - 2);
        let j = (fj.floor() as usize).min(self.n2 - 2);
        let (s, t) = (fi - i as f64, fj - j as f64);
        let k = j * self.n1 + i;
        Some(
            (1.0 - s) * (1.0 - t) * values[k]
                + s * (1.0 - t) * values[k + 1]
                + s * t * values[k + self.n1 + 1]
                + (1.0 - s) * t * values[k + self.n1],
        )
    }
}

/// Builds the focus lattice; the closed region must lie strictly inside the domain.
pub fn make_scan_grid(domain: &RegularGrid, region: Rect, n1: usize, n2: usize) -> Result<ScanGrid> {
    if n1 < 2 || n2 < 2 {
        return Err(UotError::invalid(format!("scan grid needs at least 2x2 foci, got {n1}x{n2}")));
    }
    let b = domain.bounds();
    if !(region.x_min > b.x_min && region.x_max < b.x_max && region.y_min > b.y_min && region.y_max < b.y_max) {
        return Err(UotError::invalid(format!(
            "scan region [{}, {}]x[{}, {}] must lie strictly inside the domain",
            region.x_min, region.x_max, region.y_min, region.y_max
        )));
    }
    Ok(ScanGrid {
        region: region.into(),
        n1,
        n2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain(n: usize) -> RegularGrid {
        RegularGrid::square(n, DOMAIN_SIDE).unwrap()
    }

    fn coeffs(g: RegularGrid, mu: f64) -> OpticalCoefficients {
        OpticalCoefficients::new(NodalField::constant(g, mu), MUS_PRIME, GAMMA).unwrap()
    }

    #[test]
    fn diffusion_coefficient_values() {
        let g = domain(5);
        let d = diffusion_coefficient(&coeffs(g, 0.023));
        assert!((d.values()[0] - 1.0 / (3.0 * 10.763)).abs() < 1e-15);
        assert!((d.values()[0] - 0.030_970_3).abs() < 1e-7);
        let d10 = diffusion_coefficient(&coeffs(g, 0.23));
        assert!((d10.values()[0] - 0.030_385_9).abs() < 1e-7);
        assert!(d10.values()[0] < d.values()[0]);
    }

    #[test]
    fn diffusion_coefficient_is_pointwise() {
        let g = domain(6);
        let base = coeffs(g, MU_BAR);
        let mut bumped = base.clone();
        bumped.mu.values_mut()[14] += 0.01;
        let d0 = diffusion_coefficient(&base);
        let d1 = diffusion_coefficient(&bumped);
        for k in 0..g.len() {
            if k == 14 {
                assert!(d1.values()[k] < d0.values()[k]);
            } else {
                assert_eq!(d1.values()[k], d0.values()[k]);
            }
        }
    }

    #[test]
    fn invalid_coefficients_are_rejected() {
        let g = domain(3);
        assert!(OpticalCoefficients::new(NodalField::constant(g, 0.0), MUS_PRIME, GAMMA).is_err());
        assert!(OpticalCoefficients::new(NodalField::constant(g, 0.1), -1.0, GAMMA).is_err());
        assert!(OpticalCoefficients::new(NodalField::constant(g, 0.1), MUS_PRIME, 0.0).is_err());
        let thick = OpticalCoefficients::new(NodalField::constant(g, 2.0), MUS_PRIME, GAMMA).unwrap();
        assert!(!thick.is_turbid());
    }

    #[test]
    fn phantom_values() {
        let g = domain(51); // spacing 0.1 cm
        let low = make_phantom(Phantom::DiskLow, &g, MU_BAR).unwrap();
        assert!((low.at(25, 25) - 0.0276).abs() < 1e-15);
        assert_eq!(low.at(5, 5), 0.023);
        let high = make_phantom(Phantom::DiskHigh, &g, MU_BAR).unwrap();
        assert!((high.at(25, 29) - 0.23).abs() < 1e-15);
        assert!("disk_medium".parse::<Phantom>().is_err());
        assert_eq!("multi".parse::<Phantom>().unwrap(), Phantom::Multi);
    }

    #[test]
    fn phantoms_are_bounded_with_background_margin() {
        let g = domain(81);
        for case in Phantom::ALL {
            let f = make_phantom(case, &g, MU_BAR).unwrap();
            assert!(f.min() >= MU_BAR && f.max() <= 10.0 * MU_BAR);
            for k in 0..g.len() {
                let (x, y) = g.node(k);
                let near_edge = x < 0.5 || y < 0.5 || x > 4.5 || y > 4.5;
                if near_edge {
                    assert_eq!(f.values()[k], MU_BAR, "{case} at ({x}, {y})");
                }
            }
        }
        let multi = make_phantom(Phantom::Multi, &g, MU_BAR).unwrap();
        let levels: std::collections::BTreeSet<u64> = multi.values().iter().map(|v| (v / MU_BAR * 100.0).round() as u64).collect();
        assert_eq!(levels.into_iter().collect::<Vec<_>>(), vec![100, 120, 150, 200]);
    }

    #[test]
    fn phantom_requires_full_domain() {
        let g = RegularGrid::square(11, 4.0).unwrap();
        assert!(make_phantom(Phantom::DiskLow, &g, MU_BAR).is_err());
    }

    #[test]
    fn gaussian_intensity_is_normalized_and_symmetric() {
        let g = domain(129);
        let shape = UltrasoundShape::gaussian(0.1, 0.1).unwrap();
        let p = gaussian_intensity(&g, (2.5, 2.5), shape).unwrap();
        assert!((discrete_integral(&p) - 1.0).abs() < 1e-10);
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let a = p.at(i, j);
                let b = p.at(j, i);
                assert!((a - b).abs() <= 1e-12 * p.max());
            }
        }
        let off = gaussian_intensity(&g, (0.7, 3.9), UltrasoundShape::gaussian(0.2, 0.05).unwrap()).unwrap();
        assert!((discrete_integral(&off) - 1.0).abs() < 1e-10);
        assert!(gaussian_intensity(&g, (2.5, 2.5), UltrasoundShape::Perfect).is_err());
    }

    #[test]
    fn elongated_focus_width_ratio() {
        let g = domain(401);
        let c = (2.5, 2.5);
        let p = gaussian_intensity(&g, c, UltrasoundShape::gaussian(0.1, 0.3).unwrap()).unwrap();
        let (mut sx, mut sy) = (0.0, 0.0);
        for k in 0..g.len() {
            let (x, y) = g.node(k);
            sx += p.values()[k] * (x - c.0).powi(2);
            sy += p.values()[k] * (y - c.1).powi(2);
        }
        let ratio = (sy / sx).sqrt();
        assert!((ratio - 3.0).abs() < 0.05, "width ratio {ratio}");
    }

    #[test]
    fn gaussian_intensity_is_translation_covariant() {
        let g = domain(101);
        let shape = UltrasoundShape::gaussian(0.1, 0.15).unwrap();
        let a = gaussian_intensity(&g, (2.0, 2.5), shape).unwrap();
        let (di, dj) = (7usize, 3usize);
        let b = gaussian_intensity(&g, (2.0 + di as f64 * g.hx(), 2.5 + dj as f64 * g.hy()), shape).unwrap();
        for j in 0..g.ny() - dj {
            for i in 0..g.nx() - di {
                assert!((a.at(i, j) - b.at(i + di, j + dj)).abs() <= 1e-12 * a.max());
            }
        }
    }

    #[test]
    fn scan_grid_layout() {
        let g = domain(65);
        let u = Rect::new(0.5, 4.5, 0.5, 4.5).unwrap();
        let s = make_scan_grid(&g, u, 100, 100).unwrap();
        assert_eq!(s.len(), 10_000);
        assert!((s.spacing().0 - 4.0 / 99.0).abs() < 1e-15);
        assert!((s.spacing().0 - 0.0404).abs() < 1e-4);

        let c = make_scan_grid(&g, u, 2, 2).unwrap();
        let foci: Vec<_> = c.foci().collect();
        assert_eq!(foci, vec![(0.5, 0.5), (4.5, 0.5), (0.5, 4.5), (4.5, 4.5)]);

        let full = Rect::new(0.0, 5.0, 0.0, 5.0).unwrap();
        assert!(make_scan_grid(&g, full, 10, 10).is_err());
        assert!(make_scan_grid(&g, u, 1, 10).is_err());
    }

    #[test]
    fn scan_interpolation_reproduces_lattice_values() {
        let g = domain(9);
        let s = make_scan_grid(&g, Rect::new(1.0, 4.0, 0.5, 2.5).unwrap(), 4, 5).unwrap();
        let vals: Vec<f64> = s.foci().map(|(x, y)| 2.0 * x - y + 0.5).collect();
        for (k, (x, y)) in s.foci().enumerate() {
            assert!((s.interpolate(&vals, x, y).unwrap() - vals[k]).abs() < 1e-14);
        }
        assert!((s.interpolate(&vals, 1.7, 1.3).unwrap() - (3.4 - 1.3 + 0.5)).abs() < 1e-13);
        assert!(s.interpolate(&vals, 0.9, 1.0).is_none());
    }

    #[test]
    fn shape_strings_round_trip() {
        for shape in [UltrasoundShape::Perfect, UltrasoundShape::gaussian(0.1, 0.3).unwrap()] {
            assert_eq!(UltrasoundShape::parse(&shape.describe()).unwrap(), shape);
        }
        assert!(UltrasoundShape::parse("gaussian:0.1").is_err());
        assert!(UltrasoundShape::parse("gaussian:0.1:-2").is_err());
    }
}
