//! Fixed-point reconstruction of the absorption coefficient from scanned measurements.
//!
//! With a perfectly focused beam, `h(ξ) = α G(η, ξ) u(ξ)`, so `w = h / G(η, ·)` is the
//! incident field up to the constant `α`. Substituting into `-∇·D∇u + μu = 0` gives
//!
//! ```text
//! μ(ξ) = ∇·D∇w(ξ) / w(ξ)
//! ```
//!
//! which is implicit in `μ` through `D` and `G`. Each step recomputes both from the
//! current iterate, evaluates the formula with central differences on the focus lattice,
//! and transfers the result back to the PDE grid.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::fem::evaluate_cubic;
use crate::forward::{DiffusionOperator, MeasurementSet};
use crate::greens::greens_with;
use crate::grid::{NodalField, RegularGrid};
use crate::optics::{OpticalCoefficients, ScanGrid};
use crate::sparse::SolverSettings;

/// Flux-form central differences of `-∇·D∇w` on a uniform lattice of `n1 × n2` points.
///
/// Face coefficients are arithmetic means of the two adjacent nodal values. The outer ring
/// has no full stencil and is left at zero.
pub fn fd_elliptic_on_scan(w: &[f64], d: &[f64], n1: usize, n2: usize, d1: f64, d2: f64) -> Result<Vec<f64>> {
    if n1 < 3 || n2 < 3 {
        return Err(UotError::invalid(format!("finite differences need a 3x3 lattice, got {n1}x{n2}")));
    }
    let n = n1 * n2;
    if w.len() != n || d.len() != n {
        return Err(UotError::DimensionMismatch {
            expected: n,
            got: if w.len() != n { w.len() } else { d.len() },
        });
    }
    let mut out = vec![0.0; n];
    let (ix, iy) = (1.0 / (d1 * d1), 1.0 / (d2 * d2));
    for j in 1..n2 - 1 {
        for i in 1..n1 - 1 {
            let k = j * n1 + i;
            let de = 0.5 * (d[k] + d[k + 1]);
            let dw = 0.5 * (d[k] + d[k - 1]);
            let dn = 0.5 * (d[k] + d[k + n1]);
            let ds = 0.5 * (d[k] + d[k - n1]);
            let flux_x = (de * (w[k + 1] - w[k]) - dw * (w[k] - w[k - 1])) * ix;
            let flux_y = (dn * (w[k + n1] - w[k]) - ds * (w[k] - w[k - n1])) * iy;
            out[k] = -(flux_x + flux_y);
        }
    }
    Ok(out)
}

/// Known tissue constants used by the reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconConstants {
    pub mus_prime: f64,
    pub gamma: f64,
    /// Background absorption, assumed known outside the region of interest.
    pub mu_bar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub max_iters: usize,
    pub rel_change_tol: f64,
    /// Relaxation weight in `(0, 1]`.
    pub relaxation: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    /// Apply a 3×3 box filter to the measurements before iterating.
    pub presmooth: bool,
    /// Keep every iterate in [`ReconState::snapshots`].
    pub keep_snapshots: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            max_iters: 40,
            rel_change_tol: 1e-4,
            relaxation: 1.0,
            mu_min: 1e-4,
            mu_max: 1.0,
            presmooth: false,
            keep_snapshots: false,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_min > 0.0) {
            return Err(UotError::config("mu_min", "must be positive"));
        }
        if !(self.mu_min < self.mu_max) {
            return Err(UotError::config("mu_max", "must exceed mu_min"));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(UotError::config("relaxation", "must lie in (0, 1]"));
        }
        if !(self.rel_change_tol >= 0.0) {
            return Err(UotError::config("rel_change_tol", "must be non-negative"));
        }
        Ok(())
    }
}

/// Result of a single fixed-point step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub mu: NodalField,
    /// Raw formula values on the focus lattice before clamping (ring entries are `μ̄`).
    pub raw_scan: Vec<f64>,
    /// Foci where `w = h/G` had to be floored to stay positive.
    pub floored_foci: usize,
}

#[derive(Debug, Clone)]
pub struct ReconState {
    pub mu: NodalField,
    pub iterations: usize,
    /// `‖μᵏ⁺¹ − μᵏ‖₂ / ‖μᵏ‖₂` per step.
    pub history: Vec<f64>,
    /// `(min, max)` of every iterate, including the initial guess.
    pub bounds: Vec<(f64, f64)>,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub snapshots: Vec<NodalField>,
}

fn box_filter(values: &[f64], scan: &ScanGrid) -> Vec<f64> {
    let (n1, n2) = (scan.n1, scan.n2);
    let mut out = values.to_vec();
    for j in 1..n2 - 1 {
        for i in 1..n1 - 1 {
            let mut s = 0.0;
            for dj in 0..3 {
                for di in 0..3 {
                    s += values[(j + dj - 1) * n1 + (i + di - 1)];
                }
            }
            out[j * n1 + i] = s / 9.0;
        }
    }
    out
}

/// One application of the fixed-point map `μᵏ ↦ μᵏ⁺¹` on the reconstruction grid.
pub fn recon_step(
    mu_k: &NodalField,
    meas: &MeasurementSet,
    consts: &ReconConstants,
    config: &ReconConfig,
    settings: SolverSettings,
) -> Result<StepOutcome> {
    step_with_values(mu_k, meas, &meas.values, consts, config, settings)
}

fn step_with_values(
    mu_k: &NodalField,
    meas: &MeasurementSet,
    h: &[f64],
    consts: &ReconConstants,
    config: &ReconConfig,
    settings: SolverSettings,
) -> Result<StepOutcome> {
    let grid = *mu_k.grid();
    let scan = &meas.scan;
    let (n1, n2) = (scan.n1, scan.n2);
    let coeffs = OpticalCoefficients::new(mu_k.clone(), consts.mus_prime, consts.gamma)?;
    let op = DiffusionOperator::from_coefficients(&coeffs, settings)?;
    let green = greens_with(&op, meas.eta)?;

    let mut w = Vec::with_capacity(scan.len());
    let mut d_scan = Vec::with_capacity(scan.len());
    for (k, (x, y)) in scan.foci().enumerate() {
        let g = evaluate_cubic(&green.field, x, y)?;
        w.push(if g > 0.0 { h[k] / g } else { 0.0 });
        let mu = evaluate_cubic(mu_k, x, y)?;
        d_scan.push(1.0 / (3.0 * (mu + consts.mus_prime)));
    }
    let w_max = w.iter().copied().fold(0.0, f64::max);
    if !(w_max > 0.0) {
        return Err(UotError::ModelViolation("no positive ratio h/G on the scan lattice".into()));
    }
    let floor = 1e-14 * w_max;
    let mut floored = 0;
    for v in &mut w {
        if *v <= floor {
            *v = floor;
            floored += 1;
        }
    }

    let numerator = fd_elliptic_on_scan(&w, &d_scan, n1, n2, scan.spacing().0, scan.spacing().1)?;
    let omega = config.relaxation;
    let mut raw = vec![consts.mu_bar; scan.len()];
    let mut next = vec![consts.mu_bar; scan.len()];
    for j in 1..n2 - 1 {
        for i in 1..n1 - 1 {
            let k = j * n1 + i;
            // numerator holds -∇·D∇w, so μ = -numerator / w.
            let mu_hat = -numerator[k] / w[k];
            raw[k] = mu_hat;
            let clamped = mu_hat.clamp(config.mu_min, config.mu_max);
            let (x, y) = scan.focus(k);
            let prev = evaluate_cubic(mu_k, x, y)?;
            next[k] = ((1.0 - omega) * prev + omega * clamped).clamp(config.mu_min, config.mu_max);
        }
    }

    let region = scan.rect();
    let values = (0..grid.len())
        .map(|k| {
            let (x, y) = grid.node(k);
            if region.contains_strictly(x, y) {
                // Re-clamp: interpolating clamped values can round just past a bound.
                scan.interpolate(&next, x, y)
                    .unwrap_or(consts.mu_bar)
                    .clamp(config.mu_min, config.mu_max)
            } else {
                consts.mu_bar
            }
        })
        .collect();
    Ok(StepOutcome {
        mu: NodalField::new(grid, values)?,
        raw_scan: raw,
        floored_foci: floored,
    })
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Iterates [`recon_step`] from `μ⁰ ≡ μ̄` until the relative change drops below the tolerance.
pub fn run_reconstruction(
    grid: &RegularGrid,
    meas: &MeasurementSet,
    consts: &ReconConstants,
    config: &ReconConfig,
    settings: SolverSettings,
) -> Result<ReconState> {
    config.validate()?;
    let scan = &meas.scan;
    let region = scan.rect();
    let b = grid.bounds();
    if !(region.x_min > b.x_min && region.x_max < b.x_max && region.y_min > b.y_min && region.y_max < b.y_max) {
        return Err(UotError::GridMismatch("scan region is not inside the reconstruction grid".into()));
    }

    let h = if config.presmooth {
        box_filter(&meas.values, scan)
    } else {
        meas.values.clone()
    };

    let mut mu = NodalField::constant(*grid, consts.mu_bar);
    let mut state = ReconState {
        mu: mu.clone(),
        iterations: 0,
        history: Vec::new(),
        bounds: vec![(mu.min(), mu.max())],
        converged: false,
        warnings: Vec::new(),
        snapshots: Vec::new(),
    };

    for k in 0..config.max_iters {
        let out = step_with_values(&mu, meas, &h, consts, config, settings)?;
        if out.floored_foci > 0 {
            let msg = format!("iteration {}: floored h/G at {} foci", k + 1, out.floored_foci);
            log::warn!("{msg}");
            state.warnings.push(msg);
        }
        let diff: Vec<f64> = out.mu.values().iter().zip(mu.values()).map(|(a, b)| a - b).collect();
        let change = l2(&diff) / l2(mu.values());
        mu = out.mu;
        state.history.push(change);
        state.bounds.push((mu.min(), mu.max()));
        state.iterations = k + 1;
        if config.keep_snapshots {
            state.snapshots.push(mu.clone());
        }
        log::debug!("iteration {}: relative change {change:.3e}", k + 1);
        if change < config.rel_change_tol {
            state.converged = true;
            break;
        }
    }
    state.mu = mu;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(n: usize, h: f64, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        (0..n * n).map(|k| f((k % n) as f64 * h, (k / n) as f64 * h)).collect()
    }

    #[test]
    fn constant_input_gives_zero() {
        let n = 7;
        let w = vec![3.0; n * n];
        let d = lattice(n, 0.1, |x, y| 0.03 + x * y);
        let out = fd_elliptic_on_scan(&w, &d, n, n, 0.1, 0.1).unwrap();
        assert!(out.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn square_gives_minus_two_d_at_second_order() {
        let d0 = 0.031;
        let errs: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&h| {
                let n = (1.0 / h) as usize + 1;
                let w = lattice(n, h, |x, _| (x + 0.3).powi(2) + (x * 0.5).powi(4));
                let d = vec![d0; n * n];
                let out = fd_elliptic_on_scan(&w, &d, n, n, h, h).unwrap();
                // Exact: -D (2 + 12 x² / 16)
                let mut worst: f64 = 0.0;
                for j in 1..n - 1 {
                    for i in 1..n - 1 {
                        let x = i as f64 * h;
                        let exact = -d0 * (2.0 + 0.75 * x * x);
                        worst = worst.max((out[j * n + i] - exact).abs());
                    }
                }
                worst
            })
            .collect();
        for pair in errs.windows(2) {
            assert!((pair[0] / pair[1]).log2() > 1.9, "{errs:?}");
        }
        // Pure square is reproduced exactly.
        let n = 6;
        let w = lattice(n, 0.2, |x, _| x * x);
        let out = fd_elliptic_on_scan(&w, &vec![d0; n * n], n, n, 0.2, 0.2).unwrap();
        assert!((out[2 * n + 2] + 2.0 * d0).abs() < 1e-12);
    }

    #[test]
    fn linear_input_sees_only_the_diffusion_gradient() {
        // -∇·D∇(ax + by) = -(a ∂xD + b ∂yD).
        let (a, b) = (1.3, -0.7);
        let dfun = |x: f64, y: f64| 0.03 + 0.01 * (x).sin() * (1.0 + 0.5 * y);
        let errs: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&h| {
                let n = (2.0 / h) as usize + 1;
                let w = lattice(n, h, |x, y| a * x + b * y);
                let d = lattice(n, h, dfun);
                let out = fd_elliptic_on_scan(&w, &d, n, n, h, h).unwrap();
                let mut worst: f64 = 0.0;
                for j in 1..n - 1 {
                    for i in 1..n - 1 {
                        let (x, y) = (i as f64 * h, j as f64 * h);
                        let dx = 0.01 * x.cos() * (1.0 + 0.5 * y);
                        let dy = 0.005 * x.sin();
                        worst = worst.max((out[j * n + i] + a * dx + b * dy).abs());
                    }
                }
                worst
            })
            .collect();
        for pair in errs.windows(2) {
            assert!((pair[0] / pair[1]).log2() > 1.9, "{errs:?}");
        }
    }

    #[test]
    fn small_lattices_are_rejected() {
        assert!(fd_elliptic_on_scan(&[1.0; 6], &[1.0; 6], 3, 2, 1.0, 1.0).is_err());
        assert!(fd_elliptic_on_scan(&[1.0; 9], &[1.0; 8], 3, 3, 1.0, 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ReconConfig::default().validate().is_ok());
        let bad = ReconConfig {
            relaxation: 0.0,
            ..ReconConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ReconConfig {
            mu_min: 1.0,
            mu_max: 0.5,
            ..ReconConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn box_filter_keeps_ring_and_averages_inside() {
        let g = RegularGrid::square(9, 5.0).unwrap();
        let scan = crate::optics::make_scan_grid(&g, crate::grid::Rect::new(1.0, 4.0, 1.0, 4.0).unwrap(), 4, 4).unwrap();
        let v: Vec<f64> = (0..16).map(|k| k as f64).collect();
        let f = box_filter(&v, &scan);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[15], 15.0);
        assert!((f[5] - 5.0).abs() < 1e-14); // linear data is preserved
    }
}
