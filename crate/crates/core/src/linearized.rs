//! Linearization of the measurement map about a background absorption `μ₀`.
//!
//! With constant diffusion `D₀` and perfectly focused ultrasound, a first-order
//! perturbation `μ₁` supported in the region of interest `U` and the resulting measurement
//! perturbation `h₁` are related by
//!
//! ```text
//! (1 − K₁ − K₂) μ₁ = −(1 / 2u₀) [−∇·D₀∇ + μ₀] (h₁ / (α G₀^η))
//! K₁g = A · φ(g),      A = −(1 / 2u₀) [−∇·D₀∇](u₀ / G₀^η)
//! K₂g = B · ∇φ(g),     B = (D₀ / u₀) ∇(u₀ / G₀^η)
//! ```
//!
//! where `φ(g)` solves the homogeneous-Robin problem with right-hand side `G₀^η g`.
//! This module evaluates those operators numerically and checks the relation against
//! finite differences of the nonlinear forward model.

use rayon::prelude::*;

use crate::error::{Result, UotError};
use crate::fem::{assemble_rhs_volume, evaluate, evaluate_cubic, mass_matrix, nodal_gradient};
use crate::forward::{measure_adjoint, DiffusionOperator, ForwardModel, SourceSpec};
use crate::greens::greens_with;
use crate::grid::{NodalField, Rect, RegularGrid};
use crate::optics::{make_scan_grid, ScanGrid, UltrasoundShape};
use crate::recon::fd_elliptic_on_scan;
use crate::sparse::SolverSettings;

/// Nodes per side of the grid used by the linearized probes unless a caller picks another.
pub const DEFAULT_LINEAR_N: usize = 81;

/// Background state and precomputed factor fields of the linearized operators.
#[derive(Debug)]
pub struct LinearizedContext {
    pub mu0: NodalField,
    /// Constant diffusion coefficient `1 / (3 μs′)`.
    pub d0: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub src: SourceSpec,
    /// Detector after snapping to a boundary node.
    pub eta: (f64, f64),
    pub u0: NodalField,
    pub g_eta: NodalField,
    /// Multiplier of `φ` in `K₁`.
    pub a: NodalField,
    /// Components of the vector multiplier of `∇φ` in `K₂`.
    pub b: (NodalField, NodalField),
    /// Focus lattice over `U`, aligned with grid nodes.
    pub scan: ScanGrid,
    /// `min u₀` and `min G₀^η` over the closed region.
    pub lower_bounds: (f64, f64),
    in_region: Vec<bool>,
    op: DiffusionOperator,
    settings: SolverSettings,
}

/// Largest node-aligned lattice inside `region`.
pub fn aligned_scan(grid: &RegularGrid, region: Rect) -> Result<ScanGrid> {
    let i0 = ((region.x_min - grid.x0()) / grid.hx() - 1e-9).ceil() as usize;
    let i1 = ((region.x_max - grid.x0()) / grid.hx() + 1e-9).floor() as usize;
    let j0 = ((region.y_min - grid.y0()) / grid.hy() - 1e-9).ceil() as usize;
    let j1 = ((region.y_max - grid.y0()) / grid.hy() + 1e-9).floor() as usize;
    if i1 < i0 + 2 || j1 < j0 + 2 {
        return Err(UotError::invalid("region of interest holds fewer than 3x3 grid nodes"));
    }
    let rect = Rect::new(grid.x(i0), grid.x(i1), grid.y(j0), grid.y(j1))?;
    make_scan_grid(grid, rect, i1 - i0 + 1, j1 - j0 + 1)
}

fn region_mask(grid: &RegularGrid, region: Rect) -> Vec<bool> {
    let tol = 1e-9 * grid.lx().max(grid.ly());
    (0..grid.len())
        .map(|k| {
            let (x, y) = grid.node(k);
            x >= region.x_min - tol && x <= region.x_max + tol && y >= region.y_min - tol && y <= region.y_max + tol
        })
        .collect()
}

/// Factor fields `A` and `B` from background fields on the grid.
fn factor_fields(u0: &NodalField, g_eta: &NodalField, d0: f64) -> Result<(NodalField, (NodalField, NodalField))> {
    let grid = *u0.grid();
    let ratio = u0.zip_with(g_eta, |u, g| u / g)?;
    let lap = fd_elliptic_on_scan(
        ratio.values(),
        &vec![d0; grid.len()],
        grid.nx(),
        grid.ny(),
        grid.hx(),
        grid.hy(),
    )?;
    let a: Vec<f64> = lap.iter().zip(u0.values()).map(|(l, u)| -l / (2.0 * u)).collect();
    let (rx, ry) = nodal_gradient(&ratio);
    let bx = rx.zip_with(u0, |r, u| d0 * r / u)?;
    let by = ry.zip_with(u0, |r, u| d0 * r / u)?;
    Ok((NodalField::new(grid, a)?, (bx, by)))
}

impl LinearizedContext {
    /// Assembles the background problem: `u₀` with constant `D₀`, `G₀^η`, and the factor fields.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        mu0: &NodalField,
        mus_prime: f64,
        gamma: f64,
        src: SourceSpec,
        eta: (f64, f64),
        region: Rect,
        alpha: f64,
        settings: SolverSettings,
    ) -> Result<Self> {
        let grid = *mu0.grid();
        if mu0.min() <= 0.0 {
            return Err(UotError::invalid("background absorption must be positive"));
        }
        if !(mus_prime > 0.0) {
            return Err(UotError::invalid("mus_prime must be positive"));
        }
        let d0 = 1.0 / (3.0 * mus_prime);
        let d_field = NodalField::constant(grid, d0);
        let model = ForwardModel::with_diffusion(mu0, &d_field, gamma, src, alpha, settings)?;
        let op = DiffusionOperator::new(&d_field, mu0, gamma, settings)?;
        let green = greens_with(&op, eta)?;
        let scan = aligned_scan(&grid, region)?;
        let (a, b) = factor_fields(model.incident(), &green.field, d0)?;
        Self::assemble(
            mu0.clone(),
            d0,
            gamma,
            alpha,
            src,
            green.detector,
            model.incident().clone(),
            green.field,
            a,
            b,
            scan,
            op,
            settings,
        )
    }

    /// Context from prescribed background fields; `A` and `B` are derived from them.
    ///
    /// Useful for synthetic probes. The potential operator still uses the PDE built from
    /// `mu0`, `d0` and `gamma`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_fields(
        mu0: &NodalField,
        d0: f64,
        gamma: f64,
        u0: NodalField,
        g_eta: NodalField,
        eta: (f64, f64),
        region: Rect,
        settings: SolverSettings,
    ) -> Result<Self> {
        let grid = *mu0.grid();
        let op = DiffusionOperator::new(&NodalField::constant(grid, d0), mu0, gamma, settings)?;
        let scan = aligned_scan(&grid, region)?;
        let (a, b) = factor_fields(&u0, &g_eta, d0)?;
        Self::assemble(mu0.clone(), d0, gamma, 1.0, SourceSpec::default(), eta, u0, g_eta, a, b, scan, op, settings)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        mu0: NodalField,
        d0: f64,
        gamma: f64,
        alpha: f64,
        src: SourceSpec,
        eta: (f64, f64),
        u0: NodalField,
        g_eta: NodalField,
        a: NodalField,
        b: (NodalField, NodalField),
        scan: ScanGrid,
        op: DiffusionOperator,
        settings: SolverSettings,
    ) -> Result<Self> {
        let grid = *mu0.grid();
        let in_region = region_mask(&grid, scan.rect());
        let min_over = |f: &NodalField| {
            f.values()
                .iter()
                .zip(&in_region)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::INFINITY, f64::min)
        };
        let lower_bounds = (min_over(&u0), min_over(&g_eta));
        if !(lower_bounds.0 > 0.0) || !(lower_bounds.1 > 0.0) {
            return Err(UotError::ModelViolation(format!(
                "background fields are not bounded away from zero on the region: min u0 = {}, min G = {}",
                lower_bounds.0, lower_bounds.1
            )));
        }
        let finite = |f: &NodalField| f.values().iter().zip(&in_region).all(|(v, &m)| !m || v.is_finite());
        if !finite(&a) || !finite(&b.0) || !finite(&b.1) {
            return Err(UotError::ModelViolation("non-finite factor field on the region".into()));
        }
        Ok(Self {
            mu0,
            d0,
            gamma,
            alpha,
            src,
            eta,
            u0,
            g_eta,
            a,
            b,
            scan,
            lower_bounds,
            in_region,
            op,
            settings,
        })
    }

    pub fn grid(&self) -> &RegularGrid {
        self.mu0.grid()
    }

    pub fn in_region(&self) -> &[bool] {
        &self.in_region
    }

    /// Zeroes every value outside the closed region.
    pub fn restrict(&self, g: &NodalField) -> NodalField {
        let values = g
            .values()
            .iter()
            .zip(&self.in_region)
            .map(|(v, &m)| if m { *v } else { 0.0 })
            .collect();
        NodalField::new(*self.grid(), values).expect("restriction of a finite field")
    }

    /// Mass-weighted L² norm over the region nodes.
    pub fn region_norm(&self, g: &NodalField) -> f64 {
        let cell = self.grid().hx() * self.grid().hy();
        let s: f64 = g
            .values()
            .iter()
            .zip(&self.in_region)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v * v)
            .sum();
        (cell * s).sqrt()
    }

    fn check_grid(&self, g: &NodalField) -> Result<()> {
        self.grid().check_same(g.grid())
    }

    /// Sets both factor fields to zero, leaving `F` equal to the identity on `U`.
    pub fn zero_factors(&mut self) {
        let grid = *self.grid();
        self.a = NodalField::constant(grid, 0.0);
        self.b = (NodalField::constant(grid, 0.0), NodalField::constant(grid, 0.0));
    }

    /// Direct first-order measurement perturbation on the focus lattice.
    ///
    /// Solves for `u₁` and `φ(μ₁)` and returns `α (G₀^η u₁ − u₀ φ)` at every focus; a
    /// cross-check for the finite-difference route in [`consistency_residual`].
    pub fn first_order_measurement(&self, mu1: &NodalField) -> Result<Vec<f64>> {
        self.check_grid(mu1)?;
        let mu1 = self.restrict(mu1);
        let src_u = mu1.zip_with(&self.u0, |m, u| -m * u)?;
        let u1 = self.op.solve(&assemble_rhs_volume(self.grid(), &src_u)?)?;
        let phi = potential_from_density(self, &mu1)?;
        self.scan
            .foci()
            .map(|(x, y)| {
                let g = evaluate_cubic(&self.g_eta, x, y)?;
                let u0 = evaluate_cubic(&self.u0, x, y)?;
                Ok(self.alpha * (g * evaluate_cubic(&u1, x, y)? - u0 * evaluate_cubic(&phi, x, y)?))
            })
            .collect()
    }
}

/// `φ(ξ) = ∫_U G₀(ξ, z) G₀^η(z) g(z) dz`, computed as one PDE solve. Values of `g` outside
/// the region are ignored.
pub fn potential_from_density(ctx: &LinearizedContext, g: &NodalField) -> Result<NodalField> {
    ctx.check_grid(g)?;
    let source = ctx.restrict(g).zip_with(&ctx.g_eta, |a, b| a * b)?;
    ctx.op.solve(&assemble_rhs_volume(ctx.grid(), &source)?)
}

pub fn apply_k1(ctx: &LinearizedContext, g: &NodalField) -> Result<NodalField> {
    let phi = potential_from_density(ctx, g)?;
    let k = phi.zip_with(&ctx.a, |p, a| a * p)?;
    Ok(ctx.restrict(&k))
}

pub fn apply_k2(ctx: &LinearizedContext, g: &NodalField) -> Result<NodalField> {
    let phi = potential_from_density(ctx, g)?;
    Ok(ctx.restrict(&k2_from_potential(ctx, &phi)?))
}

fn k2_from_potential(ctx: &LinearizedContext, phi: &NodalField) -> Result<NodalField> {
    let (px, py) = nodal_gradient(phi);
    let kx = px.zip_with(&ctx.b.0, |p, b| p * b)?;
    let ky = py.zip_with(&ctx.b.1, |p, b| p * b)?;
    kx.zip_with(&ky, |a, b| a + b)
}

/// `F g = g − K₁ g − K₂ g` on the region, zero elsewhere. Shares one potential solve.
pub fn apply_f(ctx: &LinearizedContext, g: &NodalField) -> Result<NodalField> {
    let phi = potential_from_density(ctx, g)?;
    let k1 = phi.zip_with(&ctx.a, |p, a| a * p)?;
    let k2 = k2_from_potential(ctx, &phi)?;
    let values = g
        .values()
        .iter()
        .zip(k1.values().iter().zip(k2.values()))
        .zip(ctx.in_region())
        .map(|((&gv, (&a, &b)), &m)| if m { gv - a - b } else { 0.0 })
        .collect();
    NodalField::new(*ctx.grid(), values)
}

/// Right-hand side `−(1/2u₀)[−∇·D₀∇ + μ₀](h₁ / (α G₀^η))` on the focus lattice.
///
/// Ring foci have no full stencil and are returned as zero.
pub fn rhs_from_measurement(ctx: &LinearizedContext, h1: &[f64]) -> Result<Vec<f64>> {
    let scan = &ctx.scan;
    if h1.len() != scan.len() {
        return Err(UotError::DimensionMismatch {
            expected: scan.len(),
            got: h1.len(),
        });
    }
    let mut ratio = Vec::with_capacity(scan.len());
    let mut u0 = Vec::with_capacity(scan.len());
    let mut mu0 = Vec::with_capacity(scan.len());
    for (k, (x, y)) in scan.foci().enumerate() {
        ratio.push(h1[k] / (ctx.alpha * evaluate(&ctx.g_eta, x, y)?));
        u0.push(evaluate(&ctx.u0, x, y)?);
        mu0.push(evaluate(&ctx.mu0, x, y)?);
    }
    let (d1, d2) = scan.spacing();
    let lap = fd_elliptic_on_scan(&ratio, &vec![ctx.d0; scan.len()], scan.n1, scan.n2, d1, d2)?;
    let mut out = vec![0.0; scan.len()];
    for j in 1..scan.n2 - 1 {
        for i in 1..scan.n1 - 1 {
            let k = j * scan.n1 + i;
            out[k] = -(lap[k] + mu0[k] * ratio[k]) / (2.0 * u0[k]);
        }
    }
    Ok(out)
}

/// Samples a grid field at the foci.
pub fn sample_on_scan(ctx: &LinearizedContext, f: &NodalField) -> Result<Vec<f64>> {
    ctx.scan.foci().map(|(x, y)| evaluate(f, x, y)).collect()
}

/// Mass-weighted L² norm over interior (non-ring) foci.
pub fn interior_norm(scan: &ScanGrid, values: &[f64]) -> f64 {
    let (d1, d2) = scan.spacing();
    let mut s = 0.0;
    for j in 1..scan.n2 - 1 {
        for i in 1..scan.n1 - 1 {
            s += values[j * scan.n1 + i].powi(2);
        }
    }
    (d1 * d2 * s).sqrt()
}

/// Perfect-focus measurements of the nonlinear model with constant `D₀`.
fn nonlinear_measurements(ctx: &LinearizedContext, mu: &NodalField) -> Result<Vec<f64>> {
    let d = NodalField::constant(*ctx.grid(), ctx.d0);
    let model = ForwardModel::with_diffusion(mu, &d, ctx.gamma, ctx.src, ctx.alpha, ctx.settings)?;
    Ok(measure_adjoint(&model, &ctx.scan, UltrasoundShape::Perfect, ctx.eta)?.values)
}

/// `r(ε) = ‖F μ₁ − rhs(h₁^ε)‖ / ‖μ₁‖` over interior foci, with
/// `h₁^ε = (h(μ₀ + εμ₁) − h(μ₀)) / ε` from the nonlinear model.
pub fn consistency_residual(ctx: &LinearizedContext, mu1: &NodalField, eps_list: &[f64]) -> Result<Vec<f64>> {
    ctx.check_grid(mu1)?;
    let mu1 = ctx.restrict(mu1);
    let mu1_scan = sample_on_scan(ctx, &mu1)?;
    let norm = interior_norm(&ctx.scan, &mu1_scan);
    if norm == 0.0 {
        return Ok(vec![0.0; eps_list.len()]);
    }
    let f_mu1 = sample_on_scan(ctx, &apply_f(ctx, &mu1)?)?;
    let h0 = nonlinear_measurements(ctx, &ctx.mu0)?;

    eps_list
        .par_iter()
        .map(|&eps| {
            let perturbed = ctx.mu0.zip_with(&mu1, |m, d| m + eps * d)?;
            if perturbed.min() <= 0.0 {
                return Err(UotError::invalid(format!("eps = {eps} makes the absorption non-positive")));
            }
            let h = nonlinear_measurements(ctx, &perturbed)?;
            let h1: Vec<f64> = h.iter().zip(&h0).map(|(a, b)| (a - b) / eps).collect();
            let rhs = rhs_from_measurement(ctx, &h1)?;
            let diff: Vec<f64> = f_mu1.iter().zip(&rhs).map(|(a, b)| a - b).collect();
            Ok(interior_norm(&ctx.scan, &diff) / norm)
        })
        .collect()
}

/// Oscillatory probe `sin(kπ(x − x_min)/W) sin(kπ(y − y_min)/H)` on the region.
pub fn oscillatory_probe(ctx: &LinearizedContext, k: u32) -> NodalField {
    let r = ctx.scan.rect();
    let kk = k as f64 * std::f64::consts::PI;
    let g = NodalField::from_fn(*ctx.grid(), |x, y| {
        (kk * (x - r.x_min) / r.width()).sin() * (kk * (y - r.y_min) / r.height()).sin()
    });
    ctx.restrict(&g)
}

/// `(‖K₁ g_k‖ / ‖g_k‖, ‖K₂ g_k‖ / ‖g_k‖)` for each oscillation index.
pub fn compactness_probe(ctx: &LinearizedContext, ks: &[u32]) -> Result<Vec<(f64, f64)>> {
    ks.iter()
        .map(|&k| {
            let g = oscillatory_probe(ctx, k);
            let n = ctx.region_norm(&g);
            Ok((ctx.region_norm(&apply_k1(ctx, &g)?) / n, ctx.region_norm(&apply_k2(ctx, &g)?) / n))
        })
        .collect()
}

/// Dense matrix of `F` restricted to region nodes, one column per node.
pub fn dense_operator(ctx: &LinearizedContext) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let nodes: Vec<usize> = (0..ctx.grid().len()).filter(|&k| ctx.in_region[k]).collect();
    let mut columns = Vec::with_capacity(nodes.len());
    for &node in &nodes {
        let mut e = NodalField::constant(*ctx.grid(), 0.0);
        e.values_mut()[node] = 1.0;
        let fe = apply_f(ctx, &e)?;
        columns.push(nodes.iter().map(|&r| fe.values()[r]).collect::<Vec<f64>>());
    }
    // Transpose columns into rows.
    let n = nodes.len();
    let rows = (0..n).map(|r| (0..n).map(|c| columns[c][r]).collect()).collect();
    Ok((nodes, rows))
}

/// Conjugate gradients on the normal equations `MᵀM x = Mᵀb` for a dense square matrix.
pub fn least_squares_cgnr(m: &[Vec<f64>], b: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, usize) {
    let n = b.len();
    let mul = |x: &[f64]| -> Vec<f64> { m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect() };
    let mul_t = |y: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (row, &yr) in m.iter().zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yr;
            }
        }
        out
    };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = mul_t(&r);
    let mut p = z.clone();
    let z0 = dot(&z, &z).sqrt();
    if z0 == 0.0 {
        return (x, 0);
    }
    let mut zz = z0 * z0;
    for it in 0..max_iter {
        let w = mul(&p);
        let alpha = zz / dot(&w, &w);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * w[i];
        }
        z = mul_t(&r);
        let zz_next = dot(&z, &z);
        if zz_next.sqrt() <= tol * z0 {
            return (x, it + 1);
        }
        let beta = zz_next / zz;
        zz = zz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    (x, max_iter)
}

/// Mass matrix products are needed by callers comparing L² norms on the full grid.
pub fn grid_mass_norm(g: &NodalField) -> f64 {
    let m = mass_matrix(g.grid());
    let mg = m.mul_vec(g.values());
    g.values().iter().zip(&mg).map(|(a, b)| a * b).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{GAMMA, MUS_PRIME, MU_BAR};

    fn region() -> Rect {
        Rect::new(0.5, 4.5, 0.5, 4.5).unwrap()
    }

    fn context(n: usize) -> LinearizedContext {
        let grid = RegularGrid::square(n, 5.0).unwrap();
        LinearizedContext::build(
            &NodalField::constant(grid, MU_BAR),
            MUS_PRIME,
            GAMMA,
            SourceSpec::default(),
            (5.0, 2.5),
            region(),
            1.0,
            SolverSettings::default(),
        )
        .unwrap()
    }

    fn bump(ctx: &LinearizedContext, amp: f64) -> NodalField {
        let g = NodalField::from_fn(*ctx.grid(), |x, y| {
            let r2 = ((x - 2.3).powi(2) + (y - 2.7).powi(2)) / 0.6;
            amp * (-r2).exp()
        });
        ctx.restrict(&g)
    }

    #[test]
    fn aligned_scan_matches_grid_nodes() {
        let g = RegularGrid::square(41, 5.0).unwrap();
        let s = aligned_scan(&g, region()).unwrap();
        assert_eq!((s.n1, s.n2), (33, 33));
        assert_eq!(s.focus(0), (0.5, 0.5));
        assert_eq!(s.focus(s.len() - 1), (4.5, 4.5));
    }

    #[test]
    fn background_is_symmetric_and_bounded_below() {
        let ctx = context(41);
        let g = ctx.grid();
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                assert!((ctx.u0.at(i, j) - ctx.u0.at(i, g.ny() - 1 - j)).abs() <= 1e-10 * ctx.u0.max());
            }
        }
        assert!(ctx.lower_bounds.0 > 0.0 && ctx.lower_bounds.1 > 0.0);
    }

    #[test]
    fn zero_density_and_linearity() {
        let ctx = context(33);
        let zero = NodalField::constant(*ctx.grid(), 0.0);
        assert!(potential_from_density(&ctx, &zero).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(apply_k1(&ctx, &zero).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(apply_k2(&ctx, &zero).unwrap().values().iter().all(|&v| v == 0.0));

        let g = bump(&ctx, 1.0);
        let h = oscillatory_probe(&ctx, 2);
        let combo = g.zip_with(&h, |a, b| 2.5 * a - 0.5 * b).unwrap();
        for apply in [apply_k1, apply_k2, apply_f] {
            let lhs = apply(&ctx, &combo).unwrap();
            let a = apply(&ctx, &g).unwrap();
            let b = apply(&ctx, &h).unwrap();
            let scale = lhs.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for k in 0..lhs.values().len() {
                let expected = 2.5 * a.values()[k] - 0.5 * b.values()[k];
                assert!((lhs.values()[k] - expected).abs() <= 1e-8 * scale);
            }
        }
    }

    #[test]
    fn point_density_matches_separate_green_solve() {
        let ctx = context(33);
        let grid = *ctx.grid();
        let z0 = grid.index(12, 18);
        let mut g = NodalField::constant(grid, 0.0);
        g.values_mut()[z0] = 1.0;
        let phi = potential_from_density(&ctx, &g).unwrap();

        // Oracle: with nodal loads, φ = A⁻¹ M (G^η e_z) = G^η(z) · A⁻¹ (M e_z).
        let m = mass_matrix(&grid);
        let mut col = vec![0.0; grid.len()];
        for (c, v) in m.row(z0) {
            col[c] = v;
        }
        let oracle = ctx.op.solve(&col).unwrap();
        let gz = ctx.g_eta.values()[z0];
        for k in 0..grid.len() {
            let expected = gz * oracle.values()[k];
            assert!((phi.values()[k] - expected).abs() <= 1e-8 * phi.max());
        }
    }

    #[test]
    fn functions_outside_the_region_are_annihilated() {
        let ctx = context(33);
        let outside = NodalField::from_fn(*ctx.grid(), |x, y| if x < 0.4 || y > 4.6 { 1.0 + x } else { 0.0 });
        for apply in [apply_k1, apply_k2, apply_f] {
            assert!(apply(&ctx, &outside).unwrap().values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_factors_make_f_the_identity() {
        let mut ctx = context(25);
        ctx.zero_factors();
        let g = bump(&ctx, 0.01);
        assert_eq!(apply_f(&ctx, &g).unwrap(), g);
    }

    #[test]
    fn f_satisfies_reverse_triangle_inequality() {
        let ctx = context(33);
        for g in [bump(&ctx, 0.02), oscillatory_probe(&ctx, 3)] {
            let f = ctx.region_norm(&apply_f(&ctx, &g).unwrap());
            let lower = ctx.region_norm(&g) - ctx.region_norm(&apply_k1(&ctx, &g).unwrap()) - ctx.region_norm(&apply_k2(&ctx, &g).unwrap());
            assert!(f >= lower - 1e-12);
        }
    }

    #[test]
    fn rhs_cases() {
        let ctx = context(33);
        let n = ctx.scan.len();
        assert!(rhs_from_measurement(&ctx, &vec![0.0; n]).unwrap().iter().all(|&v| v == 0.0));

        // h₁ = c α G^η makes the inner ratio constant: rhs = -c μ₀ / (2 u₀).
        let c = 0.37;
        let h1: Vec<f64> = sample_on_scan(&ctx, &ctx.g_eta).unwrap().iter().map(|g| c * ctx.alpha * g).collect();
        let rhs = rhs_from_measurement(&ctx, &h1).unwrap();
        let u0 = sample_on_scan(&ctx, &ctx.u0).unwrap();
        for j in 1..ctx.scan.n2 - 1 {
            for i in 1..ctx.scan.n1 - 1 {
                let k = j * ctx.scan.n1 + i;
                let expected = -c * MU_BAR / (2.0 * u0[k]);
                assert!((rhs[k] - expected).abs() <= 1e-10 * expected.abs());
            }
        }
        let doubled: Vec<f64> = h1.iter().map(|v| 2.0 * v).collect();
        let rhs2 = rhs_from_measurement(&ctx, &doubled).unwrap();
        for (a, b) in rhs.iter().zip(&rhs2) {
            assert!((2.0 * a - b).abs() <= 1e-14 * b.abs().max(1e-300));
        }
        assert!(rhs_from_measurement(&ctx, &h1[1..]).is_err());
    }

    #[test]
    fn b_vanishes_at_the_critical_point_of_the_ratio() {
        let grid = RegularGrid::square(41, 5.0).unwrap();
        let mu0 = NodalField::constant(grid, MU_BAR);
        let d0 = 1.0 / (3.0 * MUS_PRIME);
        // Ratio u0 / G has a single interior minimum at (2.0, 3.0).
        let u0 = NodalField::from_fn(grid, |x, y| 1.0 + 0.1 * ((x - 2.0).powi(2) + 0.5 * (y - 3.0).powi(2)));
        let g = NodalField::constant(grid, 0.5);
        let ctx = LinearizedContext::from_fields(&mu0, d0, GAMMA, u0.clone(), g.clone(), (5.0, 2.5), region(), SolverSettings::default()).unwrap();

        let ratio = u0.zip_with(&g, |a, b| a / b).unwrap();
        let (rx, ry) = nodal_gradient(&ratio);
        let region_nodes: Vec<usize> = (0..grid.len()).filter(|&k| ctx.in_region()[k]).collect();
        let argmin = |f: &dyn Fn(usize) -> f64| {
            region_nodes
                .iter()
                .copied()
                .min_by(|&a, &b| f(a).partial_cmp(&f(b)).unwrap())
                .unwrap()
        };
        let crit = argmin(&|k| rx.values()[k].hypot(ry.values()[k]));
        let bmin = argmin(&|k| ctx.b.0.values()[k].hypot(ctx.b.1.values()[k]));
        assert_eq!(crit, bmin);
        assert_eq!(grid.node(crit), (2.0, 3.0));
        assert!(ctx.b.0.values()[bmin].hypot(ctx.b.1.values()[bmin]) < 1e-14);
    }

    #[test]
    fn direct_first_order_solve_matches_difference_quotient() {
        let ctx = context(33);
        let mu1 = bump(&ctx, 1.0);
        let direct = ctx.first_order_measurement(&mu1).unwrap();
        let h0 = nonlinear_measurements(&ctx, &ctx.mu0).unwrap();
        let mut errs = Vec::new();
        for eps in [1e-3, 5e-4] {
            let h = nonlinear_measurements(&ctx, &ctx.mu0.zip_with(&mu1, |m, d| m + eps * d).unwrap()).unwrap();
            let fd: Vec<f64> = h.iter().zip(&h0).map(|(a, b)| (a - b) / eps).collect();
            let diff: Vec<f64> = fd.iter().zip(&direct).map(|(a, b)| a - b).collect();
            errs.push(interior_norm(&ctx.scan, &diff) / interior_norm(&ctx.scan, &direct));
        }
        assert!(errs[1] < errs[0], "{errs:?}");
        assert!(errs[1] < 0.02, "{errs:?}");
    }

    #[test]
    fn zero_perturbation_has_zero_residual() {
        let ctx = context(25);
        let zero = NodalField::constant(*ctx.grid(), 0.0);
        assert_eq!(consistency_residual(&ctx, &zero, &[0.1, 0.2]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn cgnr_solves_small_dense_system() {
        let m = vec![vec![4.0, 1.0, 0.0], vec![-2.0, 3.0, 1.0], vec![0.5, 0.0, 2.0]];
        let x_true = [1.0, -2.0, 0.5];
        let b: Vec<f64> = m.iter().map(|r| r.iter().zip(&x_true).map(|(a, b)| a * b).sum()).collect();
        let (x, _) = least_squares_cgnr(&m, &b, 1e-14, 100);
        for (a, b) in x.iter().zip(&x_true) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
