//! Bilinear (Q1) finite elements for `-∇·D∇u + μu` with Robin boundary terms.
//!
//! The weak form assembled here is
//!
//! ```text
//! ∫ D ∇u·∇φ + ∫ μ u φ + (γ/2) ∮ u φ  =  ∫ f φ + (1/2) ∮ S φ
//! ```
//!
//! which is the variational statement of `-∇·D∇u + μu = f` with `2D ∂u/∂n + γu = S`.
//! Coefficients are nodal fields interpolated bilinearly and integrated with 2×2 Gauss
//! points per cell; boundary integrals use 2-point Gauss per edge.

use crate::error::{Result, UotError};
use crate::grid::{NodalField, RegularGrid};
use crate::sparse::CsrMatrix;

const GAUSS: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// Q1 shape functions on the unit square, ordered counter-clockwise from the lower left.
fn shape(s: f64, t: f64) -> [f64; 4] {
    [(1.0 - s) * (1.0 - t), s * (1.0 - t), s * t, (1.0 - s) * t]
}

/// Shape-function derivatives with respect to the local coordinates `(s, t)`.
fn shape_grad(s: f64, t: f64) -> [[f64; 2]; 4] {
    [
        [-(1.0 - t), -(1.0 - s)],
        [1.0 - t, -s],
        [t, s],
        [-t, 1.0 - s],
    ]
}

/// Local (di, dj) offsets of the four cell nodes.
const CORNERS: [(usize, usize); 4] = [(0, 0), (1, 0), (1, 1), (0, 1)];

/// Row-wise accumulator for the 9-point Q1 stencil.
struct StencilBuilder {
    grid: RegularGrid,
    vals: Vec<[f64; 9]>,
}

impl StencilBuilder {
    fn new(grid: RegularGrid) -> Self {
        Self {
            grid,
            vals: vec![[0.0; 9]; grid.len()],
        }
    }

    fn add(&mut self, (ri, rj): (usize, usize), (ci, cj): (usize, usize), v: f64) {
        let slot = (cj + 1 - rj) * 3 + (ci + 1 - ri);
        self.vals[self.grid.index(ri, rj)][slot] += v;
    }

    fn finish(self) -> CsrMatrix {
        let g = self.grid;
        let (nx, ny) = (g.nx(), g.ny());
        let mut row_ptr = Vec::with_capacity(g.len() + 1);
        let mut col_idx = Vec::with_capacity(9 * g.len());
        let mut values = Vec::with_capacity(9 * g.len());
        row_ptr.push(0);
        for j in 0..ny {
            for i in 0..nx {
                let row = &self.vals[g.index(i, j)];
                for dj in 0..3usize {
                    for di in 0..3usize {
                        let (ci, cj) = (i + di, j + dj);
                        if ci == 0 || cj == 0 || ci > nx || cj > ny {
                            continue;
                        }
                        col_idx.push(g.index(ci - 1, cj - 1));
                        values.push(row[dj * 3 + di]);
                    }
                }
                row_ptr.push(col_idx.len());
            }
        }
        CsrMatrix::from_raw(g.len(), row_ptr, col_idx, values).expect("stencil CSR is well formed")
    }
}

fn cell_values(field: &[f64], nx: usize, i: usize, j: usize) -> [f64; 4] {
    let k = j * nx + i;
    [field[k], field[k + 1], field[k + nx + 1], field[k + nx]]
}

fn interp(c: &[f64; 4], n: &[f64; 4]) -> f64 {
    c[0] * n[0] + c[1] * n[1] + c[2] * n[2] + c[3] * n[3]
}

/// Each boundary edge as (start node, end node, edge length), counter-clockwise.
fn boundary_edges(grid: &RegularGrid) -> Vec<((usize, usize), (usize, usize), f64)> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let (hx, hy) = (grid.hx(), grid.hy());
    let mut edges = Vec::with_capacity(2 * (nx + ny));
    for i in 0..nx - 1 {
        edges.push(((i, 0), (i + 1, 0), hx));
        edges.push(((i, ny - 1), (i + 1, ny - 1), hx));
    }
    for j in 0..ny - 1 {
        edges.push(((0, j), (0, j + 1), hy));
        edges.push(((nx - 1, j), (nx - 1, j + 1), hy));
    }
    edges
}

fn assemble(grid: &RegularGrid, d: Option<&[f64]>, mu: Option<&[f64]>, gamma: f64) -> CsrMatrix {
    let (nx, ny) = (grid.nx(), grid.ny());
    let (hx, hy) = (grid.hx(), grid.hy());
    let w = 0.25 * hx * hy;
    let mut b = StencilBuilder::new(*grid);

    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let dc = d.map(|d| cell_values(d, nx, i, j));
            let mc = mu.map(|m| cell_values(m, nx, i, j));
            let mut local = [[0.0; 4]; 4];
            for &s in &GAUSS {
                for &t in &GAUSS {
                    let n = shape(s, t);
                    let dn = shape_grad(s, t);
                    let dval = dc.as_ref().map_or(0.0, |c| interp(c, &n));
                    let mval = mc.as_ref().map_or(1.0, |c| interp(c, &n));
                    for a in 0..4 {
                        for bb in 0..4 {
                            let stiff = dn[a][0] * dn[bb][0] / (hx * hx) + dn[a][1] * dn[bb][1] / (hy * hy);
                            local[a][bb] += w * (dval * stiff + mval * n[a] * n[bb]);
                        }
                    }
                }
            }
            for a in 0..4 {
                let ra = (i + CORNERS[a].0, j + CORNERS[a].1);
                for bb in 0..4 {
                    let cb = (i + CORNERS[bb].0, j + CORNERS[bb].1);
                    b.add(ra, cb, local[a][bb]);
                }
            }
        }
    }

    if gamma != 0.0 {
        for (p, q, len) in boundary_edges(grid) {
            // 2-point Gauss of N_a N_b along the edge: len/3 on the diagonal, len/6 off it.
            let mut m = [[0.0; 2]; 2];
            for &s in &GAUSS {
                let n = [1.0 - s, s];
                for a in 0..2 {
                    for c in 0..2 {
                        m[a][c] += 0.5 * len * n[a] * n[c];
                    }
                }
            }
            let nodes = [p, q];
            for a in 0..2 {
                for c in 0..2 {
                    b.add(nodes[a], nodes[c], 0.5 * gamma * m[a][c]);
                }
            }
        }
    }
    b.finish()
}

/// Assembles the symmetric system matrix of `-∇·D∇ + μ` with Robin coefficient `γ/2`.
pub fn assemble_system(
    grid: &RegularGrid,
    d: &NodalField,
    mu: &NodalField,
    gamma: f64,
) -> Result<CsrMatrix> {
    grid.check_same(d.grid())?;
    grid.check_same(mu.grid())?;
    if let Some(k) = d.values().iter().position(|&v| v <= 0.0) {
        return Err(UotError::invalid(format!(
            "diffusion coefficient must be positive, got {} at node {k}",
            d.values()[k]
        )));
    }
    if let Some(k) = mu.values().iter().position(|&v| v < 0.0) {
        return Err(UotError::invalid(format!(
            "absorption must be non-negative, got {} at node {k}",
            mu.values()[k]
        )));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(UotError::invalid(format!("gamma must be non-negative, got {gamma}")));
    }
    Ok(assemble(grid, Some(d.values()), Some(mu.values()), gamma))
}

/// Consistent Q1 mass matrix `∫ φ_i φ_j`.
pub fn mass_matrix(grid: &RegularGrid) -> CsrMatrix {
    assemble(grid, None, None, 0.0)
}

/// Load vector `∫ f φ_i` for a nodal field `f`.
pub fn assemble_rhs_volume(grid: &RegularGrid, f: &NodalField) -> Result<Vec<f64>> {
    grid.check_same(f.grid())?;
    let (nx, ny) = (grid.nx(), grid.ny());
    let w = 0.25 * grid.hx() * grid.hy();
    let mut load = vec![0.0; grid.len()];
    let fv = f.values();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let c = cell_values(fv, nx, i, j);
            let mut local = [0.0; 4];
            for &s in &GAUSS {
                for &t in &GAUSS {
                    let n = shape(s, t);
                    let fg = interp(&c, &n);
                    for a in 0..4 {
                        local[a] += w * fg * n[a];
                    }
                }
            }
            for a in 0..4 {
                load[grid.index(i + CORNERS[a].0, j + CORNERS[a].1)] += local[a];
            }
        }
    }
    Ok(load)
}

/// Boundary load `(1/2) ∮ S φ_i` for a boundary data function `S(x, y)`.
pub fn assemble_rhs_boundary(grid: &RegularGrid, s: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut load = vec![0.0; grid.len()];
    for (p, q, len) in boundary_edges(grid) {
        let (xp, yp) = (grid.x(p.0), grid.y(p.1));
        let (xq, yq) = (grid.x(q.0), grid.y(q.1));
        for &g in &GAUSS {
            let x = xp + g * (xq - xp);
            let y = yp + g * (yq - yp);
            let sv = 0.5 * s(x, y) * 0.5 * len;
            load[grid.index(p.0, p.1)] += sv * (1.0 - g);
            load[grid.index(q.0, q.1)] += sv * g;
        }
    }
    load
}

/// Nodal representation of a point source: entry `i` is `φ_i(point)`.
pub fn delta_load(grid: &RegularGrid, x: f64, y: f64) -> Result<Vec<f64>> {
    let cp = grid.locate(x, y)?;
    let mut load = vec![0.0; grid.len()];
    for (k, w) in cp.weights(grid.nx()) {
        load[k] += w;
    }
    Ok(load)
}

/// Bilinear interpolation of a nodal field.
pub fn evaluate(field: &NodalField, x: f64, y: f64) -> Result<f64> {
    let cp = field.grid().locate(x, y)?;
    let v = field.values();
    Ok(cp.weights(field.grid().nx()).iter().map(|&(k, w)| w * v[k]).sum())
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// The sixteen (flat index, weight) pairs of the Catmull-Rom stencil at a point. Indices are
/// clamped in the outermost cells, so a node may appear more than once.
fn cubic_stencil(grid: &RegularGrid, x: f64, y: f64) -> Result<[(usize, f64); 16]> {
    let cp = grid.locate(x, y)?;
    let wx = catmull_rom(cp.s);
    let wy = catmull_rom(cp.t);
    let clamp = |base: usize, off: usize, n: usize| (base + off).saturating_sub(1).min(n - 1);
    let mut out = [(0usize, 0.0); 16];
    for (b, wyb) in wy.iter().enumerate() {
        let j = clamp(cp.j, b, grid.ny());
        for (a, wxa) in wx.iter().enumerate() {
            out[4 * b + a] = (grid.index(clamp(cp.i, a, grid.nx()), j), wyb * wxa);
        }
    }
    Ok(out)
}

/// Tensor-product Catmull-Rom interpolation of nodal values.
///
/// Third-order accurate away from the boundary and smooth in the evaluation point, unlike
/// [`evaluate`] whose error oscillates from cell to cell. Stencil indices are clamped in the
/// outermost cells, where accuracy drops to that of the bilinear interpolant.
pub fn evaluate_cubic(field: &NodalField, x: f64, y: f64) -> Result<f64> {
    let v = field.values();
    Ok(cubic_stencil(field.grid(), x, y)?.iter().map(|&(k, w)| w * v[k]).sum())
}

/// Point load dual to [`evaluate_cubic`]: `load · f = evaluate_cubic(f, x, y)` for nodal `f`.
pub fn cubic_delta_load(grid: &RegularGrid, x: f64, y: f64) -> Result<Vec<f64>> {
    let mut load = vec![0.0; grid.len()];
    for (k, w) in cubic_stencil(grid, x, y)? {
        load[k] += w;
    }
    Ok(load)
}

/// Nodal derivative fields: central differences inside, one-sided on the boundary.
pub fn nodal_gradient(field: &NodalField) -> (NodalField, NodalField) {
    let g = *field.grid();
    let (nx, ny) = (g.nx(), g.ny());
    let (hx, hy) = (g.hx(), g.hy());
    let v = field.values();
    let mut gx = vec![0.0; g.len()];
    let mut gy = vec![0.0; g.len()];
    for j in 0..ny {
        for i in 0..nx {
            let k = g.index(i, j);
            gx[k] = if i == 0 {
                (v[k + 1] - v[k]) / hx
            } else if i + 1 == nx {
                (v[k] - v[k - 1]) / hx
            } else {
                (v[k + 1] - v[k - 1]) / (2.0 * hx)
            };
            gy[k] = if j == 0 {
                (v[k + nx] - v[k]) / hy
            } else if j + 1 == ny {
                (v[k] - v[k - nx]) / hy
            } else {
                (v[k + nx] - v[k - nx]) / (2.0 * hy)
            };
        }
    }
    (
        NodalField::new(g, gx).expect("finite differences of a finite field"),
        NodalField::new(g, gy).expect("finite differences of a finite field"),
    )
}

/// Gradient at an arbitrary point: nodal differences, then bilinear interpolation.
pub fn gradient_at(field: &NodalField, x: f64, y: f64) -> Result<(f64, f64)> {
    let (gx, gy) = nodal_gradient(field);
    Ok((evaluate(&gx, x, y)?, evaluate(&gy, x, y)?))
}
