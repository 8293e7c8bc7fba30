//! Uniform rectangular meshes and scalar fields sampled at their nodes.

use crate::error::{Result, UotError};

/// Relative tolerance used when deciding whether a point sits on the domain closure.
const LOCATE_TOL: f64 = 1e-12;

/// Axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]` (cm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite());
        if !finite || x_max <= x_min || y_max <= y_min {
            return Err(UotError::invalid(format!(
                "degenerate rectangle [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn contains_strictly(&self, x: f64, y: f64) -> bool {
        x > self.x_min && x < self.x_max && y > self.y_min && y < self.y_max
    }
}

/// Uniform node lattice on `[x0, x0+lx] × [y0, y0+ly]`.
///
/// Node `(i, j)` has flat index `j * nx + i` and sits at `(x0 + i*hx, y0 + j*hy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularGrid {
    nx: usize,
    ny: usize,
    x0: f64,
    y0: f64,
    lx: f64,
    ly: f64,
}

/// Location of a point inside a grid cell: lower-left node and local coordinates in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CellPoint {
    pub i: usize,
    pub j: usize,
    pub s: f64,
    pub t: f64,
}

impl CellPoint {
    /// The four (flat index, bilinear weight) pairs, counter-clockwise from the lower left.
    pub fn weights(&self, nx: usize) -> [(usize, f64); 4] {
        let k = self.j * nx + self.i;
        let (s, t) = (self.s, self.t);
        [
            (k, (1.0 - s) * (1.0 - t)),
            (k + 1, s * (1.0 - t)),
            (k + nx + 1, s * t),
            (k + nx, (1.0 - s) * t),
        ]
    }
}

impl RegularGrid {
    pub fn new(nx: usize, ny: usize, x0: f64, y0: f64, lx: f64, ly: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(UotError::invalid(format!(
                "grid needs at least 2 nodes per axis, got {nx}x{ny}"
            )));
        }
        if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
            return Err(UotError::invalid(format!(
                "grid extents must be positive, got {lx}x{ly}"
            )));
        }
        if !(x0.is_finite() && y0.is_finite()) {
            return Err(UotError::invalid("grid origin must be finite"));
        }
        Ok(Self {
            nx,
            ny,
            x0,
            y0,
            lx,
            ly,
        })
    }

    /// Square grid with `n × n` nodes on `[0, side]²`.
    pub fn square(n: usize, side: f64) -> Result<Self> {
        Self::new(n, n, 0.0, 0.0, side, side)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn x0(&self) -> f64 {
        self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn lx(&self) -> f64 {
        self.lx
    }
    pub fn ly(&self) -> f64 {
        self.ly
    }
    pub fn hx(&self) -> f64 {
        self.lx / (self.nx - 1) as f64
    }
    pub fn hy(&self) -> f64 {
        self.ly / (self.ny - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bounds(&self) -> Rect {
        Rect {
            x_min: self.x0,
            x_max: self.x0 + self.lx,
            y_min: self.y0,
            y_max: self.y0 + self.ly,
        }
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    pub fn x(&self, i: usize) -> f64 {
        // Pin the last node to the exact extent.
        if i + 1 == self.nx {
            self.x0 + self.lx
        } else {
            self.x0 + i as f64 * self.hx()
        }
    }

    pub fn y(&self, j: usize) -> f64 {
        if j + 1 == self.ny {
            self.y0 + self.ly
        } else {
            self.y0 + j as f64 * self.hy()
        }
    }

    pub fn node(&self, k: usize) -> (f64, f64) {
        let (i, j) = self.ij(k);
        (self.x(i), self.y(j))
    }

    pub fn is_boundary_node(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.nx || j + 1 == self.ny
    }

    /// True when the point lies on `∂Ω` up to a relative tolerance.
    pub fn on_boundary(&self, x: f64, y: f64) -> bool {
        let tol = LOCATE_TOL * self.lx.max(self.ly);
        let b = self.bounds();
        let inside = x >= b.x_min - tol && x <= b.x_max + tol && y >= b.y_min - tol && y <= b.y_max + tol;
        inside
            && ((x - b.x_min).abs() <= tol
                || (x - b.x_max).abs() <= tol
                || (y - b.y_min).abs() <= tol
                || (y - b.y_max).abs() <= tol)
    }

    /// Nearest boundary node to a point, with the snap distance.
    pub fn nearest_boundary_node(&self, x: f64, y: f64) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.ny {
            for i in 0..self.nx {
                if !self.is_boundary_node(i, j) {
                    continue;
                }
                let d = ((self.x(i) - x).powi(2) + (self.y(j) - y).powi(2)).sqrt();
                if d < best.1 {
                    best = (self.index(i, j), d);
                }
            }
        }
        best
    }

    pub(crate) fn locate(&self, x: f64, y: f64) -> Result<CellPoint> {
        let tol = LOCATE_TOL * self.lx.max(self.ly);
        let b = self.bounds();
        if !(x >= b.x_min - tol && x <= b.x_max + tol && y >= b.y_min - tol && y <= b.y_max + tol) {
            return Err(UotError::OutsideDomain { x, y });
        }
        let (i, s) = locate_axis(x - self.x0, self.hx(), self.nx);
        let (j, t) = locate_axis(y - self.y0, self.hy(), self.ny);
        Ok(CellPoint { i, j, s, t })
    }

    pub fn check_same(&self, other: &RegularGrid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(UotError::GridMismatch(format!(
                "{}x{} on [{}, {}]x[{}, {}] vs {}x{} on [{}, {}]x[{}, {}]",
                self.nx,
                self.ny,
                self.x0,
                self.x0 + self.lx,
                self.y0,
                self.y0 + self.ly,
                other.nx,
                other.ny,
                other.x0,
                other.x0 + other.lx,
                other.y0,
                other.y0 + other.ly
            )))
        }
    }
}

fn locate_axis(offset: f64, h: f64, n: usize) -> (usize, f64) {
    let r = (offset / h).clamp(0.0, (n - 1) as f64);
    let cell = (r.floor() as usize).min(n - 2);
    let local = (r - cell as f64).clamp(0.0, 1.0);
    (cell, local)
}

/// Scalar field sampled at the nodes of a [`RegularGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct NodalField {
    grid: RegularGrid,
    values: Vec<f64>,
}

impl NodalField {
    pub fn new(grid: RegularGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(UotError::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(UotError::invalid(format!("non-finite value at node {k}")));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: RegularGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: RegularGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.node(k);
                f(x, y)
            })
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &RegularGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise combination of two fields on the same grid.
    pub fn zip_with(&self, other: &NodalField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}
